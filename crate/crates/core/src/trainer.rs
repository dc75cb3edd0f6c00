//! Training loop, checkpoints and manipulation-map export.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::dataset::Dataset;
use crate::fusion::{gumbel_noise, Selection};
use crate::imaging::{ImageSample, Label};
use crate::model::{FocusModel, PreparedImage, TrainConfig};
use crate::objective::{grad_check, loss_vars};
use crate::optim::{cosine_lr, Adam};
use crate::params::trunc_normal;
use crate::pnm;
use crate::tensor::Mat;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FOCUS1";

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_loc: f64,
    pub loss_fus: f64,
    pub total: f64,
}

/// Where the per-step random streams stand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Stream index the next step would use.
    pub stream: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FocusModel,
    pub iteration: u64,
    pub rng: RngState,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Runs the full optimization. `log` sees every step as it completes.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut log: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut model = FocusModel::new(config.clone())?;
    if dataset.image_size() != Some(config.image_size) {
        return Err(Error::Input(format!(
            "dataset images are {:?} pixels, config expects {}",
            dataset.image_size(),
            config.image_size
        )));
    }
    let prepared: Vec<PreparedImage> = dataset
        .samples
        .iter()
        .map(|s| model.prepare(&s.image))
        .collect::<Result<_>>()?;
    let reals: Vec<usize> = (0..dataset.len())
        .filter(|&i| !dataset.samples[i].label.is_fake())
        .collect();
    let fakes: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].label.is_fake())
        .collect();
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::Input("training needs both real and fake samples".into()));
    }

    let mut adam = Adam::new(&model.params);
    let n = config.seq_len();
    let n_real = config.batch_size / 2;
    let n_fake = config.batch_size - n_real;
    let mut history = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let mut rng = step_rng(config.seed, step);
        let mut picks = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..n_real {
            picks.push(reals[rng.random_range(0..reals.len())]);
            labels.push(0);
        }
        for _ in 0..n_fake {
            picks.push(fakes[rng.random_range(0..fakes.len())]);
            labels.push(1);
        }
        let items: Vec<&PreparedImage> = picks.iter().map(|&i| &prepared[i]).collect();
        let input = model.stack(&items);
        let selection = Selection::training(&mut rng, config.batch_size * n, config.tau);

        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let f = model.forward(&mut g, &p, &input, &selection)?;
        let l = loss_vars(&mut g, f.y_rgb, f.y_sobel, f.y_fus, &labels, config.alpha)?;
        let entry = StepLog {
            step,
            lr: cosine_lr(config.learning_rate, step, config.iterations),
            loss_loc: g.value(l.loc).get(0, 0),
            loss_fus: g.value(l.fus).get(0, 0),
            total: g.value(l.total).get(0, 0),
        };
        if !entry.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: loss_loc {}, loss_fus {}",
                entry.loss_loc, entry.loss_fus
            )));
        }
        let grads = g.backward(l.total).params(model.params.len());
        adam.step(&mut model.params, &grads, entry.lr);
        log(&entry)?;
        history.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            iteration: config.iterations as u64,
            rng: RngState {
                seed: config.seed,
                stream: config.iterations as u64,
            },
        },
        history,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// Offset into the data section, in f64 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    iteration: u64,
    rng: RngState,
    params: Vec<ManifestEntry>,
}

impl Checkpoint {
    /// `FOCUS1 | u64 len | config JSON | u64 len | manifest JSON | f64 data`,
    /// integers and floats little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.model.config)?;
        let mut offset = 0;
        let params = self
            .model
            .params
            .iter()
            .map(|(name, m)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: [m.rows(), m.cols()],
                    offset,
                };
                offset += m.len();
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            iteration: self.iteration,
            rng: self.rng,
            params,
        })?;
        let mut out = Vec::with_capacity(32 + config.len() + manifest.len() + 8 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, m) in self.model.params.iter() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 6 || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(bad("missing FOCUS1 magic"));
        }
        let mut pos = 6;
        let section = |pos: &mut usize| -> Result<&[u8]> {
            let len_bytes: [u8; 8] = bytes
                .get(*pos..*pos + 8)
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| bad("truncated header"))?;
            let len = u64::from_le_bytes(len_bytes) as usize;
            let start = *pos + 8;
            let body = bytes
                .get(start..start.saturating_add(len))
                .ok_or_else(|| bad("truncated header"))?;
            *pos = start + len;
            Ok(body)
        };
        let config: TrainConfig = serde_json::from_slice(section(&mut pos)?)?;
        let manifest: Manifest = serde_json::from_slice(section(&mut pos)?)?;
        let mut model = FocusModel::new(config)?;
        let data = &bytes[pos..];
        if model.params.len() != manifest.params.len() {
            return Err(bad("parameter count does not match the configuration"));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, entry) in ids.into_iter().zip(&manifest.params) {
            let expected = model.params.get(id).shape();
            if model.params.name(id) != entry.name || expected != (entry.shape[0], entry.shape[1]) {
                return Err(bad(&format!("unexpected parameter {}", entry.name)));
            }
            let count = entry.shape[0] * entry.shape[1];
            let raw = data
                .get(entry.offset * 8..(entry.offset + count) * 8)
                .ok_or_else(|| bad("truncated parameter data"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *model.params.get_mut(id) = Mat::from_vec(entry.shape[0], entry.shape[1], values);
        }
        Ok(Self {
            model,
            iteration: manifest.iteration,
            rng: manifest.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        pnm::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// What a real-labeled sample receives from [`generate_maps`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapMode {
    /// All-zero maps for reals; fused maps for fakes.
    Supervision,
    /// Fake-class-only fused maps for reals; fused maps for fakes.
    FakeOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedMap {
    pub id: String,
    pub label: Label,
    pub map: Mat,
}

/// Deterministic inference over every sample in dataset order.
pub fn generate_maps(model: &FocusModel, dataset: &Dataset, mode: MapMode) -> Result<Vec<GeneratedMap>> {
    if dataset.image_size().is_some_and(|s| s != model.config.image_size) {
        return Err(Error::Input(format!(
            "dataset images are {:?} pixels, checkpoint expects {}",
            dataset.image_size(),
            model.config.image_size
        )));
    }
    let (h, w) = model.config.grid();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(64) {
        let prepared: Vec<PreparedImage> = chunk
            .iter()
            .map(|s| model.prepare(&s.image))
            .collect::<Result<_>>()?;
        let refs: Vec<&PreparedImage> = prepared.iter().collect();
        let results = model.infer(&refs)?;
        for (s, r) in chunk.iter().zip(results) {
            let map = match (s.label, mode) {
                (Label::Fake, _) => r.a_fus,
                (Label::Real, MapMode::Supervision) => Mat::zeros(h, w),
                (Label::Real, MapMode::FakeOnly) => r.a_fus_fake_only,
            };
            out.push(GeneratedMap {
                id: s.id.clone(),
                label: s.label,
                map,
            });
        }
    }
    Ok(out)
}

/// Rescales to `[0, 1]` by the map's own range; constant maps become zero.
pub fn min_max_normalize(map: &Mat) -> Mat {
    let (lo, hi) = (map.min(), map.max());
    if hi > lo {
        map.map(|v| (v - lo) / (hi - lo))
    } else {
        Mat::zeros(map.rows(), map.cols())
    }
}

/// Metadata written next to every exported map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub id: String,
    pub label: Label,
    pub grid_h: usize,
    pub grid_w: usize,
    pub generator: String,
    pub checkpoint_hash: Option<String>,
    /// `"none"` or `"minmax"`.
    #[serde(default = "no_normalization")]
    pub normalization: String,
}

fn no_normalization() -> String {
    "none".into()
}

pub fn map_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.pgm")), dir.join(format!("{id}.json")))
}

/// Writes `{id}.pgm` and `{id}.json` into `dir`, each atomically.
pub fn export_map(map: &Mat, sidecar: &MapSidecar, dir: &Path) -> Result<()> {
    if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input(format!("map {} has values outside [0, 1]", sidecar.id)));
    }
    let (pgm, json) = map_paths(dir, &sidecar.id);
    pnm::write_atomic(&pgm, &pnm::encode_pgm(map))?;
    pnm::write_atomic(&json, serde_json::to_string_pretty(sidecar)?.as_bytes())
}

pub fn read_map(dir: &Path, id: &str) -> Result<(Mat, MapSidecar)> {
    let (pgm, json) = map_paths(dir, id);
    if !pgm.exists() {
        return Err(Error::Input(format!("no map for sample {id} in {}", dir.display())));
    }
    let map = pnm::read_pgm(&pgm)?;
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    Ok((map, serde_json::from_str(&text)?))
}

/// Baseline map generators and reference supervision sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    Ssim,
    PixDiff,
    PixDiffThresholded,
    GroundTruth,
    Zero,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Ssim => "ssim",
            Generator::PixDiff => "pixdiff",
            Generator::PixDiffThresholded => "pixdiff@0.1",
            Generator::GroundTruth => "gt",
            Generator::Zero => "zero",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "ssim" => Generator::Ssim,
            "pixdiff" => Generator::PixDiff,
            "pixdiff@0.1" => Generator::PixDiffThresholded,
            "gt" => Generator::GroundTruth,
            "zero" => Generator::Zero,
            other => {
                return Err(Error::Config(format!(
                    "unknown method {other}; expected ssim, pixdiff, pixdiff@0.1, gt or zero"
                )))
            }
        })
    }

    /// Map for one sample: reals always get zeros; fakes are compared with
    /// their real counterpart.
    pub fn map(self, sample: &ImageSample, counterpart: &ImageSample) -> Result<Mat> {
        let (h, w) = (sample.image.height(), sample.image.width());
        if !sample.label.is_fake() {
            return Ok(Mat::zeros(h, w));
        }
        match self {
            Generator::Ssim => crate::imaging::ssim_map(&counterpart.image, &sample.image),
            Generator::PixDiff => crate::imaging::pixel_diff_map(&counterpart.image, &sample.image, None),
            Generator::PixDiffThresholded => {
                crate::imaging::pixel_diff_map(&counterpart.image, &sample.image, Some(0.1))
            }
            Generator::GroundTruth => sample
                .gt_mask
                .clone()
                .ok_or_else(|| Error::Input(format!("sample {} has no ground-truth mask", sample.id))),
            Generator::Zero => Ok(Mat::zeros(h, w)),
        }
    }
}

/// Writes one baseline map per sample of `dataset` into `out`.
pub fn export_baseline(dataset: &Dataset, generator: Generator, out: &Path) -> Result<usize> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (entry, sample) in dataset.entries.iter().zip(&dataset.samples) {
        let counterpart_id = entry
            .real_file
            .strip_suffix(".ppm")
            .unwrap_or(&entry.real_file);
        let counterpart = dataset
            .position(counterpart_id)
            .map(|i| &dataset.samples[i])
            .ok_or_else(|| Error::Input(format!("sample {} has no real counterpart", sample.id)))?;
        let map = generator.map(sample, counterpart)?;
        let sidecar = MapSidecar {
            id: sample.id.clone(),
            label: sample.label,
            grid_h: map.rows(),
            grid_w: map.cols(),
            generator: generator.name().into(),
            checkpoint_hash: None,
            normalization: no_normalization(),
        };
        export_map(&map, &sidecar, out)?;
    }
    Ok(dataset.len())
}

/// Writes FoCus maps. With `normalize`, fake-sample maps are min-max
/// rescaled per image before export.
pub fn export_focus_maps(
    checkpoint: &Checkpoint,
    maps: &[GeneratedMap],
    normalize: bool,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = checkpoint.hash()?;
    for m in maps {
        let norm = normalize && m.label.is_fake();
        let map = if norm { min_max_normalize(&m.map) } else { m.map.clone() };
        let sidecar = MapSidecar {
            id: m.id.clone(),
            label: m.label,
            grid_h: map.rows(),
            grid_w: map.cols(),
            generator: "focus".into(),
            checkpoint_hash: Some(hash.clone()),
            normalization: if norm { "minmax" } else { "none" }.into(),
        };
        export_map(&map, &sidecar, out)?;
    }
    Ok(())
}

/// Standard deviation of the noise added to freshly initialized parameters
/// before a gradient check.
pub const GRADCHECK_JITTER: f64 = 0.25;

/// Result of checking analytic model gradients against finite differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub parameters: usize,
    pub eps: f64,
}

/// Checks the full forward (relaxed selection with fixed Gumbel noise) on
/// `samples` random images against central differences at `coords`
/// evenly strided parameter coordinates, covering every tensor.
pub fn gradcheck_model(config: &TrainConfig, coords: usize, eps: f64) -> Result<GradCheckReport> {
    let mut model = FocusModel::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Move off the initialization point, where attention and layer-norm
    // gradients are orders of magnitude smaller than the rest.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let p = model.params.get_mut(id);
        let jitter = trunc_normal(&mut rng, p.rows(), p.cols(), GRADCHECK_JITTER);
        p.add_assign(&jitter);
    }
    let batch = config.batch_size;
    let size = config.image_size;
    let prepared: Vec<PreparedImage> = (0..batch)
        .map(|_| {
            let img = crate::imaging::Image::from_fn(size, size, |_, _, _| rng.random::<f64>());
            model.prepare(&img)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    let refs: Vec<&PreparedImage> = prepared.iter().collect();
    let input = model.stack(&refs);
    let selection = Selection::Soft {
        noise: gumbel_noise(&mut rng, batch * config.seq_len()),
        tau: config.tau,
    };

    let eval = |flat: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut m = model.clone();
        m.params.unflatten(flat);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let f = m.forward(&mut g, &p, &input, &selection)?;
        let l = loss_vars(&mut g, f.y_rgb, f.y_sobel, f.y_fus, &labels, config.alpha)?;
        let value = g.value(l.total).get(0, 0);
        let grad = if want_grad {
            m.params.flatten_grads(&g.backward(l.total).params(m.params.len()))
        } else {
            Vec::new()
        };
        Ok((value, grad))
    };
    let flat = model.params.flatten();
    let (_, analytic) = eval(&flat, true)?;

    // Every tensor contributes at least one coordinate; the rest are strided.
    let mut picks: Vec<usize> = Vec::new();
    let mut offset = 0;
    for (_, m) in model.params.iter() {
        picks.push(offset + rng.random_range(0..m.len()));
        offset += m.len();
    }
    let stride = (flat.len() / coords.max(1)).max(1);
    let mut i = rng.random_range(0..stride);
    while picks.len() < coords && i < flat.len() {
        picks.push(i);
        i += stride;
    }
    picks.sort_unstable();
    picks.dedup();
    let max_relative_error = grad_check(|q| eval(q, false).map(|r| r.0), &flat, &analytic, eps, &picks)?;
    Ok(GradCheckReport {
        max_relative_error,
        coordinates: picks.len(),
        parameters: flat.len(),
        eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load, write_synthetic};
    use crate::imaging::SyntheticSpec;

    fn tiny_dataset(dir: &Path, pairs: u64) -> Dataset {
        let spec = SyntheticSpec {
            image_size: 16,
            ..SyntheticSpec::default()
        };
        write_synthetic(dir, &spec, pairs).unwrap();
        load(dir).unwrap()
    }

    #[test]
    fn one_iteration_moves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4);
        let config = TrainConfig {
            iterations: 1,
            batch_size: 4,
            ..TrainConfig::tiny()
        };
        let before = FocusModel::new(config.clone()).unwrap().params.flatten();
        let mut logged = Vec::new();
        let out = train(&config, &ds, |s| {
            logged.push(*s);
            Ok(())
        })
        .unwrap();
        assert_eq!(logged.len(), 1);
        assert_eq!(out.checkpoint.iteration, 1);
        let after = out.checkpoint.model.params.flatten();
        assert!(before.iter().zip(&after).any(|(a, b)| a != b));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 3);
        let config = TrainConfig {
            iterations: 3,
            batch_size: 4,
            ..TrainConfig::tiny()
        };
        let out = train(&config, &ds, |_| Ok(())).unwrap();
        let path = dir.path().join("model.ckpt");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.iteration, 3);
        assert_eq!(back.rng, out.checkpoint.rng);
        let a = generate_maps(&out.checkpoint.model, &ds, MapMode::FakeOnly).unwrap();
        let b = generate_maps(&back.model, &ds, MapMode::FakeOnly).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.hash().unwrap(), out.checkpoint.hash().unwrap());

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, &path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn supervision_maps_zero_for_reals() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 3);
        let model = FocusModel::new(TrainConfig::tiny()).unwrap();
        let maps = generate_maps(&model, &ds, MapMode::Supervision).unwrap();
        for m in &maps {
            assert_eq!(m.map.shape(), (2, 2));
            if m.label.is_fake() {
                assert!(m.map.data().iter().all(|&v| v > 0.0 && v < 1.0));
            } else {
                assert!(m.map.data().iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(maps, generate_maps(&model, &ds, MapMode::Supervision).unwrap());
    }

    #[test]
    fn export_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let half = Mat::filled(3, 3, 0.5);
        let sidecar = MapSidecar {
            id: "s".into(),
            label: Label::Fake,
            grid_h: 3,
            grid_w: 3,
            generator: "pixdiff@0.1".into(),
            checkpoint_hash: None,
            normalization: "none".into(),
        };
        export_map(&half, &sidecar, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("s.pgm")).unwrap();
        assert!(bytes[bytes.len() - 9..].iter().all(|&b| b == 128));
        let (back, meta) = read_map(dir.path(), "s").unwrap();
        assert_eq!(meta, sidecar);
        assert!(back.data().iter().all(|&v| (v - 0.5).abs() <= 1.0 / 255.0));
        assert!(matches!(read_map(dir.path(), "t"), Err(Error::Input(_))));
        assert!(export_map(&Mat::filled(1, 1, 1.5), &sidecar, dir.path()).is_err());
    }

    #[test]
    fn baseline_generators() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 2);
        let out = dir.path().join("maps");
        export_baseline(&ds, Generator::PixDiffThresholded, &out).unwrap();
        for s in &ds.samples {
            let (map, meta) = read_map(&out, &s.id).unwrap();
            assert_eq!(meta.generator, "pixdiff@0.1");
            assert_eq!(map.shape(), (16, 16));
            if !s.label.is_fake() {
                assert!(map.data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(Generator::parse("sift").is_err());
    }

    #[test]
    fn normalization() {
        let m = Mat::from_vec(1, 3, vec![0.2, 0.4, 0.6]);
        let n = min_max_normalize(&m);
        assert!((n.get(0, 1) - 0.5).abs() < 1e-12);
        assert_eq!(n.get(0, 0), 0.0);
        assert_eq!(n.get(0, 2), 1.0);
        assert_eq!(min_max_normalize(&Mat::filled(2, 2, 0.3)), Mat::zeros(2, 2));
    }
}
