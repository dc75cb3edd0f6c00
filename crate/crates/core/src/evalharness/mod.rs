//! Multi-task evaluation of manipulation maps.
//!
//! A small convolutional classifier with a dense map head is trained on the
//! joint loss `L_ce + 0.1·L_bce`, where the dense head is supervised by the
//! maps under test. Better maps should yield a better classifier; the
//! harness reports held-out accuracy and AUC, and the dense head's overlap
//! with ground-truth masks.

mod metrics;

pub use metrics::{auc, map_metrics, mean_metrics, MapMetrics};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::backbone::{LayerNorm, Linear};
use crate::dataset::Dataset;
use crate::imaging::{bilinear_matrix, resize_bilinear};
use crate::optim::{cosine_lr, Adam};
use crate::params::{trunc_normal, Bound, ParamId, ParamSet};
use crate::tensor::Mat;
use crate::trainer::read_map;
use crate::{Error, Result};

pub const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 64];
/// Channels of the dense head's 1×1 reduction.
pub const DENSE_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the dense-map loss.
    pub bce_weight: f64,
    /// Side of the dense head's output; defaults to the image size.
    #[serde(default)]
    pub output_side: Option<usize>,
    /// Fraction of pairs used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 32,
            learning_rate: 5e-4,
            bce_weight: 0.1,
            output_side: None,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.bce_weight >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and bce_weight non-negative".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie strictly between 0 and 1".into()));
        }
        if self.output_side == Some(0) {
            return Err(Error::Config("output_side must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

#[derive(Clone, Debug)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
    norm: LayerNorm,
    cin: usize,
    cout: usize,
}

/// Four stride-2 `conv → channel LayerNorm → GELU` stages, a pooled
/// classifier and a dense head off the third stage.
#[derive(Clone, Debug)]
pub struct EvalModel {
    pub params: ParamSet,
    stages: Vec<ConvStage>,
    classifier: Linear,
    reduce: Linear,
    to_map: Linear,
    upsample: Arc<Mat>,
    image_size: usize,
    output_side: usize,
}

/// Side after `k` stride-2, pad-1, 3×3 convolutions.
fn side_after(size: usize, k: usize) -> usize {
    (0..k).fold(size, |s, _| (s + 2 - 3) / 2 + 1)
}

impl EvalModel {
    pub fn new(image_size: usize, output_side: usize, seed: u64) -> Result<Self> {
        if side_after(image_size, 4) == 0 || image_size < 16 {
            return Err(Error::Config(format!("image size {image_size} is too small for the eval model")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut params = ParamSet::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in STAGE_WIDTHS.iter().enumerate() {
            let fan_in = 9 * cin;
            let std = (2.0 / fan_in as f64).sqrt();
            stages.push(ConvStage {
                weight: params.add(format!("stage{i}.weight"), trunc_normal(&mut rng, fan_in, cout, std)),
                bias: params.add(format!("stage{i}.bias"), Mat::zeros(1, cout)),
                norm: LayerNorm::new(&mut params, &format!("stage{i}.norm"), cout),
                cin,
                cout,
            });
            cin = cout;
        }
        let classifier = Linear::new(&mut params, "classifier", STAGE_WIDTHS[3], 2, &mut rng);
        let reduce = Linear::new(&mut params, "dense.reduce", STAGE_WIDTHS[2], DENSE_WIDTH, &mut rng);
        let to_map = Linear::new(&mut params, "dense.out", DENSE_WIDTH, 1, &mut rng);
        let s3 = side_after(image_size, 3);
        Ok(Self {
            params,
            stages,
            classifier,
            reduce,
            to_map,
            upsample: Arc::new(bilinear_matrix(s3, s3, output_side, output_side)),
            image_size,
            output_side,
        })
    }

    pub fn output_side(&self) -> usize {
        self.output_side
    }

    /// Returns `(probabilities B × 2, dense logits (B·S²) × 1)` for images
    /// stacked as `(B·H·W) × 3`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, batch: usize) -> (Var, Var) {
        let mut h = x;
        let mut side = self.image_size;
        let mut stage3 = None;
        for (i, st) in self.stages.iter().enumerate() {
            let geom = ConvGeometry {
                batch,
                height: side,
                width: side,
                channels: st.cin,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let cols = g.im2col(h, geom);
            let y = g.matmul(cols, p[st.weight]);
            let y = g.add_row(y, p[st.bias]);
            let y = st.norm.forward(g, p, y);
            h = g.gelu(y);
            side = geom.out_height();
            debug_assert_eq!(g.value(h).cols(), st.cout);
            if i == 2 {
                stage3 = Some(h);
            }
        }
        let pooled = g.segment_mean(h, side * side);
        let logits = self.classifier.forward(g, p, pooled);
        let probs = g.softmax_rows(logits);

        let f = self.reduce.forward(g, p, stage3.expect("four stages"));
        let f = g.gelu(f);
        let up = g.resample_rows(f, Arc::clone(&self.upsample));
        let dense = self.to_map.forward(g, p, up);
        (probs, dense)
    }
}

/// Threshold sweep entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub supervision_source: String,
    pub accuracy: f64,
    pub auc: f64,
    pub map_iou: f64,
    pub map_precision: f64,
    pub map_recall: f64,
    pub threshold_sweep: Vec<SweepPoint>,
    /// Mean dense-head output over all test samples.
    pub mean_dense_output: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub config: EvalConfig,
}

/// Outcome of a harness run, including the loss trajectory.
#[derive(Clone, Debug)]
pub struct EvalRun {
    pub report: EvalReport,
    pub losses: Vec<f64>,
}

/// Splits sample indices by pair so both members land on the same side.
pub fn split_by_pair(dataset: &Dataset, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let keys: BTreeSet<&str> = dataset.entries.iter().map(|e| e.pair_key()).collect();
    let mut keys: Vec<&str> = keys.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    keys.shuffle(&mut rng);
    let cut = ((keys.len() as f64) * train_fraction).round() as usize;
    let train_keys: BTreeSet<&str> = keys[..cut].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, e) in dataset.entries.iter().enumerate() {
        if train_keys.contains(e.pair_key()) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    (train, test)
}

/// Loads the supervision map of every sample from `maps_dir`.
pub fn load_supervision(maps_dir: &Path, dataset: &Dataset) -> Result<(String, Vec<Mat>)> {
    let mut source: Option<String> = None;
    let maps = dataset
        .samples
        .iter()
        .map(|s| {
            let (map, meta) = read_map(maps_dir, &s.id)?;
            if source.is_none() {
                source = Some(meta.generator.clone());
            }
            Ok(map)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((source.unwrap_or_default(), maps))
}

/// Trains the eval model with maps read from `maps_dir`.
pub fn train_eval_model(maps_dir: &Path, dataset: &Dataset, config: &EvalConfig) -> Result<EvalRun> {
    let (source, maps) = load_supervision(maps_dir, dataset)?;
    train_eval_with_maps(&source, &maps, dataset, config)
}

/// Trains and evaluates with in-memory supervision maps, one per sample in
/// dataset order.
pub fn train_eval_with_maps(
    source: &str,
    maps: &[Mat],
    dataset: &Dataset,
    config: &EvalConfig,
) -> Result<EvalRun> {
    config.validate()?;
    if maps.len() != dataset.len() {
        return Err(Error::Input(format!(
            "{} maps for {} samples",
            maps.len(),
            dataset.len()
        )));
    }
    let size = dataset
        .image_size()
        .ok_or_else(|| Error::Input("empty dataset".into()))?;
    let side = config.output_side.unwrap_or(size);
    let mut model = EvalModel::new(size, side, config.seed)?;
    let inputs: Vec<Mat> = dataset.samples.iter().map(|s| s.image.to_mat()).collect();
    let targets: Vec<Mat> = maps
        .iter()
        .map(|m| resize_bilinear(m, side, side).map(|v| v.clamp(0.0, 1.0)).reshape(side * side, 1))
        .collect();
    let (train, test) = split_by_pair(dataset, config.train_fraction, config.seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("split left an empty train or test set".into()));
    }

    let mut adam = Adam::new(&model.params);
    let mut losses = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64);
        let picks: Vec<usize> = (0..config.batch_size)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let x = stack(&inputs, &picks);
        let t = stack(&targets, &picks);
        let labels: Vec<usize> = picks.iter().map(|&i| dataset.samples[i].label.index()).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let xv = g.input(x);
        let (probs, dense) = model.forward(&mut g, &p, xv, picks.len());
        let ce = g.nll(probs, &labels);
        let bce = g.bce_with_logits(dense, t);
        let weighted = g.scale(bce, config.bce_weight);
        let loss = g.add(ce, weighted);
        let value = g.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite eval loss at step {step}")));
        }
        let grads = g.backward(loss).params(model.params.len());
        adam.step(
            &mut model.params,
            &grads,
            cosine_lr(config.learning_rate, step, config.iterations),
        );
        losses.push(value);
    }

    let mut report = evaluate(&model, dataset, &inputs, &test)?;
    report.supervision_source = source.to_string();
    report.train_samples = train.len();
    report.seeds = vec![config.seed];
    report.config_hash = config.hash();
    report.config = config.clone();
    Ok(EvalRun { report, losses })
}

fn stack(rows: &[Mat], picks: &[usize]) -> Mat {
    let cols = rows[picks[0]].cols();
    let mut data = Vec::with_capacity(picks.len() * rows[picks[0]].len());
    for &i in picks {
        data.extend_from_slice(rows[i].data());
    }
    Mat::from_vec(data.len() / cols, cols, data)
}

fn evaluate(model: &EvalModel, dataset: &Dataset, inputs: &[Mat], test: &[usize]) -> Result<EvalReport> {
    let side = model.output_side();
    let mut p_fake = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut correct = 0usize;
    let mut dense_sum = 0.0;
    let thresholds: Vec<f64> = (1..=9).map(|t| t as f64 / 10.0).collect();
    let mut per_threshold: Vec<Vec<MapMetrics>> = vec![Vec::new(); thresholds.len()];
    let mut at_half = Vec::new();
    for chunk in test.chunks(64) {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let xv = g.input(stack(inputs, chunk));
        let (probs, dense) = model.forward(&mut g, &p, xv, chunk.len());
        let probs = g.value(probs);
        let dense = g.value(dense).map(crate::autograd::sigmoid);
        for (k, &i) in chunk.iter().enumerate() {
            let sample = &dataset.samples[i];
            let label = sample.label.index();
            let pf = probs.get(k, 1);
            let predicted = usize::from(pf > probs.get(k, 0));
            correct += usize::from(predicted == label);
            p_fake.push(pf);
            labels.push(label as u8);
            let map = Mat::from_vec(side, side, dense.data()[k * side * side..(k + 1) * side * side].to_vec());
            dense_sum += map.mean();
            if let Some(gt) = &sample.gt_mask {
                for (t, bucket) in thresholds.iter().zip(&mut per_threshold) {
                    bucket.push(map_metrics(&map, gt, *t));
                }
                at_half.push(map_metrics(&map, gt, 0.5));
            }
        }
    }
    let half = mean_metrics(&at_half);
    Ok(EvalReport {
        supervision_source: String::new(),
        accuracy: correct as f64 / test.len() as f64,
        auc: auc(&p_fake, &labels)?,
        map_iou: half.iou,
        map_precision: half.precision,
        map_recall: half.recall,
        threshold_sweep: thresholds
            .iter()
            .zip(&per_threshold)
            .map(|(&threshold, items)| {
                let m = mean_metrics(items);
                SweepPoint {
                    threshold,
                    iou: m.iou,
                    precision: m.precision,
                    recall: m.recall,
                }
            })
            .collect(),
        mean_dense_output: dense_sum / test.len() as f64,
        train_samples: 0,
        test_samples: test.len(),
        seeds: Vec::new(),
        config_hash: String::new(),
        config: EvalConfig::default(),
    })
}

/// Plain-text comparison table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8}  {}",
        "source", "acc", "auc", "iou", "prec", "recall", "seeds"
    );
    for r in reports {
        let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            out,
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {}",
            r.supervision_source,
            r.accuracy,
            r.auc,
            r.map_iou,
            r.map_precision,
            r.map_recall,
            seeds.join(",")
        );
    }
    out
}

/// Averages reports of the same source over seeds.
pub fn merge_reports(reports: &[EvalReport]) -> Vec<EvalReport> {
    let mut sources: Vec<&str> = Vec::new();
    for r in reports {
        if !sources.contains(&r.supervision_source.as_str()) {
            sources.push(&r.supervision_source);
        }
    }
    sources
        .into_iter()
        .map(|src| {
            let group: Vec<&EvalReport> = reports.iter().filter(|r| r.supervision_source == src).collect();
            let n = group.len() as f64;
            let avg = |f: fn(&EvalReport) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            let mut merged = group[0].clone();
            merged.accuracy = avg(|r| r.accuracy);
            merged.auc = avg(|r| r.auc);
            merged.map_iou = avg(|r| r.map_iou);
            merged.map_precision = avg(|r| r.map_precision);
            merged.map_recall = avg(|r| r.map_recall);
            merged.mean_dense_output = avg(|r| r.mean_dense_output);
            for (k, point) in merged.threshold_sweep.iter_mut().enumerate() {
                point.iou = group.iter().map(|r| r.threshold_sweep[k].iou).sum::<f64>() / n;
                point.precision = group.iter().map(|r| r.threshold_sweep[k].precision).sum::<f64>() / n;
                point.recall = group.iter().map(|r| r.threshold_sweep[k].recall).sum::<f64>() / n;
            }
            merged.seeds = group.iter().flat_map(|r| r.seeds.iter().copied()).collect();
            merged
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load, write_synthetic};
    use crate::imaging::SyntheticSpec;

    #[test]
    fn shapes_and_ranges() {
        let model = EvalModel::new(32, 32, 0).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.input(Mat::filled(2 * 1024, 3, 0.4));
        let (probs, dense) = model.forward(&mut g, &p, x, 2);
        assert_eq!(g.value(probs).shape(), (2, 2));
        assert_eq!(g.value(dense).shape(), (2 * 1024, 1));
        for r in 0..2 {
            assert!((g.value(probs).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(EvalModel::new(8, 8, 0).is_err());
    }

    #[test]
    fn split_keeps_pairs_together() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &SyntheticSpec::default(), 10).unwrap();
        let ds = load(dir.path()).unwrap();
        let (train, test) = split_by_pair(&ds, 0.8, 3);
        assert_eq!(train.len(), 16);
        assert_eq!(test.len(), 4);
        for &i in &test {
            assert!(!train.iter().any(|&j| ds.entries[j].pair_key() == ds.entries[i].pair_key()));
        }
    }

    #[test]
    fn short_run_is_reproducible_and_bounded() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &SyntheticSpec::default(), 12).unwrap();
        let ds = load(dir.path()).unwrap();
        let maps: Vec<Mat> = ds
            .samples
            .iter()
            .map(|s| s.gt_mask.clone().unwrap_or_else(|| Mat::zeros(32, 32)))
            .collect();
        let config = EvalConfig {
            iterations: 4,
            batch_size: 4,
            ..EvalConfig::default()
        };
        let a = train_eval_with_maps("gt", &maps, &ds, &config).unwrap();
        let b = train_eval_with_maps("gt", &maps, &ds, &config).unwrap();
        assert_eq!(a.losses, b.losses);
        let r = &a.report;
        for v in [r.accuracy, r.auc, r.map_iou, r.map_precision, r.map_recall, r.mean_dense_output] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
        assert_eq!(r.threshold_sweep.len(), 9);
        let table = render_table(&merge_reports(&[a.report.clone(), b.report.clone()]));
        assert_eq!(table.lines().count(), 2);
    }
}
