//! On-disk dataset layout.
//!
//! A dataset directory holds `index.json` (one entry per sample), 8-bit PPM
//! images and PGM masks. Each entry names both images of its pair so that
//! comparison-based generators can find the counterpart.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::{synth_pair, ImageSample, Label, SyntheticSpec};
use crate::pnm;
use crate::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const SPEC_FILE: &str = "synth.json";

/// Environment variable capping worker threads for data synthesis.
pub const THREADS_ENV: &str = "FOCUS_THREADS";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub label: Label,
    pub real_file: String,
    pub fake_file: String,
    pub mask_file: Option<String>,
}

impl IndexEntry {
    /// The file holding this entry's own image.
    pub fn image_file(&self) -> &str {
        match self.label {
            Label::Real => &self.real_file,
            Label::Fake => &self.fake_file,
        }
    }

    /// Key shared by both members of a pair.
    pub fn pair_key(&self) -> &str {
        &self.real_file
    }
}

/// A loaded dataset: entries in index order plus their decoded samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.height())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Generates `count` pairs into `dir` and writes the index.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec, count: u64) -> Result<Vec<IndexEntry>> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pool = thread_pool()?;
    let per_pair: Vec<Vec<IndexEntry>> = pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|index| -> Result<Vec<IndexEntry>> {
                let (real, fake) = synth_pair(spec, index)?;
                let real_file = format!("{}.ppm", real.id);
                let fake_file = format!("{}.ppm", fake.id);
                let mask_file = format!("{index:06}_mask.pgm");
                pnm::write_atomic(&dir.join(&real_file), &pnm::encode_ppm(&real.image))?;
                pnm::write_atomic(&dir.join(&fake_file), &pnm::encode_ppm(&fake.image))?;
                let mask = fake.gt_mask.as_ref().expect("synthetic fakes carry masks");
                pnm::write_atomic(&dir.join(&mask_file), &pnm::encode_pgm(mask))?;
                Ok(vec![
                    IndexEntry {
                        id: real.id,
                        label: Label::Real,
                        real_file: real_file.clone(),
                        fake_file: fake_file.clone(),
                        mask_file: None,
                    },
                    IndexEntry {
                        id: fake.id,
                        label: Label::Fake,
                        real_file,
                        fake_file,
                        mask_file: Some(mask_file),
                    },
                ])
            })
            .collect::<Result<_>>()
    })?;
    let entries: Vec<IndexEntry> = per_pair.into_iter().flatten().collect();
    pnm::write_atomic(
        &dir.join(INDEX_FILE),
        serde_json::to_string_pretty(&entries)?.as_bytes(),
    )?;
    pnm::write_atomic(
        &dir.join(SPEC_FILE),
        serde_json::to_string_pretty(spec)?.as_bytes(),
    )?;
    Ok(entries)
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every sample named in the index, with masks for fakes.
pub fn load(dir: &Path) -> Result<Dataset> {
    let entries = read_index(dir)?;
    let samples = entries
        .par_iter()
        .map(|e| {
            let image = pnm::read_ppm(&dir.join(e.image_file()))?;
            let gt_mask = match (&e.mask_file, e.label) {
                (Some(m), Label::Fake) => Some(pnm::read_pgm(&dir.join(m))?),
                _ => None,
            };
            if let Some(m) = &gt_mask {
                if m.shape() != (image.height(), image.width()) {
                    return Err(Error::Input(format!("mask of {} does not match image", e.id)));
                }
            }
            Ok(ImageSample {
                id: e.id.clone(),
                image,
                label: e.label,
                gt_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = samples.first() {
        let (h, w) = (first.image.height(), first.image.width());
        if let Some(bad) = samples
            .iter()
            .find(|s| s.image.height() != h || s.image.width() != w)
        {
            return Err(Error::Input(format!(
                "sample {} is {}x{}, expected {h}x{w}",
                bad.id,
                bad.image.height(),
                bad.image.width()
            )));
        }
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        entries,
        samples,
    })
}
