//! Classification attentive regions proposal.
//!
//! A 1×1 convolution (a per-token linear map) projects the token grid to
//! `2·d` channels: the first `d` form the real-class bank, the rest the
//! fake-class bank. Class scores are the channel average of per-channel
//! spatial maxima, softmaxed over the two classes. The CAR map weights each
//! bank's per-position channel mean by its class probability and squashes
//! the sum through a sigmoid.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{Linear, TokenGrid};
use crate::params::{Bound, ParamSet};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct CarpHead {
    pub proj: Linear,
    pub dim: usize,
    pub channels: usize,
    /// `2d × 2` averaging matrix: column `c` holds `1/d` over class `c`'s bank.
    bank_mean: Arc<Mat>,
}

/// Outputs of the head for a batch of `B` grids of `seq` tokens.
#[derive(Clone, Copy, Debug)]
pub struct CarpOutput {
    /// `(B·seq) × 2d` channel banks.
    pub banks: Var,
    /// `B × 2` class probabilities.
    pub scores: Var,
    /// `(B·seq) × 1` CAR map.
    pub map: Var,
    /// `(B·seq) × 1` fake-only map.
    pub fake_map: Var,
}

fn bank_mean(d: usize) -> Mat {
    Mat::from_fn(2 * d, 2, |r, c| if r / d == c { 1.0 / d as f64 } else { 0.0 })
}

impl CarpHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("carp_channels must be at least 1".into()));
        }
        Ok(Self {
            proj: Linear::new(params, &format!("{name}.proj"), dim, 2 * channels, rng),
            dim,
            channels,
            bank_mean: Arc::new(bank_mean(channels)),
        })
    }

    pub fn project(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Var {
        self.proj.forward(g, p, tokens)
    }

    /// Spatial max per channel, averaged within each class bank, softmaxed.
    pub fn pool(&self, g: &mut Graph, banks: Var, seq: usize) -> Var {
        let maxima = g.segment_max(banks, seq);
        let avg = g.input((*self.bank_mean).clone());
        let s = g.matmul(maxima, avg);
        g.softmax_rows(s)
    }

    /// Returns `(map, fake_only_map)`, both `(B·seq) × 1`.
    pub fn maps(&self, g: &mut Graph, banks: Var, scores: Var, seq: usize) -> (Var, Var) {
        let avg = g.input((*self.bank_mean).clone());
        let means = g.matmul(banks, avg);
        let weights = g.repeat_segments(scores, seq);
        let weighted = g.mul(means, weights);
        let real = g.slice_cols(weighted, 0, 1);
        let fake = g.slice_cols(weighted, 1, 1);
        let both = g.add(real, fake);
        (g.sigmoid(both), g.sigmoid(fake))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var, seq: usize) -> CarpOutput {
        let banks = self.project(g, p, tokens);
        let scores = self.pool(g, banks, seq);
        let (map, fake_map) = self.maps(g, banks, scores, seq);
        CarpOutput {
            banks,
            scores,
            map,
            fake_map,
        }
    }
}

/// Per-class channel banks over an `h × w` grid; `data` is `N × 2d` with
/// the class-0 bank in the first `d` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBanks {
    pub data: Mat,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl FeatureBanks {
    /// Builds banks from separate `N × d` class-0 and class-1 matrices.
    pub fn from_banks(real: &Mat, fake: &Mat, grid: (usize, usize)) -> Result<Self> {
        if real.shape() != fake.shape() || real.rows() != grid.0 * grid.1 || real.cols() == 0 {
            return Err(Error::Config("bank shapes do not match the grid".into()));
        }
        let d = real.cols();
        let data = Mat::from_fn(real.rows(), 2 * d, |r, c| {
            if c < d {
                real.get(r, c)
            } else {
                fake.get(r, c - d)
            }
        });
        Ok(Self {
            data,
            grid,
            channels: d,
        })
    }

    pub fn bank(&self, class: usize) -> Mat {
        let d = self.channels;
        Mat::from_fn(self.data.rows(), d, |r, c| self.data.get(r, class * d + c))
    }
}

/// Two class probabilities, `[real, fake]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores(pub [f64; 2]);

pub fn grid_project(grid: &TokenGrid, head: &CarpHead, params: &ParamSet) -> Result<FeatureBanks> {
    if grid.dim() != head.dim {
        return Err(Error::Config(format!(
            "token width {} does not match head width {}",
            grid.dim(),
            head.dim
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.input(grid.tokens.clone());
    let banks = head.project(&mut g, &p, x);
    Ok(FeatureBanks {
        data: g.value(banks).clone(),
        grid: grid.grid,
        channels: head.channels,
    })
}

pub fn pool_scores(f: &FeatureBanks) -> ClassScores {
    let mut g = Graph::new();
    let banks = g.input(f.data.clone());
    let s = pool_var(&mut g, banks, f);
    let v = g.value(s);
    ClassScores([v.get(0, 0), v.get(0, 1)])
}

fn pool_var(g: &mut Graph, banks: Var, f: &FeatureBanks) -> Var {
    let maxima = g.segment_max(banks, f.data.rows());
    let avg = g.input(bank_mean(f.channels));
    let s = g.matmul(maxima, avg);
    g.softmax_rows(s)
}

fn maps_pure(f: &FeatureBanks, scores: ClassScores) -> (Mat, Mat) {
    let mut g = Graph::new();
    let banks = g.input(f.data.clone());
    let s = g.input(Mat::from_vec(1, 2, scores.0.to_vec()));
    let avg = g.input(bank_mean(f.channels));
    let means = g.matmul(banks, avg);
    let weights = g.repeat_segments(s, f.data.rows());
    let weighted = g.mul(means, weights);
    let real = g.slice_cols(weighted, 0, 1);
    let fake = g.slice_cols(weighted, 1, 1);
    let both = g.add(real, fake);
    let (a, b) = (g.sigmoid(both), g.sigmoid(fake));
    let (h, w) = f.grid;
    (
        g.value(a).clone().reshape(h, w),
        g.value(b).clone().reshape(h, w),
    )
}

/// `sigmoid(Σ_c y_c · channel_mean(f′_c))` as an `h × w` map.
pub fn car_map(f: &FeatureBanks, scores: ClassScores) -> Mat {
    maps_pure(f, scores).0
}

/// `sigmoid(y_1 · channel_mean(f′_1))` as an `h × w` map.
pub fn fake_only_map(f: &FeatureBanks, scores: ClassScores) -> Mat {
    maps_pure(f, scores).1
}
