//! Complementary learning: per-token modality selection with a hard
//! Gumbel-Softmax, token substitution, map fusion and the fused classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_rows, Graph, Var};
use crate::backbone::{EncoderBlock, Linear, TokenGrid};
use crate::params::{Bound, ParamSet};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Bounds for the uniform draw behind each Gumbel sample.
pub const GUMBEL_EPS: f64 = 1e-12;

/// Two per-token scorers, `D → D (GELU) → 1`.
#[derive(Clone, Debug)]
pub struct ScorePredictors {
    pub rgb: (Linear, Linear),
    pub sobel: (Linear, Linear),
}

impl ScorePredictors {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, dim: usize, rng: &mut R) -> Self {
        let mut mlp = |branch: &str, rng: &mut R| {
            (
                Linear::new(params, &format!("{name}.{branch}.fc1"), dim, dim, rng),
                Linear::new(params, &format!("{name}.{branch}.fc2"), dim, 1, rng),
            )
        };
        let rgb = mlp("rgb", rng);
        let sobel = mlp("sobel", rng);
        Self { rgb, sobel }
    }

    fn score(g: &mut Graph, p: &Bound, mlp: &(Linear, Linear), z: Var) -> Var {
        let h = mlp.0.forward(g, p, z);
        let h = g.gelu(h);
        mlp.1.forward(g, p, h)
    }

    /// Row-softmaxed `[rgb, sobel]` scores, `(B·N) × 2`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z_rgb: Var, z_sobel: Var) -> Var {
        let a = Self::score(g, p, &self.rgb, z_rgb);
        let b = Self::score(g, p, &self.sobel, z_sobel);
        let both = g.concat_cols(&[a, b]);
        g.softmax_rows(both)
    }
}

/// How the complementary mask is formed from the score logits.
#[derive(Clone, Debug)]
pub enum Selection {
    /// Training: one-hot of the noisy argmax forward, soft gradient backward.
    Hard { noise: Mat, tau: f64 },
    /// The relaxed path alone, `softmax((logits + noise)/τ)`. Used to check
    /// gradients against finite differences.
    Soft { noise: Mat, tau: f64 },
    /// Inference: deterministic argmax of the logits, no noise.
    Argmax,
}

impl Selection {
    pub fn training<R: Rng + ?Sized>(rng: &mut R, rows: usize, tau: f64) -> Self {
        Selection::Hard {
            noise: gumbel_noise(rng, rows),
            tau,
        }
    }
}

/// `rows × 2` Gumbel(0, 1) samples `−ln(−ln u)`, `u ∈ (ε, 1−ε)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize) -> Mat {
    Mat::from_fn(rows, 2, |_, _| {
        let u: f64 = rng.random::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
        -(-u.ln()).ln()
    })
}

/// One-hot of each row's argmax; ties select column 0.
pub fn one_hot_argmax(x: &Mat) -> Mat {
    Mat::from_fn(x.rows(), 2, |r, c| {
        let pick = if x.get(r, 1) > x.get(r, 0) { 1 } else { 0 };
        if c == pick {
            1.0
        } else {
            0.0
        }
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must be positive, got {tau}")))
    }
}

/// Builds the `(B·N) × 2` mask node from logits.
pub fn select(g: &mut Graph, logits: Var, selection: &Selection) -> Result<Var> {
    match selection {
        Selection::Hard { noise, tau } | Selection::Soft { noise, tau } => {
            check_tau(*tau)?;
            if noise.shape() != g.value(logits).shape() {
                return Err(Error::Input("gumbel noise shape does not match logits".into()));
            }
            let n = g.input(noise.clone());
            let noisy = g.add(logits, n);
            let scaled = g.scale(noisy, 1.0 / tau);
            let soft = g.softmax_rows(scaled);
            if matches!(selection, Selection::Soft { .. }) {
                return Ok(soft);
            }
            let hard = one_hot_argmax(g.value(soft));
            Ok(g.straight_through(hard, soft))
        }
        Selection::Argmax => {
            let hard = one_hot_argmax(g.value(logits));
            Ok(g.input(hard))
        }
    }
}

/// `m[:,0]·z_rgb + m[:,1]·z_sobel`, row by row.
pub fn substitute_var(g: &mut Graph, z_rgb: Var, z_sobel: Var, mask: Var) -> Var {
    let keep = g.slice_cols(mask, 0, 1);
    let take = g.slice_cols(mask, 1, 1);
    let a = g.mul_col(z_rgb, keep);
    let b = g.mul_col(z_sobel, take);
    g.add(a, b)
}

/// `M ⊙ a_rgb + (1 − M) ⊙ a_sobel` for `(B·N) × 1` maps.
pub fn fuse_maps_var(g: &mut Graph, a_rgb: Var, a_sobel: Var, mask: Var) -> Var {
    // column 1 of a one-hot mask is exactly 1 − column 0
    substitute_var(g, a_rgb, a_sobel, mask)
}

/// One encoder block, token mean, linear to two logits, softmax.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub block: EncoderBlock,
    pub classifier: Linear,
}

impl FusionHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            block: EncoderBlock::new(params, &format!("{name}.block"), dim, heads, rng),
            classifier: Linear::new(params, &format!("{name}.classifier"), dim, 2, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z_fus: Var, seq: usize) -> Var {
        let h = self.block.forward(g, p, z_fus, seq);
        let pooled = g.segment_mean(h, seq);
        let logits = self.classifier.forward(g, p, pooled);
        g.softmax_rows(logits)
    }
}

/// An `N × 2` one-hot selection (column 0 = RGB kept).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementaryMask {
    pub m: Mat,
    pub grid: (usize, usize),
}

impl ComplementaryMask {
    /// Builds a mask from an `h × w` map of 1 (RGB) / 0 (Sobel).
    pub fn from_keep(keep: &Mat) -> Self {
        let (h, w) = keep.shape();
        let m = Mat::from_fn(h * w, 2, |r, c| {
            let k = keep.data()[r];
            if c == 0 {
                k
            } else {
                1.0 - k
            }
        });
        Self { m, grid: (h, w) }
    }

    /// Column 0 as an `h × w` map.
    pub fn keep(&self) -> Mat {
        Mat::from_fn(self.grid.0, self.grid.1, |y, x| self.m.get(y * self.grid.1 + x, 0))
    }

    pub fn rgb_fraction(&self) -> f64 {
        self.keep().mean()
    }
}

pub fn predict_scores(
    z_rgb: &TokenGrid,
    z_sobel: &TokenGrid,
    sp: &ScorePredictors,
    params: &ParamSet,
) -> Result<Mat> {
    if z_rgb.tokens.shape() != z_sobel.tokens.shape() {
        return Err(Error::Input(format!(
            "token streams differ in shape: {:?} vs {:?}",
            z_rgb.tokens.shape(),
            z_sobel.tokens.shape()
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let a = g.input(z_rgb.tokens.clone());
    let b = g.input(z_sobel.tokens.clone());
    let logits = sp.forward(&mut g, &p, a, b);
    Ok(g.value(logits).clone())
}

/// Samples the mask. In training mode the noise comes from a ChaCha8 stream
/// seeded with `rng_seed`; in inference mode the seed is unused.
pub fn gumbel_hard_mask(
    logits: &Mat,
    grid: (usize, usize),
    tau: f64,
    rng_seed: u64,
    training: bool,
) -> Result<ComplementaryMask> {
    check_tau(tau)?;
    if logits.cols() != 2 || logits.rows() != grid.0 * grid.1 {
        return Err(Error::Input("logits must be N × 2 over the grid".into()));
    }
    let m = if training {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let noise = gumbel_noise(&mut rng, logits.rows());
        let noisy = logits.zip_map(&noise, |l, n| (l + n) / tau);
        one_hot_argmax(&softmax_rows(&noisy))
    } else {
        one_hot_argmax(logits)
    };
    Ok(ComplementaryMask { m, grid })
}

pub fn substitute(z_rgb: &TokenGrid, z_sobel: &TokenGrid, mask: &ComplementaryMask) -> Result<TokenGrid> {
    if z_rgb.tokens.shape() != z_sobel.tokens.shape() || mask.m.rows() != z_rgb.len() {
        return Err(Error::Input("substitution shapes are inconsistent".into()));
    }
    let mut g = Graph::new();
    let a = g.input(z_rgb.tokens.clone());
    let b = g.input(z_sobel.tokens.clone());
    let m = g.input(mask.m.clone());
    let z = substitute_var(&mut g, a, b, m);
    TokenGrid::new(g.value(z).clone(), z_rgb.grid)
}

pub fn fuse_maps(a_rgb: &Mat, a_sobel: &Mat, mask: &ComplementaryMask) -> Result<Mat> {
    let (h, w) = a_rgb.shape();
    if a_sobel.shape() != (h, w) || mask.grid != (h, w) {
        return Err(Error::Input("map and mask shapes differ".into()));
    }
    let mut g = Graph::new();
    let a = g.input(a_rgb.clone().reshape(h * w, 1));
    let b = g.input(a_sobel.clone().reshape(h * w, 1));
    let m = g.input(mask.m.clone());
    let f = fuse_maps_var(&mut g, a, b, m);
    Ok(g.value(f).clone().reshape(h, w))
}

pub fn fusion_classify(z_fus: &TokenGrid, head: &FusionHead, params: &ParamSet) -> [f64; 2] {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let z = g.input(z_fus.tokens.clone());
    let y = head.forward(&mut g, &p, z, z_fus.len());
    let v = g.value(y);
    [v.get(0, 0), v.get(0, 1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::trunc_normal;
    use rand::seq::SliceRandom;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn inference_is_plain_argmax() {
        let logits = Mat::from_rows(&[&[0.9, 0.1], &[0.3, 0.7], &[0.5, 0.5]]);
        let m = gumbel_hard_mask(&logits, (3, 1), 1.0, 0, false).unwrap();
        assert_eq!(m.m, Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]));
    }

    #[test]
    fn training_masks_are_one_hot_and_seeded() {
        let mut r = rng(3);
        let logits = softmax_rows(&trunc_normal(&mut r, 64, 2, 1.0));
        let a = gumbel_hard_mask(&logits, (8, 8), 1.0, 42, true).unwrap();
        let b = gumbel_hard_mask(&logits, (8, 8), 1.0, 42, true).unwrap();
        assert_eq!(a, b);
        for row in 0..64 {
            let v = a.m.row(row);
            assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
            assert_eq!(v[0] + v[1], 1.0);
        }
        assert!(matches!(
            gumbel_hard_mask(&logits, (8, 8), 0.0, 42, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gumbel_selection_is_symmetric() {
        let rows = 10_000;
        let logits = Mat::filled(rows, 2, 0.5);
        let m = gumbel_hard_mask(&logits, (rows, 1), 1.0, 9, true).unwrap();
        let frac = m.rgb_fraction();
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }

    #[test]
    fn symmetric_predictors_on_identical_tokens_are_even() {
        let mut params = ParamSet::new();
        let sp = ScorePredictors::new(&mut params, "sp", 6, &mut rng(0));
        for (a, b) in [(sp.rgb.0, sp.sobel.0), (sp.rgb.1, sp.sobel.1)] {
            *params.get_mut(b.weight) = params.get(a.weight).clone();
            *params.get_mut(b.bias) = params.get(a.bias).clone();
        }
        let z = TokenGrid::new(trunc_normal(&mut rng(1), 4, 6, 1.0), (2, 2)).unwrap();
        let logits = predict_scores(&z, &z, &sp, &params).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_scored_token() {
        let mut params = ParamSet::new();
        let sp = ScorePredictors::new(&mut params, "sp", 2, &mut rng(0));
        *params.get_mut(sp.rgb.0.weight) = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        *params.get_mut(sp.rgb.1.weight) = Mat::from_rows(&[&[1.0], &[1.0]]);
        *params.get_mut(sp.sobel.0.weight) = Mat::zeros(2, 2);
        *params.get_mut(sp.sobel.1.weight) = Mat::zeros(2, 1);
        *params.get_mut(sp.sobel.1.bias) = Mat::scalar(0.25);
        let z = TokenGrid::new(Mat::from_rows(&[&[1.0, -1.0]]), (1, 1)).unwrap();
        let logits = predict_scores(&z, &z, &sp, &params).unwrap();
        // tanh-form GELU by hand
        let gelu = |x: f64| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        let s_rgb = gelu(1.0) + gelu(-1.0);
        let p0 = 1.0 / (1.0 + (0.25 - s_rgb).exp());
        assert!((logits.get(0, 0) - p0).abs() < 1e-12);
        assert!((logits.get(0, 1) - (1.0 - p0)).abs() < 1e-12);
        let bad = TokenGrid::new(Mat::zeros(4, 2), (2, 2)).unwrap();
        assert!(matches!(predict_scores(&z, &bad, &sp, &params), Err(Error::Input(_))));
    }

    #[test]
    fn substitution_cases() {
        let a = TokenGrid::new(Mat::from_fn(4, 3, |r, c| (r * 3 + c) as f64), (2, 2)).unwrap();
        let b = TokenGrid::new(Mat::from_fn(4, 3, |r, c| -((r * 3 + c) as f64) - 1.0), (2, 2)).unwrap();
        let all_rgb = ComplementaryMask::from_keep(&Mat::filled(2, 2, 1.0));
        assert_eq!(substitute(&a, &b, &all_rgb).unwrap(), a);
        let all_sobel = ComplementaryMask::from_keep(&Mat::zeros(2, 2));
        assert_eq!(substitute(&a, &b, &all_sobel).unwrap(), b);
        let checker = ComplementaryMask::from_keep(&Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let z = substitute(&a, &b, &checker).unwrap();
        for r in 0..4 {
            let src = if r == 0 || r == 3 { &a } else { &b };
            assert_eq!(z.tokens.row(r), src.tokens.row(r));
        }
    }

    #[test]
    fn fused_map_identities_are_exact() {
        let mut r = rng(5);
        let a = trunc_normal(&mut r, 4, 4, 1.0).map(crate::autograd::sigmoid);
        let b = trunc_normal(&mut r, 4, 4, 1.0).map(crate::autograd::sigmoid);
        let ones = ComplementaryMask::from_keep(&Mat::filled(4, 4, 1.0));
        let zeros = ComplementaryMask::from_keep(&Mat::zeros(4, 4));
        assert_eq!(fuse_maps(&a, &b, &ones).unwrap(), a);
        assert_eq!(fuse_maps(&a, &b, &zeros).unwrap(), b);
        let mut single = Mat::zeros(4, 4);
        single.set(0, 0, 1.0);
        let f = fuse_maps(&a, &b, &ComplementaryMask::from_keep(&single)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if (y, x) == (0, 0) { a.get(y, x) } else { b.get(y, x) };
                assert_eq!(f.get(y, x), want);
            }
        }
    }

    #[test]
    fn fusion_head_properties() {
        let mut params = ParamSet::new();
        let head = FusionHead::new(&mut params, "fh", 8, 2, &mut rng(2));
        let tokens = trunc_normal(&mut rng(3), 6, 8, 1.0);
        let y = fusion_classify(&TokenGrid::new(tokens.clone(), (2, 3)).unwrap(), &head, &params);
        assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng(4));
        let permuted = Mat::from_fn(6, 8, |r, c| tokens.get(perm[r], c));
        let yp = fusion_classify(&TokenGrid::new(permuted, (2, 3)).unwrap(), &head, &params);
        assert!((y[0] - yp[0]).abs() < 1e-12);

        *params.get_mut(head.classifier.weight) = Mat::zeros(8, 2);
        let y0 = fusion_classify(&TokenGrid::new(Mat::zeros(6, 8), (2, 3)).unwrap(), &head, &params);
        assert_eq!(y0, [0.5, 0.5]);
    }
}
