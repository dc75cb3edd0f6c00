//! The full two-branch model and its training configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{patchify, Encoder, EncoderShape};
use crate::carp::CarpHead;
use crate::fusion::{fuse_maps_var, select, substitute_var, FusionHead, ScorePredictors, Selection};
use crate::imaging::{sobel_map, Image};
use crate::params::{Bound, ParamSet};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Every hyperparameter of a training run. Defaults are the desk-scale
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub carp_channels: usize,
    pub tau: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub use_class_token: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            carp_channels: 4,
            tau: 1.0,
            alpha: 0.1,
            learning_rate: 1e-3,
            batch_size: 16,
            iterations: 1500,
            seed: 0,
            use_class_token: false,
        }
    }
}

impl TrainConfig {
    /// The gradient-check configuration: 16×16 images, 2×2 grid, D=8, one
    /// block, two heads, d=2.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            carp_channels: 2,
            batch_size: 2,
            iterations: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_shape().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.carp_channels == 0 {
            return bad("carp_channels must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            image_size: self.image_size,
            patch: self.patch_size,
            dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            class_token: self.use_class_token,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn seq_len(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// Stream reserved for parameter initialization; training steps use their
/// own index as stream.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug)]
pub struct FocusModel {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub rgb: Encoder,
    pub sobel: Encoder,
    pub carp_rgb: CarpHead,
    pub carp_sobel: CarpHead,
    pub scorer: ScorePredictors,
    pub fusion: FusionHead,
}

/// Node handles for one batched forward pass. Probabilities are `B × 2`,
/// maps `(B·N) × 1` and the mask `(B·N) × 2`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub y_rgb: Var,
    pub y_sobel: Var,
    pub y_fus: Var,
    pub a_rgb: Var,
    pub a_sobel: Var,
    pub a_fus: Var,
    pub a_fus_fake_only: Var,
    pub logits: Var,
    pub mask: Var,
}

/// Stacked patch matrices for the two modalities.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub rgb: Mat,
    pub sobel: Mat,
    pub batch: usize,
}

/// Patches of an image and of its Sobel map.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub rgb: Mat,
    pub sobel: Mat,
}

impl FocusModel {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut params = ParamSet::new();
        let shape = config.encoder_shape();
        let d = config.embed_dim;
        let rgb = Encoder::new(&mut params, "rgb", shape, &mut rng)?;
        let sobel = Encoder::new(&mut params, "sobel", shape, &mut rng)?;
        let carp_rgb = CarpHead::new(&mut params, "carp_rgb", d, config.carp_channels, &mut rng)?;
        let carp_sobel = CarpHead::new(&mut params, "carp_sobel", d, config.carp_channels, &mut rng)?;
        let scorer = ScorePredictors::new(&mut params, "scorer", d, &mut rng);
        let fusion = FusionHead::new(&mut params, "fusion", d, config.heads, &mut rng);
        Ok(Self {
            config,
            params,
            rgb,
            sobel,
            carp_rgb,
            carp_sobel,
            scorer,
            fusion,
        })
    }

    pub fn prepare(&self, image: &Image) -> Result<PreparedImage> {
        let size = self.config.image_size;
        if image.height() != size || image.width() != size {
            return Err(Error::Input(format!(
                "image is {}x{}, model expects {size}x{size}",
                image.height(),
                image.width()
            )));
        }
        Ok(PreparedImage {
            rgb: patchify(image, self.config.patch_size)?,
            sobel: patchify(&sobel_map(image), self.config.patch_size)?,
        })
    }

    pub fn stack(&self, items: &[&PreparedImage]) -> BatchInput {
        let n = self.config.seq_len();
        let width = items.first().map_or(0, |p| p.rgb.cols());
        let mut rgb = Vec::with_capacity(items.len() * n * width);
        let mut sobel = Vec::with_capacity(items.len() * n * width);
        for it in items {
            rgb.extend_from_slice(it.rgb.data());
            sobel.extend_from_slice(it.sobel.data());
        }
        BatchInput {
            rgb: Mat::from_vec(items.len() * n, width, rgb),
            sobel: Mat::from_vec(items.len() * n, width, sobel),
            batch: items.len(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: &BatchInput,
        selection: &Selection,
    ) -> Result<ForwardVars> {
        let n = self.config.seq_len();
        let xr = g.input(input.rgb.clone());
        let xs = g.input(input.sobel.clone());
        let z_rgb = self.rgb.forward(g, p, xr)?;
        let z_sobel = self.sobel.forward(g, p, xs)?;
        let c_rgb = self.carp_rgb.forward(g, p, z_rgb, n);
        let c_sobel = self.carp_sobel.forward(g, p, z_sobel, n);
        let logits = self.scorer.forward(g, p, z_rgb, z_sobel);
        let mask = select(g, logits, selection)?;
        let z_fus = substitute_var(g, z_rgb, z_sobel, mask);
        let y_fus = self.fusion.forward(g, p, z_fus, n);
        let a_fus = fuse_maps_var(g, c_rgb.map, c_sobel.map, mask);
        let a_fus_fake_only = fuse_maps_var(g, c_rgb.fake_map, c_sobel.fake_map, mask);
        Ok(ForwardVars {
            y_rgb: c_rgb.scores,
            y_sobel: c_sobel.scores,
            y_fus,
            a_rgb: c_rgb.map,
            a_sobel: c_sobel.map,
            a_fus,
            a_fus_fake_only,
            logits,
            mask,
        })
    }

    /// Deterministic inference over prepared images, returning per-image
    /// `(a_fus, a′_fus, y_fus)` with maps shaped to the token grid.
    pub fn infer(&self, items: &[&PreparedImage]) -> Result<Vec<Inference>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let input = self.stack(items);
        let f = self.forward(&mut g, &p, &input, &Selection::Argmax)?;
        let (h, w) = self.config.grid();
        let n = h * w;
        let split = |v: Var, b: usize| Mat::from_vec(h, w, g.value(v).data()[b * n..(b + 1) * n].to_vec());
        Ok((0..items.len())
            .map(|b| Inference {
                a_fus: split(f.a_fus, b),
                a_fus_fake_only: split(f.a_fus_fake_only, b),
                y_fus: [g.value(f.y_fus).get(b, 0), g.value(f.y_fus).get(b, 1)],
                rgb_fraction: (0..n).map(|i| g.value(f.mask).get(b * n + i, 0)).sum::<f64>() / n as f64,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub a_fus: Mat,
    pub a_fus_fake_only: Mat,
    pub y_fus: [f64; 2],
    pub rgb_fraction: f64,
}
