//! Patch embedding, fixed 2-D sinusoidal position encodings and the
//! pre-norm transformer encoder shared by the RGB and Sobel branches.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::imaging::Image;
use crate::params::{trunc_normal, Bound, ParamId, ParamSet};
use crate::tensor::Mat;
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-8;
pub const MLP_RATIO: usize = 4;

/// `N = h·w` tokens of width `D` laid out row-major over an `h × w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Mat,
    pub grid: (usize, usize),
}

impl TokenGrid {
    pub fn new(tokens: Mat, grid: (usize, usize)) -> Result<Self> {
        if tokens.rows() != grid.0 * grid.1 {
            return Err(Error::Input(format!(
                "{} tokens cannot fill a {}x{} grid",
                tokens.rows(),
                grid.0,
                grid.1
            )));
        }
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// 2-D sinusoidal table: the first `D/2` channels encode the row index and
/// the last `D/2` the column index, each as `[sin(p·ω_k) | cos(p·ω_k)]` with
/// `ω_k = 10000^(−k/(D/4))`.
pub fn fixed_pos_encoding(h: usize, w: usize, dim: usize) -> Result<Mat> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!(
            "position encoding width must be a positive multiple of 4, got {dim}"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut table = Mat::zeros(h * w, dim);
    for y in 0..h {
        for x in 0..w {
            let row = table.row_mut(y * w + x);
            for (k, om) in omega.iter().enumerate() {
                row[k] = (y as f64 * om).sin();
                row[quarter + k] = (y as f64 * om).cos();
                row[2 * quarter + k] = (x as f64 * om).sin();
                row[3 * quarter + k] = (x as f64 * om).cos();
            }
        }
    }
    Ok(table)
}

/// Splits an image into non-overlapping `patch × patch` tiles, each flattened
/// in `(row, column, channel)` order: `N × (P²·3)`.
pub fn patchify(image: &Image, patch: usize) -> Result<Mat> {
    let (hh, ww) = (image.height(), image.width());
    if patch == 0 || hh % patch != 0 || ww % patch != 0 {
        return Err(Error::Config(format!(
            "image {hh}x{ww} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (hh / patch, ww / patch);
    let plen = patch * patch * 3;
    let mut out = Mat::zeros(gh * gw, plen);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut i = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        row[i] = image.get(gy * patch + py, gx * patch + px, c);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `x·W + b` for a `(in × out)` weight and `1 × out` bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: params.add(
                format!("{name}.weight"),
                trunc_normal(rng, inputs, outputs, INIT_STD),
            ),
            bias: params.add(format!("{name}.bias"), Mat::zeros(1, outputs)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let xw = g.matmul(x, p[self.weight]);
        g.add_row(xw, p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0)),
            beta: params.add(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// `z' = MHSA(LN(z)) + z; z = MLP(LN(z')) + z'`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim),
            qkv: Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(params, &format!("{name}.proj"), dim, dim, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim),
            fc1: Linear::new(params, &format!("{name}.fc1"), dim, MLP_RATIO * dim, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), MLP_RATIO * dim, dim, rng),
            heads,
        }
    }

    /// `x` is `(B·seq) × D`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, seq: usize) -> Var {
        let h = self.ln1.forward(g, p, x);
        let qkv = self.qkv.forward(g, p, h);
        let att = g.attention(qkv, seq, self.heads);
        let att = self.proj.forward(g, p, att);
        let x1 = g.add(att, x);
        let h = self.ln2.forward(g, p, x1);
        let h = self.fc1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h);
        g.add(h, x1)
    }
}

/// One modality branch: patch embedding plus `L` encoder blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub class_token: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub patch: usize,
    pub grid: (usize, usize),
    pos: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderShape {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub class_token: bool,
}

impl EncoderShape {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.dim % (4 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 4*heads = {}",
                self.dim,
                4 * self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch;
        (side, side)
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        shape: EncoderShape,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        let grid = shape.grid();
        let plen = shape.patch * shape.patch * 3;
        let embed = Linear::new(params, &format!("{name}.embed"), plen, shape.dim, rng);
        let class_token = shape.class_token.then(|| {
            params.add(
                format!("{name}.class_token"),
                trunc_normal(rng, 1, shape.dim, INIT_STD),
            )
        });
        let blocks = (0..shape.depth)
            .map(|i| EncoderBlock::new(params, &format!("{name}.block{i}"), shape.dim, shape.heads, rng))
            .collect();
        Ok(Self {
            embed,
            class_token,
            blocks,
            patch: shape.patch,
            grid,
            pos: fixed_pos_encoding(grid.0, grid.1, shape.dim)?,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn pos_encoding(&self) -> &Mat {
        &self.pos
    }

    /// Patch embedding plus position encoding for stacked patches
    /// `(B·N) × (P²·3)`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, patches: Var) -> Var {
        let n = self.seq_len();
        let rows = g.value(patches).rows();
        let batch = rows / n;
        let mut pos = Mat::zeros(rows, self.pos.cols());
        for b in 0..batch {
            pos.data_mut()[b * n * self.pos.cols()..(b + 1) * n * self.pos.cols()]
                .copy_from_slice(self.pos.data());
        }
        let e = self.embed.forward(g, p, patches);
        let pos = g.input(pos);
        g.add(e, pos)
    }

    /// Runs the blocks over embedded tokens and returns the `(B·N) × D`
    /// image tokens. A class token, when configured, is prepended before the
    /// first block and dropped from the output.
    pub fn encode(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let n = self.seq_len();
        let (mut x, seq) = match self.class_token {
            Some(cls) => (g.prepend_row(tokens, p[cls], n), n + 1),
            None => (tokens, n),
        };
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x, seq);
            if !g.value(x).all_finite() {
                return Err(Error::Numeric(format!("non-finite output from encoder block {i}")));
            }
        }
        if self.class_token.is_some() {
            x = g.drop_first_row(x, seq);
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
        let tokens = self.embed(g, p, patches);
        self.encode(g, p, tokens)
    }

    /// Embeds one image into a token grid.
    pub fn patchify_embed(&self, params: &ParamSet, image: &Image) -> Result<TokenGrid> {
        let patches = patchify(image, self.patch)?;
        if patches.rows() != self.seq_len() {
            return Err(Error::Config(format!(
                "image yields {} patches, encoder expects {}",
                patches.rows(),
                self.seq_len()
            )));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.input(patches);
        let t = self.embed(&mut g, &p, x);
        TokenGrid::new(g.value(t).clone(), self.grid)
    }

    /// Runs the encoder blocks over one token grid.
    pub fn encoder_forward(&self, params: &ParamSet, grid: &TokenGrid) -> Result<TokenGrid> {
        if grid.dim() != self.pos.cols() {
            return Err(Error::Input(format!(
                "token width {} does not match encoder width {}",
                grid.dim(),
                self.pos.cols()
            )));
        }
        if grid.len() != self.seq_len() {
            return Err(Error::Input(format!(
                "{} tokens given, encoder expects {}",
                grid.len(),
                self.seq_len()
            )));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.input(grid.tokens.clone());
        let y = self.encode(&mut g, &p, x)?;
        TokenGrid::new(g.value(y).clone(), grid.grid)
    }
}
