//! A small reverse-mode tape over [`Mat`] values.
//!
//! Batched sequences are stored as `(B·seq) × C` matrices; the segment ops
//! (`segment_max`, `segment_mean`, `attention`, ...) take the per-sample row
//! count `seq` and treat each block of `seq` rows independently.

use std::sync::Arc;

use crate::tensor::{gemm_into, Mat, View};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities below this are clamped before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        seq: usize,
    },
    RepeatSegments {
        x: Var,
        seq: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StraightThrough {
        soft: Var,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Mat,
    },
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
    ResampleRows {
        x: Var,
        matrix: Arc<Mat>,
    },
    Sum(Var),
    PrependRow {
        x: Var,
        row: Var,
        seq: usize,
    },
    DropFirstRow {
        x: Var,
        seq: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Geometry of a batched, channels-last 2-D convolution lowered to im2col.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(out_row, col_offset, in_row)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_row = (b * oh + oy) * ow + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let in_row =
                                (b * self.height + iy as usize) * self.width + ix as usize;
                            f(out_row, (ky * self.kernel + kx) * self.channels, in_row);
                        }
                    }
                }
            }
        }
    }
}

/// The recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each bound parameter id in `0..count`, summed over every
    /// binding of that id.
    pub fn params(&self, count: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = vec![None; count];
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[id] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A trainable leaf identified by `id`.
    pub fn param(&mut self, id: usize, value: Mat) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x + row`, broadcasting a `1 × C` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(x).cols(), "add_row width mismatch");
        let mut value = self.value(x).clone();
        let rv = r.data().to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *v += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    /// `x ⊙ row`, broadcasting a `1 × C` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(x).cols(), "mul_row width mismatch");
        let rv = r.data().to_vec();
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            for (v, s) in value.row_mut(i).iter_mut().zip(&rv) {
                *v *= s;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::MulRow(x, row), ng)
    }

    /// `x ⊙ col`, broadcasting an `R × 1` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.cols(), 1);
        assert_eq!(c.rows(), self.value(x).rows(), "mul_col height mismatch");
        let cv = c.data().to_vec();
        let mut value = self.value(x).clone();
        for (i, s) in cv.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        let ng = self.needs(x) || self.needs(col);
        self.push(value, Op::MulCol(x, col), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let ng = self.needs(x);
        self.push(value, Op::AddScalar(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Per-row layer normalization followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), cols, "layer_norm gamma width");
        assert_eq!(b.len(), cols, "layer_norm beta width");
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((v, gg), bb) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *v = *v * gg + bb;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(B·seq) × 3D` holding `[q | k | v]`; each of the `heads`
    /// heads owns a contiguous `D/heads` column slice of q, k and v. The
    /// output is the `(B·seq) × D` concatenation of per-head results.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (rows, c3) = qv.shape();
        assert_eq!(c3 % 3, 0, "qkv width must be 3D");
        let d = c3 / 3;
        assert_eq!(d % heads, 0, "heads must divide D");
        assert_eq!(rows % seq, 0, "rows must be a multiple of seq");
        let dh = d / heads;
        let batch = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(rows, d);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let data = qv.data();
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * c3;
                let q = View::block(data, base + h * dh, seq, dh, c3);
                let k = View::block(data, base + d + h * dh, seq, dh, c3);
                let v = View::block(data, base + 2 * d + h * dh, seq, dh, c3);
                let poff = (b * heads + h) * seq * seq;
                let p = &mut probs[poff..poff + seq * seq];
                gemm_into(q, k.t(), p, 0, seq, 0.0);
                for r in 0..seq {
                    let row = &mut p[r * seq..(r + 1) * seq];
                    let mut m = f64::NEG_INFINITY;
                    for s in row.iter_mut() {
                        *s *= scale;
                        m = m.max(*s);
                    }
                    let mut total = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - m).exp();
                        total += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= total;
                    }
                }
                let pv = View::block(&probs[poff..poff + seq * seq], 0, seq, seq, seq);
                gemm_into(pv, v, out.data_mut(), b * seq * d + h * dh, d, 0.0);
            }
        }
        let ng = self.needs(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Column-wise maximum within each block of `seq` rows: `(B·seq)×C → B×C`.
    /// Ties go to the lowest row index.
    pub fn segment_max(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(rows % seq, 0);
        let batch = rows / seq;
        let mut out = Mat::zeros(batch, cols);
        let mut argmax = vec![0; batch * cols];
        for b in 0..batch {
            for c in 0..cols {
                let mut best = b * seq;
                let mut best_v = xv.get(best, c);
                for r in b * seq + 1..(b + 1) * seq {
                    let v = xv.get(r, c);
                    if v > best_v {
                        best = r;
                        best_v = v;
                    }
                }
                out.set(b, c, best_v);
                argmax[b * cols + c] = best;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::SegmentMax { x, argmax }, ng)
    }

    /// Column-wise mean within each block of `seq` rows: `(B·seq)×C → B×C`.
    pub fn segment_mean(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(rows % seq, 0);
        let batch = rows / seq;
        let mut out = Mat::zeros(batch, cols);
        for r in 0..rows {
            let b = r / seq;
            for (o, v) in out.row_mut(b).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / seq as f64);
        let ng = self.needs(x);
        self.push(out, Op::SegmentMean { x, seq }, ng)
    }

    /// Repeats each row `seq` times: `B×C → (B·seq)×C`.
    pub fn repeat_segments(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Mat::zeros(rows * seq, cols);
        for r in 0..rows * seq {
            out.row_mut(r).copy_from_slice(xv.row(r / seq));
        }
        let ng = self.needs(x);
        self.push(out, Op::RepeatSegments { x, seq }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let out = Mat::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Mat, soft: Var) -> Var {
        assert_eq!(hard.shape(), self.value(soft).shape());
        let ng = self.needs(soft);
        self.push(hard, Op::StraightThrough { soft }, ng)
    }

    /// Mean negative log-likelihood of the true class, clamped at
    /// [`PROB_FLOOR`]. `probs` is `B × classes`.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.rows(), labels.len(), "one label per row");
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv.get(i, y).max(PROB_FLOOR).ln())
            .sum();
        let value = Mat::scalar(total / labels.len() as f64);
        let ng = self.needs(probs);
        self.push(
            value,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "bce shape mismatch");
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum();
        let value = Mat::scalar(total / lv.len() as f64);
        let ng = self.needs(logits);
        self.push(value, Op::BceWithLogits { logits, targets }, ng)
    }

    /// Unfolds a channels-last batch into convolution patches with zero
    /// padding: `(B·H·W)×C → (B·Ho·Wo)×(k·k·C)`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.shape(),
            (geom.batch * geom.height * geom.width, geom.channels),
            "im2col input shape"
        );
        let out_rows = geom.batch * geom.out_height() * geom.out_width();
        let pl = geom.patch_len();
        let mut out = Mat::zeros(out_rows, pl);
        let c = geom.channels;
        {
            let src = xv.data();
            let dst = out.data_mut();
            geom.for_each_tap(|orow, off, irow| {
                dst[orow * pl + off..orow * pl + off + c]
                    .copy_from_slice(&src[irow * c..(irow + 1) * c]);
            });
        }
        let ng = self.needs(x);
        self.push(out, Op::Im2Col { x, geom }, ng)
    }

    /// Applies a fixed linear map to every sample: with `matrix` of shape
    /// `Ro × Ri`, each `Ri`-row block of `x` becomes `matrix · block`.
    pub fn resample_rows(&mut self, x: Var, matrix: Arc<Mat>) -> Var {
        let xv = self.value(x);
        let (ro, ri) = matrix.shape();
        assert_eq!(xv.rows() % ri, 0, "resample_rows block size");
        let batch = xv.rows() / ri;
        let cols = xv.cols();
        let mut out = Mat::zeros(batch * ro, cols);
        for b in 0..batch {
            let block = View::block(xv.data(), b * ri * cols, ri, cols, cols);
            gemm_into(
                View::normal(&matrix),
                block,
                out.data_mut(),
                b * ro * cols,
                cols,
                0.0,
            );
        }
        let ng = self.needs(x);
        self.push(out, Op::ResampleRows { x, matrix }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Inserts `row` before every block of `seq` rows.
    pub fn prepend_row(&mut self, x: Var, row: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, xv.cols()));
        let batch = xv.rows() / seq;
        let mut out = Mat::zeros(batch * (seq + 1), xv.cols());
        for b in 0..batch {
            out.row_mut(b * (seq + 1)).copy_from_slice(rv.row(0));
            for s in 0..seq {
                out.row_mut(b * (seq + 1) + 1 + s)
                    .copy_from_slice(xv.row(b * seq + s));
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(out, Op::PrependRow { x, row, seq }, ng)
    }

    /// Removes the first row of every block of `seq` rows.
    pub fn drop_first_row(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let batch = xv.rows() / seq;
        let mut out = Mat::zeros(batch * (seq - 1), xv.cols());
        for b in 0..batch {
            for s in 1..seq {
                out.row_mut(b * (seq - 1) + s - 1)
                    .copy_from_slice(xv.row(b * seq + s));
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::DropFirstRow { x, seq }, ng)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                params.push((i, id));
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.needs(v) {
            return;
        }
        let (r, c) = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(r, c));
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*row) {
                    self.acc(grads, *row, g.sum_rows());
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        for (v, s) in dx.row_mut(r).iter_mut().zip(rv.data()) {
                            *v *= s;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*row) {
                    let prod = g.zip_map(self.value(*x), |a, b| a * b);
                    self.acc(grads, *row, prod.sum_rows());
                }
            }
            Op::MulCol(x, col) => {
                let cv = self.value(*col);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (r, s) in cv.data().iter().enumerate() {
                        for v in dx.row_mut(r) {
                            *v *= s;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*col) {
                    let prod = g.zip_map(self.value(*x), |a, b| a * b);
                    self.acc(grads, *col, prod.sum_cols());
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv));
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(out, |gv, y| gv * y * (1.0 - y));
                self.acc(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Mat::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.needs(*beta) {
                    self.acc(grads, *beta, g.sum_rows());
                }
                if self.needs(*gamma) {
                    self.acc(grads, *gamma, g.zip_map(xhat, |a, b| a * b).sum_rows());
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let cols = xhat.cols() as f64;
                    let mut dx = Mat::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let xh = xhat.row(r);
                        let gr = g.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ((gv, gm), xv) in gr.iter().zip(gam).zip(xh) {
                            let d = gv * gm;
                            mean_d += d;
                            mean_dx += d * xv;
                        }
                        mean_d /= cols;
                        mean_dx /= cols;
                        let is = inv_std[r];
                        for (((o, gv), gm), xv) in
                            dx.row_mut(r).iter_mut().zip(gr).zip(gam).zip(xh)
                        {
                            *o = is * (gv * gm - mean_d - xv * mean_dx);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let qv = self.value(*qkv);
                let c3 = qv.cols();
                let d = c3 / 3;
                let dh = d / heads;
                let batch = qv.rows() / seq;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = qv.data();
                let gd = g.data();
                let mut dp = vec![0.0; seq * seq];
                self.acc_with(grads, *qkv, |dqkv| {
                    let dst = dqkv.data_mut();
                    for b in 0..batch {
                        for h in 0..heads {
                            let base = b * seq * c3;
                            let q = View::block(data, base + h * dh, seq, dh, c3);
                            let k = View::block(data, base + d + h * dh, seq, dh, c3);
                            let v = View::block(data, base + 2 * d + h * dh, seq, dh, c3);
                            let poff = (b * heads + h) * seq * seq;
                            let p = &probs[poff..poff + seq * seq];
                            let pview = View::block(p, 0, seq, seq, seq);
                            let dout = View::block(gd, b * seq * d + h * dh, seq, dh, d);
                            // dV = Pᵀ dO
                            gemm_into(pview.t(), dout, dst, base + 2 * d + h * dh, c3, 1.0);
                            // dP = dO Vᵀ
                            gemm_into(dout, v.t(), &mut dp, 0, seq, 0.0);
                            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-scaled
                            for r in 0..seq {
                                let pr = &p[r * seq..(r + 1) * seq];
                                let dr = &mut dp[r * seq..(r + 1) * seq];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for (dv, pv) in dr.iter_mut().zip(pr) {
                                    *dv = pv * (*dv - dot) * scale;
                                }
                            }
                            let ds = View::block(&dp, 0, seq, seq, seq);
                            gemm_into(ds, k, dst, base + h * dh, c3, 1.0);
                            gemm_into(ds.t(), q, dst, base + d + h * dh, c3, 1.0);
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax, .. } => {
                let cols = out.cols();
                self.acc_with(grads, *x, |dx| {
                    for b in 0..out.rows() {
                        for c in 0..cols {
                            let r = argmax[b * cols + c];
                            let cur = dx.get(r, c);
                            dx.set(r, c, cur + g.get(b, c));
                        }
                    }
                });
            }
            Op::SegmentMean { x, seq } => {
                let seq = *seq;
                self.acc_with(grads, *x, |dx| {
                    let inv = 1.0 / seq as f64;
                    for r in 0..dx.rows() {
                        let gr = g.row(r / seq).to_vec();
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(gr) {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::RepeatSegments { x, seq } => {
                let seq = *seq;
                self.acc_with(grads, *x, |dx| {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        for (d, gv) in dx.row_mut(r / seq).iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                self.acc_with(grads, *x, |dx| {
                    for r in 0..g.rows() {
                        for (c, gv) in g.row(r).iter().enumerate() {
                            let cur = dx.get(r, start + c);
                            dx.set(r, start + c, cur + gv);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        let part = Mat::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        self.acc(grads, *p, part);
                    }
                    offset += w;
                }
            }
            Op::StraightThrough { soft } => self.acc(grads, *soft, g.clone()),
            Op::Nll { probs, labels } => {
                let pv = self.value(*probs);
                let gs = g.get(0, 0);
                let n = labels.len() as f64;
                self.acc_with(grads, *probs, |dp| {
                    for (i, &y) in labels.iter().enumerate() {
                        let p = pv.get(i, y);
                        if p > PROB_FLOOR {
                            let cur = dp.get(i, y);
                            dp.set(i, y, cur - gs / (n * p));
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let gs = g.get(0, 0) / targets.len() as f64;
                let dz = self
                    .value(*logits)
                    .zip_map(targets, |z, t| (sigmoid(z) - t) * gs);
                self.acc(grads, *logits, dz);
            }
            Op::Im2Col { x, geom } => {
                let c = geom.channels;
                let pl = geom.patch_len();
                let gd = g.data();
                self.acc_with(grads, *x, |dx| {
                    let dst = dx.data_mut();
                    geom.for_each_tap(|orow, off, irow| {
                        for k in 0..c {
                            dst[irow * c + k] += gd[orow * pl + off + k];
                        }
                    });
                });
            }
            Op::ResampleRows { x, matrix } => {
                let (ro, ri) = matrix.shape();
                let cols = g.cols();
                let batch = g.rows() / ro;
                self.acc_with(grads, *x, |dx| {
                    for b in 0..batch {
                        let gb = View::block(g.data(), b * ro * cols, ro, cols, cols);
                        gemm_into(
                            View::transposed(matrix),
                            gb,
                            dx.data_mut(),
                            b * ri * cols,
                            cols,
                            1.0,
                        );
                    }
                });
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, Mat::filled(r, c, g.get(0, 0)));
            }
            Op::PrependRow { x, row, seq } => {
                let seq = *seq;
                let batch = g.rows() / (seq + 1);
                if self.needs(*row) {
                    let mut dr = Mat::zeros(1, g.cols());
                    for b in 0..batch {
                        for (d, gv) in dr.row_mut(0).iter_mut().zip(g.row(b * (seq + 1))) {
                            *d += gv;
                        }
                    }
                    self.acc(grads, *row, dr);
                }
                self.acc_with(grads, *x, |dx| {
                    for b in 0..batch {
                        for s in 0..seq {
                            let gr = g.row(b * (seq + 1) + 1 + s);
                            for (d, gv) in dx.row_mut(b * seq + s).iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::DropFirstRow { x, seq } => {
                let seq = *seq;
                self.acc_with(grads, *x, |dx| {
                    for r in 0..g.rows() {
                        let b = r / (seq - 1);
                        let s = r % (seq - 1);
                        for (d, gv) in dx.row_mut(b * seq + s + 1).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` with respect to its single
    /// parameter input, contracted against a fixed random weight.
    fn check(input: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let y = build(&mut g, x);
            random(&mut rng, g.value(y).rows(), g.value(y).cols())
        };
        let eval = |m: &Mat| {
            let mut g = Graph::new();
            let x = g.param(0, m.clone());
            let y = build(&mut g, x);
            let w = g.input(probe.clone());
            let p = g.mul(y, w);
            let s = g.sum(p);
            (g, x, s)
        };
        let (g, x, s) = eval(&input);
        let grads = g.backward(s);
        let analytic = grads.get(x).cloned().unwrap_or(Mat::zeros(input.rows(), input.cols()));
        let eps = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let (gp, _, sp) = eval(&plus);
            let (gm, _, sm) = eval(&minus);
            let num = (gp.value(sp).get(0, 0) - gm.value(sm).get(0, 0)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - num).abs() <= 1e-6 * (1.0 + a.abs()),
                "coordinate {i}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |g, v| g.gelu(v));
        check(x.clone(), |g, v| g.sigmoid(v));
        check(x.clone(), |g, v| g.softmax_rows(v));
        check(x.clone(), |g, v| {
            let m = g.mul(v, v);
            g.scale(m, 0.3)
        });
    }

    #[test]
    fn matmul_and_broadcasts_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 4, 5);
        let row = random(&mut rng, 1, 4);
        let col = random(&mut rng, 3, 1);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |g, v| {
            let wv = g.input(w.clone());
            g.matmul(v, wv)
        });
        check(w.clone(), |g, v| {
            let xv = g.input(x.clone());
            g.matmul(xv, v)
        });
        check(x.clone(), |g, v| {
            let r = g.input(row.clone());
            let a = g.add_row(v, r);
            g.mul_row(a, r)
        });
        check(row.clone(), |g, v| {
            let xv = g.input(x.clone());
            let a = g.mul_row(xv, v);
            g.add_row(a, v)
        });
        check(col.clone(), |g, v| {
            let xv = g.input(x.clone());
            g.mul_col(xv, v)
        });
        check(x.clone(), |g, v| {
            let c = g.input(col.clone());
            g.mul_col(v, c)
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 6);
        let gamma = random(&mut rng, 1, 6);
        let beta = random(&mut rng, 1, 6);
        check(x.clone(), |g, v| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            g.layer_norm(v, ga, be, 1e-8)
        });
        check(gamma.clone(), |g, v| {
            let xv = g.input(x.clone());
            let be = g.input(beta.clone());
            g.layer_norm(xv, v, be, 1e-8)
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // batch 2, seq 3, D 4, 2 heads
        let qkv = random(&mut rng, 6, 12);
        check(qkv, |g, v| g.attention(v, 3, 2));
    }

    #[test]
    fn segment_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 6, 3);
        check(x.clone(), |g, v| g.segment_max(v, 3));
        check(x.clone(), |g, v| g.segment_mean(v, 2));
        check(random(&mut rng, 2, 3), |g, v| g.repeat_segments(v, 4));
        check(x.clone(), |g, v| {
            let a = g.slice_cols(v, 1, 2);
            let b = g.slice_cols(v, 0, 1);
            g.concat_cols(&[a, b, a])
        });
        check(x.clone(), |g, v| g.drop_first_row(v, 3));
        check(x, |g, v| {
            let r = g.slice_cols(v, 0, 3);
            let first = g.segment_mean(r, 6);
            g.prepend_row(v, first, 2)
        });
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random(&mut rng, 4, 2);
        check(logits.clone(), |g, v| {
            let p = g.softmax_rows(v);
            g.nll(p, &[0, 1, 1, 0])
        });
        let targets = Mat::from_fn(4, 2, |r, c| ((r + c) % 3) as f64 / 2.0);
        check(logits, |g, v| g.bce_with_logits(v, targets.clone()));
    }

    #[test]
    fn im2col_and_resample_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let geom = ConvGeometry {
            batch: 2,
            height: 4,
            width: 5,
            channels: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        check(random(&mut rng, 40, 2), |g, v| g.im2col(v, geom));
        let m = Arc::new(random(&mut rng, 7, 5));
        check(random(&mut rng, 10, 3), |g, v| g.resample_rows(v, m.clone()));
    }

    #[test]
    fn im2col_layout() {
        let geom = ConvGeometry {
            batch: 1,
            height: 2,
            width: 2,
            channels: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut g = Graph::new();
        let x = g.input(Mat::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let cols = g.im2col(x, geom);
        // top-left output sees the zero border plus [1 2; 3 4] in its lower right
        assert_eq!(
            g.value(cols).row(0),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]
        );
    }

    #[test]
    fn straight_through_passes_gradient_to_soft_input() {
        let mut g = Graph::new();
        let soft = g.param(0, Mat::from_rows(&[&[0.3, 0.7]]));
        let st = g.straight_through(Mat::from_rows(&[&[0.0, 1.0]]), soft);
        assert_eq!(g.value(st).data(), &[0.0, 1.0]);
        let w = g.input(Mat::from_rows(&[&[2.0, -3.0]]));
        let p = g.mul(st, w);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(soft).unwrap().data(), &[2.0, -3.0]);
    }

    #[test]
    fn param_grads_sum_over_bindings() {
        let mut g = Graph::new();
        let a = g.param(0, Mat::scalar(2.0));
        let b = g.param(0, Mat::scalar(2.0));
        let p = g.mul(a, b);
        let grads = g.backward(p);
        assert_eq!(grads.params(1)[0].as_ref().unwrap().get(0, 0), 4.0);
    }
}
