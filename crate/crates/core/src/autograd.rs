//! Minimal tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! The op set is exactly what the denoiser and its training loss need:
//! linear maps, multi-head attention, layer norm, GELU, embedding gathers,
//! dropout, and the two loss reductions. Gradients are validated end to end
//! against central finite differences (see the model tests and the
//! acceptance suite).
//!
//! A [`Tape`] is built per forward pass and dropped afterwards. Leaves carry
//! an optional parameter slot; [`Tape::backward`] returns one gradient array
//! per slot.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf {
        slot: Option<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        trans_w: bool,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<Array2<f64>>, // one (Sq, Sk) matrix per (batch, head)
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: ArrayD<f64>,
    },
    WeightedSum {
        x: Var,
        weights: ArrayD<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Computation tape. Nodes are appended during the forward pass; `backward`
/// walks them in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

/// View an array of shape (..., F) as (M, F).
fn flat2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    let shape = a.shape();
    let f = *shape.last().expect("non-scalar");
    let m = a.len() / f;
    a.view()
        .into_shape_with_order((m, f))
        .expect("standard layout")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is reported for it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf { slot: None })
    }

    /// Parameter leaf whose gradient is returned under `slot`.
    pub fn param(&mut self, value: ArrayD<f64>, slot: usize) -> Var {
        self.push(value, Op::Leaf { slot: Some(slot) })
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar() on non-scalar node");
        value.iter().next().copied().unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a, c))
    }

    /// `x . w [+ b]`, or `x . w^T [+ b]` with `trans_w`. `x` has shape
    /// (..., F); the output replaces F with the other dimension of `w`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, trans_w: bool) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = as2(&self.nodes[w.0].value);
        let x2 = flat2(xv);
        let mut y = if trans_w {
            x2.dot(&wv.t())
        } else {
            x2.dot(&wv)
        };
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            let b1 = bv
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias is rank 1");
            y += &b1;
        }
        let mut out_shape: Vec<usize> = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = y.shape()[1];
        let value = y.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push(value, Op::Linear { x, w, b, trans_w })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let x2 = flat2(xv);
        let g = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma is rank 1");
        let b = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta is rank 1");
        let f = x2.shape()[1] as f64;
        let mut normalized = Array2::<f64>::zeros(x2.raw_dim());
        let mut inv_std = Array1::<f64>::zeros(x2.shape()[0]);
        let mut out = Array2::<f64>::zeros(x2.raw_dim());
        for (r, row) in x2.outer_iter().enumerate() {
            let mean = row.sum() / f;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (c, &v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normalized[[r, c]] = n;
                out[[r, c]] = n * g[c] + b[c];
            }
        }
        let value = out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is (B, Sq, D); `k` and `v` are (B, Sk, D); D splits into `heads`
    /// contiguous slices. `key_mask[b][s] = true` hides key position `s` of
    /// batch element `b` from every query.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[Vec<bool>]>,
    ) -> Var {
        let qv = self.nodes[q.0].value.clone();
        let kv = self.nodes[k.0].value.clone();
        let vv = self.nodes[v.0].value.clone();
        let (b, sq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        let e = d / heads;
        let scale = 1.0 / (e as f64).sqrt();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, sq, d]));
        let mut probs = Vec::with_capacity(b * heads);
        for bi in 0..b {
            for h in 0..heads {
                let cols = h * e..(h + 1) * e;
                let qh = qv
                    .slice(ndarray::s![bi, .., cols.clone()])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let kh = kv
                    .slice(ndarray::s![bi, .., cols.clone()])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let vh = vv
                    .slice(ndarray::s![bi, .., cols.clone()])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut scores = qh.dot(&kh.t()) * scale;
                if let Some(mask) = key_mask {
                    for (s, &hidden) in mask[bi].iter().enumerate() {
                        if hidden {
                            scores.column_mut(s).fill(-1e9);
                        }
                    }
                }
                // Row-wise softmax with max subtraction.
                for mut row in scores.outer_iter_mut() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|x| (x - m).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum);
                }
                let oh = scores.dot(&vh);
                out.slice_mut(ndarray::s![bi, .., cols]).assign(&oh);
                probs.push(scores);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
        )
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = as2(&self.nodes[table.0].value);
        let d = tv.shape()[1];
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(id));
        }
        self.push(
            out.into_dyn(),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(value, Op::Reshape(x))
    }

    /// Elementwise multiply by a fixed 0/(1/keep) mask.
    pub fn dropout(&mut self, x: Var, mask: ArrayD<f64>) -> Var {
        let value = &self.nodes[x.0].value * &mask;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Scalar `sum(x * weights)`.
    pub fn weighted_sum(&mut self, x: Var, weights: ArrayD<f64>) -> Var {
        let total = (&self.nodes[x.0].value * &weights).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            Op::WeightedSum { x, weights },
        )
    }

    /// Scalar weighted negative log-likelihood of `targets` under row-wise
    /// softmax of `logits` (shape (M, V)).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], row_weights: &[f64]) -> Var {
        let lv = as2(&self.nodes[logits.0].value);
        assert_eq!(lv.shape()[0], targets.len());
        assert_eq!(targets.len(), row_weights.len());
        let mut probs = Array2::<f64>::zeros(lv.raw_dim());
        let mut total = 0.0;
        for (r, row) in lv.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let ex = (x - m).exp();
                probs[[r, c]] = ex;
                sum += ex;
            }
            for c in 0..row.len() {
                probs[[r, c]] /= sum;
            }
            let log_p = (row[targets[r]] - m) - sum.ln();
            total -= row_weights[r] * log_p;
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from the scalar `loss`. Returns one gradient per
    /// parameter slot in `0..n_slots` (None where the slot was never used).
    pub fn backward(&self, loss: Var, n_slots: usize) -> Result<Vec<Option<ArrayD<f64>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward target must be scalar".into()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            1.0,
        ));

        for idx in (0..=loss.0).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(grad); // keep for slot collection
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::Mul(a, b) => {
                    let ga = &grad * &self.nodes[b.0].value;
                    let gb = &grad * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &grad * *c);
                }
                Op::Linear { x, w, b, trans_w } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = as2(&self.nodes[w.0].value);
                    let x2 = flat2(xv);
                    let g2 = flat2(&grad);
                    let (dx2, dw) = if *trans_w {
                        // y = x . w^T, w is (G, F)
                        (g2.dot(&wv), g2.t().dot(&x2))
                    } else {
                        (g2.dot(&wv.t()), x2.t().dot(&g2))
                    };
                    let dx = dx2
                        .into_dyn()
                        .into_shape_with_order(xv.raw_dim())
                        .unwrap();
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw.into_dyn());
                    if let Some(b) = b {
                        let db = g2.sum_axis(Axis(0));
                        accumulate(&mut grads, *b, db.into_dyn());
                    }
                }
                Op::Gelu(a) => {
                    let da = self.nodes[a.0].value.mapv(gelu_grad);
                    accumulate(&mut grads, *a, &grad * &da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let g2 = flat2(&grad).to_owned();
                    let gv = self.nodes[gamma.0]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap();
                    let f = g2.shape()[1] as f64;
                    let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                    let mut dgamma = Array1::<f64>::zeros(g2.shape()[1]);
                    let mut dbeta = Array1::<f64>::zeros(g2.shape()[1]);
                    for r in 0..g2.shape()[0] {
                        let gy = g2.row(r);
                        let nh = normalized.row(r);
                        let mut dxhat = Array1::<f64>::zeros(gy.len());
                        for c in 0..gy.len() {
                            dgamma[c] += gy[c] * nh[c];
                            dbeta[c] += gy[c];
                            dxhat[c] = gy[c] * gv[c];
                        }
                        let mean_dxhat = dxhat.sum() / f;
                        let mean_dxhat_nh = dxhat
                            .iter()
                            .zip(nh.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / f;
                        for c in 0..gy.len() {
                            dx[[r, c]] =
                                inv_std[r] * (dxhat[c] - mean_dxhat - nh[c] * mean_dxhat_nh);
                        }
                    }
                    let dx = dx
                        .into_dyn()
                        .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                        .unwrap();
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma.into_dyn());
                    accumulate(&mut grads, *beta, dbeta.into_dyn());
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    probs,
                } => {
                    let qv = &self.nodes[q.0].value;
                    let kv = &self.nodes[k.0].value;
                    let vv = &self.nodes[v.0].value;
                    let (b, d) = (qv.shape()[0], qv.shape()[2]);
                    let e = d / heads;
                    let mut dq = ArrayD::<f64>::zeros(qv.raw_dim());
                    let mut dk = ArrayD::<f64>::zeros(kv.raw_dim());
                    let mut dv = ArrayD::<f64>::zeros(vv.raw_dim());
                    for bi in 0..b {
                        for h in 0..*heads {
                            let cols = h * e..(h + 1) * e;
                            let a = &probs[bi * heads + h];
                            let qh = qv
                                .slice(ndarray::s![bi, .., cols.clone()])
                                .into_dimensionality::<Ix2>()
                                .unwrap();
                            let kh = kv
                                .slice(ndarray::s![bi, .., cols.clone()])
                                .into_dimensionality::<Ix2>()
                                .unwrap();
                            let vh = vv
                                .slice(ndarray::s![bi, .., cols.clone()])
                                .into_dimensionality::<Ix2>()
                                .unwrap();
                            let go = grad
                                .slice(ndarray::s![bi, .., cols.clone()])
                                .into_dimensionality::<Ix2>()
                                .unwrap();
                            let dvh = a.t().dot(&go);
                            let da = go.dot(&vh.t());
                            // Softmax backward: ds = a * (da - rowsum(da * a))
                            let mut ds = Array2::<f64>::zeros(a.raw_dim());
                            for r in 0..a.shape()[0] {
                                let dot = da
                                    .row(r)
                                    .iter()
                                    .zip(a.row(r).iter())
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                                for c in 0..a.shape()[1] {
                                    ds[[r, c]] = a[[r, c]] * (da[[r, c]] - dot);
                                }
                            }
                            let dqh = ds.dot(&kh) * *scale;
                            let dkh = ds.t().dot(&qh) * *scale;
                            dq.slice_mut(ndarray::s![bi, .., cols.clone()])
                                .scaled_add(1.0, &dqh);
                            dk.slice_mut(ndarray::s![bi, .., cols.clone()])
                                .scaled_add(1.0, &dkh);
                            dv.slice_mut(ndarray::s![bi, .., cols])
                                .scaled_add(1.0, &dvh);
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Gather { table, ids } => {
                    let tv = &self.nodes[table.0].value;
                    let g2 = flat2(&grad);
                    let mut dt = Array2::<f64>::zeros((tv.shape()[0], tv.shape()[1]));
                    for (i, &id) in ids.iter().enumerate() {
                        dt.row_mut(id).scaled_add(1.0, &g2.row(i));
                    }
                    accumulate(&mut grads, *table, dt.into_dyn());
                }
                Op::Reshape(x) => {
                    let dx = grad
                        .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                        .unwrap();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, *x, &grad * mask);
                }
                Op::WeightedSum { x, weights } => {
                    let g = grad.iter().next().copied().unwrap();
                    accumulate(&mut grads, *x, weights * g);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    row_weights,
                    probs,
                } => {
                    let g = grad.iter().next().copied().unwrap();
                    let mut dl = probs.clone();
                    for (r, (&t, &w)) in targets.iter().zip(row_weights.iter()).enumerate() {
                        dl[[r, t]] -= 1.0;
                        for c in 0..dl.shape()[1] {
                            dl[[r, c]] *= g * w;
                        }
                    }
                    accumulate(&mut grads, *logits, dl.into_dyn());
                }
            }
        }

        let mut by_slot: Vec<Option<ArrayD<f64>>> = (0..n_slots).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { slot: Some(s) } = node.op {
                if let Some(g) = grads[idx].take() {
                    match &mut by_slot[s] {
                        Some(acc) => *acc = &*acc + &g,
                        empty => *empty = Some(g),
                    }
                }
            }
        }
        Ok(by_slot)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc = &*acc + &g,
        slot => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
