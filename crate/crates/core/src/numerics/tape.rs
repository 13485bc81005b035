//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every forward call appends a node holding its output and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse,
//! accumulating parameter gradients into the [`ParamStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, ParamId, ParamStore, Result, Tensor, L2_NORM_EPS, LAYER_NORM_EPS};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    EmbedMean {
        table: ParamId,
        bags: Vec<Vec<u32>>,
    },
    Affine {
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    Gelu {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        /// Per-element multiplier: 0 or 1/(1-p).
        scale: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        gain: ParamId,
        bias: ParamId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-use record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the backward seed with respect to every tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.nodes[node.0].as_ref()
    }
}

const GELU_C: f64 = 0.044715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let half = T::of(0.5);
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(GELU_C);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

/// Tanh-approximated Gaussian error linear unit.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a constant input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Mean of embedding-table rows per bag of feature ids, giving a
    /// `bags x d` matrix. Repeated ids count with their multiplicity.
    pub fn embed_mean(
        &mut self,
        table: ParamId,
        bags: Vec<Vec<u32>>,
        params: &ParamStore<T>,
    ) -> Result<NodeId> {
        let t = params.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[bags.len(), d]);
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(shape_err("embed_mean", format!("bag {b} is empty")));
            }
            let row = out.row_mut(b);
            for &f in bag {
                let f = f as usize;
                if f >= vocab {
                    return Err(shape_err("embed_mean", format!("feature {f} >= vocabulary {vocab}")));
                }
                for (o, &w) in row.iter_mut().zip(t.row(f)) {
                    *o += w;
                }
            }
            let inv = T::one() / T::of(bag.len() as f64);
            row.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(self.push(out, Op::EmbedMean { table, bags }))
    }

    /// `y = x W + b` for `x: B x n`, `W: n x m`, `b: m`.
    pub fn affine(
        &mut self,
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
        params: &ParamStore<T>,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let w = params.value(weight);
        let b = params.value(bias);
        if w.shape().len() != 2 || xv.cols() != w.rows() || b.len() != w.cols() {
            return Err(shape_err(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), w.shape(), b.shape()),
            ));
        }
        let (rows, n, m) = (xv.rows(), w.rows(), w.cols());
        let mut out = Tensor::zeros(&[rows, m]);
        for i in 0..rows {
            let xr = xv.row(i);
            let yr = out.row_mut(i);
            yr.copy_from_slice(b.data());
            for k in 0..n {
                let xik = xr[k];
                if xik == T::zero() {
                    continue;
                }
                for (y, &wkj) in yr.iter_mut().zip(w.row(k)) {
                    *y += xik * wkj;
                }
            }
        }
        Ok(self.push(out, Op::Affine { x, weight, bias }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(out, Op::Gelu { x })
    }

    /// Inverted dropout. The identity when `training` is false or `p` is 0.
    pub fn dropout(&mut self, x: NodeId, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::DropoutProbability(p));
        }
        let xv = self.value(x);
        let scale: Vec<T> = if training && p > 0.0 {
            let keep = T::of(1.0 / (1.0 - p));
            (0..xv.len())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect()
        } else {
            vec![T::one(); xv.len()]
        };
        let data = xv.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        Ok(self.push(out, Op::Dropout { x, scale }))
    }

    /// Per-row standardization followed by an elementwise affine map.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: ParamId,
        bias: ParamId,
        params: &ParamStore<T>,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.cols();
        let g = params.value(gain);
        let b = params.value(bias);
        if n < 2 || g.len() != n || b.len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let nf = T::of(n as f64);
        let rows = xv.rows();
        let mut normalized = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / nf;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let o = out.row_mut(i);
            for j in 0..n {
                let h = (r[j] - mean) * inv;
                normalized[i * n + j] = h;
                o[j] = h * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let norm = xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::of(L2_NORM_EPS)) {
                return Err(NumericsError::DegenerateRow {
                    row: i,
                    norm: norm.as_f64(),
                });
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// Propagates `seed` (the gradient of a scalar objective with respect to
    /// `output`) back through the tape. Parameter gradients are accumulated
    /// into `params`, skipping frozen parameters.
    pub fn backward(
        &self,
        output: NodeId,
        seed: Tensor<T>,
        params: &mut ParamStore<T>,
    ) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::EmbedMean { table, bags } => {
                    let p = params.get_mut(*table);
                    if !p.frozen {
                        for (b, bag) in bags.iter().enumerate() {
                            let inv = T::one() / T::of(bag.len() as f64);
                            let g = dy.row(b);
                            for &f in bag {
                                for (acc, &gv) in p.grad.row_mut(f as usize).iter_mut().zip(g) {
                                    *acc += gv * inv;
                                }
                            }
                        }
                    }
                }
                Op::Affine { x, weight, bias } => {
                    let xv = self.value(*x);
                    let (rows, n) = (xv.rows(), xv.cols());
                    let wv = params.value(*weight);
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..rows {
                        let dyr = dy.row(i);
                        let dxr = dx.row_mut(i);
                        for k in 0..n {
                            dxr[k] = wv.row(k).iter().zip(dyr).map(|(&w, &g)| w * g).sum();
                        }
                    }
                    let wp = params.get_mut(*weight);
                    if !wp.frozen {
                        for i in 0..rows {
                            let xr = xv.row(i);
                            let dyr = dy.row(i);
                            for k in 0..n {
                                let xik = xr[k];
                                if xik == T::zero() {
                                    continue;
                                }
                                for (acc, &g) in wp.grad.row_mut(k).iter_mut().zip(dyr) {
                                    *acc += xik * g;
                                }
                            }
                        }
                    }
                    let bp = params.get_mut(*bias);
                    if !bp.frozen {
                        for i in 0..rows {
                            for (acc, &g) in bp.grad.data_mut().iter_mut().zip(dy.row(i)) {
                                *acc += g;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| g * gelu_parts(v).1)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), data)?);
                }
                Op::Dropout { x, scale } => {
                    let data = dy.data().iter().zip(scale).map(|(&g, &s)| g * s).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(dy.shape(), data)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let n = dy.cols();
                    let rows = dy.rows();
                    let nf = T::of(n as f64);
                    let gv = params.value(*gain);
                    let mut dx = Tensor::zeros(dy.shape());
                    for i in 0..rows {
                        let dyr = dy.row(i);
                        let h = &normalized[i * n..(i + 1) * n];
                        let dh: Vec<T> = dyr.iter().zip(gv.data()).map(|(&g, &w)| g * w).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[i] / nf;
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = scale * (nf * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    let gp = params.get_mut(*gain);
                    if !gp.frozen {
                        for i in 0..rows {
                            let h = &normalized[i * n..(i + 1) * n];
                            for ((acc, &g), &hv) in gp.grad.data_mut().iter_mut().zip(dy.row(i)).zip(h) {
                                *acc += g * hv;
                            }
                        }
                    }
                    let bp = params.get_mut(*bias);
                    if !bp.frozen {
                        for i in 0..rows {
                            for (acc, &g) in bp.grad.data_mut().iter_mut().zip(dy.row(i)) {
                                *acc += g;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(dy.shape());
                    for (i, &norm) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let dyr = dy.row(i);
                        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = (dyr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { nodes: grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], node: NodeId, g: Tensor<T>) {
    match &mut grads[node.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
