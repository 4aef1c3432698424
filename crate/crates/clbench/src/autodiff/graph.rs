//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation applied during a forward pass in
//! execution order; [`Graph::backward`] replays the tape once in reverse and
//! accumulates parameter gradients into the owning [`ParamSet`]. A graph is
//! built fresh for every optimizer step and dropped afterwards.

use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Constant leaf (inputs, targets).
    Input,
    /// Leaf bound to a trainable parameter; backward routes here.
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    /// Standardize-and-affine. `xhat` and `inv_std` are saved from the
    /// forward; `batch_stats` selects the backward rule (batch moments are a
    /// function of `x`, running moments are constants).
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// Column subset `out[b, j] = x[b, cols[j]]`.
    GatherCols {
        x: Var,
        cols: Vec<usize>,
    },
    /// `sum_i weights[i] * (-log softmax(logits[i])[labels[i]])`.
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    /// Mean squared difference against a constant target, over all entries.
    MseLoss {
        pred: Var,
        target: Tensor,
    },
    /// Mean stabilized binary cross-entropy on logits against constant
    /// targets in [0, 1].
    SigmoidBce {
        logits: Var,
        targets: Tensor,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    /// `sum_i coeffs[i] * scalars[i]`, the glue for composite losses.
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations plus their forward values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Record a leaf bound to a trainable parameter. Backward accumulates
    /// into the parameter's grad buffer.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value_tensor(id), Op::Param(id))
    }

    /// `out[b] = x[b] . weight + bias` for `x: [B, D_in]`, `weight: [D_in,
    /// D_out]`, `bias: [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::DimensionMismatch {
                op: "linear (input vs weight)",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[1]] {
            return Err(Error::DimensionMismatch {
                op: "linear (weight vs bias)",
                lhs: ws,
                rhs: bs,
            });
        }
        let (batch, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; batch * d_out];
        for i in 0..batch {
            let row = &xv[i * d_in..(i + 1) * d_in];
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            orow.copy_from_slice(bv);
            for (d, &xd) in row.iter().enumerate() {
                let wrow = &wv[d * d_out..(d + 1) * d_out];
                for (o, &wo) in wrow.iter().enumerate() {
                    orow[o] += xd * wo;
                }
            }
        }
        let value = Tensor::new(vec![batch, d_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).values().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Relu { x })
    }

    /// Kernel for batch normalization with already-resolved moments. Policy
    /// (which moments, whether the EMA moves) lives in the normalization
    /// module.
    pub fn batch_norm_with_stats(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.get(1).unwrap_or(&0);
        if xs.len() != 2 || mean.len() != c || self.value(scale).len() != c {
            return Err(Error::DimensionMismatch {
                op: "batch_norm",
                lhs: xs,
                rhs: vec![mean.len(), self.value(scale).len()],
            });
        }
        let b = xs[0];
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).values();
        let sv = self.value(scale).values().to_vec();
        let hv = self.value(shift).values().to_vec();
        let mut xhat = vec![0.0; b * c];
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                let h = (xv[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = sv[j] * h + hv[j];
            }
        }
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn gather_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || cols.iter().any(|&c| c >= xs[1]) {
            return Err(Error::Contract(format!(
                "gather_cols: columns {cols:?} invalid for shape {xs:?}"
            )));
        }
        let b = xs[0];
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(b * cols.len());
        for i in 0..b {
            for &c in &cols {
                out.push(xv[i * xs[1] + c]);
            }
        }
        let value = Tensor::new(vec![b, cols.len()], out)?;
        Ok(self.push(value, Op::GatherCols { x, cols }))
    }

    /// Mean cross-entropy: `mean_i -log softmax(logits[i])[labels[i]]`.
    pub fn softmax_ce_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let b = self.value(logits).rows();
        if b == 0 {
            return Err(Error::EmptyBatch("softmax_ce_loss"));
        }
        let w = 1.0 / b as f64;
        self.softmax_ce_weighted(logits, labels, &vec![w; b])
    }

    /// Weighted cross-entropy: `sum_i weights[i] * ce_i`. The per-row weights
    /// let strategies reweigh duplicated rows without changing the batch the
    /// normalization statistics see.
    pub fn softmax_ce_weighted(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || labels.len() != shape[0] || weights.len() != shape[0] {
            return Err(Error::DimensionMismatch {
                op: "softmax_ce (logits vs labels/weights)",
                lhs: shape,
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if b == 0 {
            return Err(Error::EmptyBatch("softmax_ce_loss"));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: c,
                    index: i,
                });
            }
        }
        let lv = self.value(logits).values();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            let lse = m + z.ln();
            loss += weights[i] * (lse - row[labels[i]]);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared difference over all entries against a constant target.
    pub fn logit_mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let ps = self.value(pred).shape();
        if ps != target.shape() {
            return Err(Error::DimensionMismatch {
                op: "logit_mse_loss",
                lhs: ps.to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = target.len().max(1);
        let loss = self
            .value(pred)
            .values()
            .iter()
            .zip(target.values())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Mean binary cross-entropy on logits, numerically stabilized:
    /// `mean( max(z,0) - z*t + ln(1 + e^{-|z|}) )`.
    pub fn sigmoid_bce_loss(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let ls = self.value(logits).shape();
        if ls != targets.shape() {
            return Err(Error::DimensionMismatch {
                op: "sigmoid_bce_loss",
                lhs: ls.to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(&t) = targets.values().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!(
                "sigmoid_bce_loss target {t} outside [0, 1]"
            )));
        }
        let n = targets.len().max(1);
        let loss = self
            .value(logits)
            .values()
            .iter()
            .zip(targets.values())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s: f64 = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean { x })
    }

    /// `sum_i coeff_i * scalar_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, c) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::Contract(
                    "weighted_sum expects scalar terms".into(),
                ));
            }
            acc += c * self.value(v).scalar_value();
        }
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { terms: terms.to_vec() }))
    }

    /// Reverse pass from a scalar loss. Parameter gradients accumulate into
    /// `params`; calling twice without zeroing doubles them.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => params.accumulate_grad(*id, &grad),
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (batch, d_in) = (xs[0], xs[1]);
                    let d_out = self.value(*w).shape()[1];
                    let xv = self.value(*x).values();
                    let wv = self.value(*w).values();
                    {
                        let gx = Self::slot(&mut grads, *x, batch * d_in);
                        for i in 0..batch {
                            for d in 0..d_in {
                                let mut acc = 0.0;
                                for o in 0..d_out {
                                    acc += grad[i * d_out + o] * wv[d * d_out + o];
                                }
                                gx[i * d_in + d] += acc;
                            }
                        }
                    }
                    {
                        let gw = Self::slot(&mut grads, *w, d_in * d_out);
                        for i in 0..batch {
                            for d in 0..d_in {
                                let xd = xv[i * d_in + d];
                                for o in 0..d_out {
                                    gw[d * d_out + o] += xd * grad[i * d_out + o];
                                }
                            }
                        }
                    }
                    {
                        let gb = Self::slot(&mut grads, *b, d_out);
                        for i in 0..batch {
                            for o in 0..d_out {
                                gb[o] += grad[i * d_out + o];
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).values();
                    let gx = Self::slot(&mut grads, *x, xv.len());
                    for (i, (&v, &g)) in xv.iter().zip(&grad).enumerate() {
                        if v > 0.0 {
                            gx[i] += g;
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let c = inv_std.len();
                    let b = xhat.len() / c;
                    let sv = self.value(*scale).values();
                    {
                        let gshift = Self::slot(&mut grads, *shift, c);
                        for i in 0..b {
                            for j in 0..c {
                                gshift[j] += grad[i * c + j];
                            }
                        }
                    }
                    {
                        let gscale = Self::slot(&mut grads, *scale, c);
                        for i in 0..b {
                            for j in 0..c {
                                gscale[j] += grad[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    if *batch_stats {
                        // Batch moments depend on x: backpropagate through the
                        // standardization itself.
                        let mut sum_dy = vec![0.0; c];
                        let mut sum_dy_xhat = vec![0.0; c];
                        for i in 0..b {
                            for j in 0..c {
                                sum_dy[j] += grad[i * c + j];
                                sum_dy_xhat[j] += grad[i * c + j] * xhat[i * c + j];
                            }
                        }
                        let inv_b = 1.0 / b as f64;
                        let gx = Self::slot(&mut grads, *x, b * c);
                        for i in 0..b {
                            for j in 0..c {
                                let centered = grad[i * c + j]
                                    - inv_b * sum_dy[j]
                                    - xhat[i * c + j] * inv_b * sum_dy_xhat[j];
                                gx[i * c + j] += sv[j] * inv_std[j] * centered;
                            }
                        }
                    } else {
                        // Running moments are constants.
                        let gx = Self::slot(&mut grads, *x, b * c);
                        for i in 0..b {
                            for j in 0..c {
                                gx[i * c + j] += grad[i * c + j] * sv[j] * inv_std[j];
                            }
                        }
                    }
                }
                Op::GatherCols { x, cols } => {
                    let xs = self.value(*x).shape();
                    let (b, full) = (xs[0], xs[1]);
                    let gx = Self::slot(&mut grads, *x, b * full);
                    for i in 0..b {
                        for (j, &c) in cols.iter().enumerate() {
                            gx[i * full + c] += grad[i * cols.len() + j];
                        }
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let b = labels.len();
                    let g = grad[0];
                    let gl = Self::slot(&mut grads, *logits, b * c);
                    for i in 0..b {
                        let wi = weights[i] * g;
                        for j in 0..c {
                            let ind = if j == labels[i] { 1.0 } else { 0.0 };
                            gl[i * c + j] += wi * (probs[i * c + j] - ind);
                        }
                    }
                }
                Op::MseLoss { pred, target } => {
                    let n = target.len().max(1) as f64;
                    let g = grad[0];
                    let pv = self.value(*pred).values();
                    let gp = Self::slot(&mut grads, *pred, pv.len());
                    for (i, (&p, &t)) in pv.iter().zip(target.values()).enumerate() {
                        gp[i] += g * 2.0 * (p - t) / n;
                    }
                }
                Op::SigmoidBce { logits, targets } => {
                    let n = targets.len().max(1) as f64;
                    let g = grad[0];
                    let lv = self.value(*logits).values();
                    let gl = Self::slot(&mut grads, *logits, lv.len());
                    for (i, (&z, &t)) in lv.iter().zip(targets.values()).enumerate() {
                        let sig = 1.0 / (1.0 + (-z).exp());
                        gl[i] += g * (sig - t) / n;
                    }
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    let g = grad[0];
                    let gx = Self::slot(&mut grads, *x, n);
                    gx.iter_mut().for_each(|v| *v += g);
                }
                Op::Mean { x } => {
                    let n = self.value(*x).len();
                    let g = grad[0] / n.max(1) as f64;
                    let gx = Self::slot(&mut grads, *x, n);
                    gx.iter_mut().for_each(|v| *v += g);
                }
                Op::WeightedSum { terms } => {
                    let g = grad[0];
                    for &(v, c) in terms {
                        let gv = Self::slot(&mut grads, v, 1);
                        gv[0] += c * g;
                    }
                }
            }
        }
        Ok(())
    }

    fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}
