//! The trainable backbone: a multilayer perceptron with a BN layer after
//! each hidden linear and a fixed-size classification head spanning every
//! class of the stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::normalization::{bn_forward, bn_forward_values, BatchNormState, NormMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// One hidden block: linear map, batch normalization, ReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenBlock {
    pub linear: LinearLayer,
    pub norm: BatchNormState,
}

/// MLP whose head output dimension equals the total class count of the
/// stream and never changes during a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub input_dim: usize,
    pub num_classes: usize,
    pub blocks: Vec<HiddenBlock>,
    pub head: LinearLayer,
    pub params: ParamSet,
}

fn init_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    out_dim: usize,
) -> LinearLayer {
    // Uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let w: Vec<f64> = (0..in_dim * out_dim)
        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
        .collect();
    let weight = params.register(Tensor::new(vec![in_dim, out_dim], w).expect("sized"));
    let bias = params.register(Tensor::zeros(vec![out_dim]));
    LinearLayer {
        weight,
        bias,
        in_dim,
        out_dim,
    }
}

impl MlpModel {
    pub fn new(input_dim: usize, hidden_dims: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(hidden_dims.len());
        let mut dim = input_dim;
        for &h in hidden_dims {
            let linear = init_linear(&mut params, &mut rng, dim, h);
            let scale = params.register(Tensor::new(vec![h], vec![1.0; h]).expect("sized"));
            let shift = params.register(Tensor::zeros(vec![h]));
            blocks.push(HiddenBlock {
                linear,
                norm: BatchNormState::new(h, scale, shift),
            });
            dim = h;
        }
        let head = init_linear(&mut params, &mut rng, dim, num_classes);
        MlpModel {
            input_dim,
            num_classes,
            blocks,
            head,
            params,
        }
    }

    /// Width of the penultimate representation (input to the head).
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.input_dim, |b| b.linear.out_dim)
    }

    /// Recorded forward pass. Returns the penultimate activations and the
    /// head logits as graph vars; `mode` applies to every BN layer.
    pub fn forward_graph(
        &mut self,
        graph: &mut Graph,
        x: Var,
        mode: NormMode,
    ) -> Result<(Var, Var)> {
        let mut h = x;
        for block in &mut self.blocks {
            let w = graph.param(&self.params, block.linear.weight);
            let b = graph.param(&self.params, block.linear.bias);
            h = graph.linear(h, w, b)?;
            h = bn_forward(graph, h, &mut block.norm, &self.params, mode)?;
            h = graph.relu(h);
        }
        let w = graph.param(&self.params, self.head.weight);
        let b = graph.param(&self.params, self.head.bias);
        let logits = graph.linear(h, w, b)?;
        Ok((h, logits))
    }

    /// Forward pass on plain values, no gradient recording. Returns
    /// `(penultimate, logits)`.
    pub fn forward_values(&mut self, x: &Tensor, mode: NormMode) -> Result<(Tensor, Tensor)> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                op: "forward (input)",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = linear_values(&h, &self.params, &block.linear);
            let scale = self.params.get(block.norm.bn_scale).values.clone();
            let shift = self.params.get(block.norm.bn_shift).values.clone();
            h = bn_forward_values(&h, &mut block.norm, &scale, &shift, mode)?;
            h.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let logits = linear_values(&h, &self.params, &self.head);
        Ok((h, logits))
    }

    /// Inference forward: running statistics, EMA untouched, per-sample
    /// deterministic. Immutable because nothing in the model may change.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        // Running-frozen mode never writes; clone-free walk duplicated here
        // to keep the signature honest.
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                op: "infer (input)",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let mut h = x.clone();
        for block in &self.blocks {
            h = linear_values(&h, &self.params, &block.linear);
            let scale = &self.params.get(block.norm.bn_scale).values;
            let shift = &self.params.get(block.norm.bn_shift).values;
            h = crate::normalization::bn_apply(
                &h,
                scale,
                shift,
                &block.norm.running_mean,
                &block.norm.running_var,
                block.norm.eps,
            );
            h.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let logits = linear_values(&h, &self.params, &self.head);
        Ok((h, logits))
    }

    /// Snapshot of every BN layer's running statistics, in layer order.
    pub fn bn_snapshot(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.blocks
            .iter()
            .map(|b| (b.norm.running_mean.clone(), b.norm.running_var.clone()))
            .collect()
    }

    pub fn bn_restore(&mut self, snapshot: &[(Vec<f64>, Vec<f64>)]) {
        assert_eq!(snapshot.len(), self.blocks.len());
        for (block, (mean, var)) in self.blocks.iter_mut().zip(snapshot) {
            block.norm.running_mean.clone_from(mean);
            block.norm.running_var.clone_from(var);
        }
    }

    /// Bit-exact equality of running statistics against a snapshot.
    pub fn bn_bits_eq(&self, snapshot: &[(Vec<f64>, Vec<f64>)]) -> bool {
        self.blocks.len() == snapshot.len()
            && self.blocks.iter().zip(snapshot).all(|(b, (m, v))| {
                bits_eq(&b.norm.running_mean, m) && bits_eq(&b.norm.running_var, v)
            })
    }

    /// Bit-exact equality of all trainable parameter values.
    pub fn params_bits_eq(&self, other: &MlpModel) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((_, a), (_, b))| bits_eq(&a.values, &b.values))
    }
}

pub(crate) fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn linear_values(x: &Tensor, params: &ParamSet, layer: &LinearLayer) -> Tensor {
    let b = x.rows();
    let d_out = layer.out_dim;
    let wv = &params.get(layer.weight).values;
    let bv = &params.get(layer.bias).values;
    let mut out = vec![0.0; b * d_out];
    for i in 0..b {
        let row = x.row(i);
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        orow.copy_from_slice(bv);
        for (d, &xd) in row.iter().enumerate() {
            let wrow = &wv[d * d_out..(d + 1) * d_out];
            for (o, &wo) in wrow.iter().enumerate() {
                orow[o] += xd * wo;
            }
        }
    }
    Tensor::new(vec![b, d_out], out).expect("sized above")
}
