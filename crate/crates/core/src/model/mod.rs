//! The learnable inverse-dynamics error model.
//!
//! One PReLU multilayer perceptron per joint maps the standardized input
//! `(q, qd, qdd)` to that joint's torque correction. Training is shuffled
//! minibatch Adam on mean squared error; iteration `k` warm-starts from the
//! parameters of iteration `k-1`. The untrained model (`k = 0`) predicts
//! exactly zero by contract.
//!
//! Inputs and targets are standardized with statistics of the dataset being
//! trained on; predictions use the statistics frozen at training time and are
//! clamped to the configured torque bound.

mod net;
mod optim;

pub use net::{Dense, JointNet};
pub use optim::TrainParams;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::{Dataset, InputPoint};
use crate::math;
use crate::rng::Rng;

use net::{backward_batch, forward_batch, BatchWork, Grads};
use optim::AdamState;

/// Chunk size for full-dataset passes (loss evaluation, gradient checks).
const EVAL_CHUNK: usize = 256;

/// Network architecture: hidden widths (a final width-1 output layer is
/// implied) and the initial PReLU slope.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub alpha_init: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            hidden: vec![200, 100, 50, 20],
            alpha_init: 0.25,
        }
    }
}

/// Per-dimension mean/scale standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fit robust location/scale from row-major data (`n` rows of `dim`
    /// columns): median and 1.4826 * MAD per dimension. Finite differencing
    /// puts extremely heavy-tailed noise on the acceleration column of
    /// indirect data; moment-based statistics would let that column's scale
    /// swamp the clean desired-acceleration samples sharing the dataset.
    /// Dimensions with (near) zero spread keep scale 1 so standardization
    /// stays invertible.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        assert!(dim > 0 && !rows.is_empty() && rows.len() % dim == 0);
        let n = rows.len() / dim;
        let mut column = vec![0.0; n];
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for d in 0..dim {
            for (i, slot) in column.iter_mut().enumerate() {
                *slot = rows[i * dim + d];
            }
            let med = median_in_place(&mut column);
            mean[d] = med;
            for slot in column.iter_mut() {
                *slot = math::abs(*slot - med);
            }
            let mad = median_in_place(&mut column);
            let s = 1.4826 * mad;
            if s > 1e-12 {
                scale[d] = s;
            }
        }
        Standardizer { mean, scale }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.scale[i];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(zi, (m, s))| zi * s + m)
            .collect()
    }
}

fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Standardization statistics frozen into a trained model: input stats plus
/// per-joint target mean/scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub input: Standardizer,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

/// Model construction/validation error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    InvalidShape(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidShape(what) => write!(f, "invalid model shape: {what}"),
        }
    }
}

/// Per-joint error model with frozen normalization and output clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorModel {
    dim: usize,
    spec: MlpSpec,
    output_clamp: f64,
    iteration: u32,
    nets: Vec<JointNet>,
    norm: Option<NormStats>,
}

impl ErrorModel {
    /// The `k = 0` model: no networks, predicts exactly zero.
    pub fn initial(dim: usize, spec: MlpSpec, output_clamp: f64) -> Self {
        assert!(dim > 0, "need at least one joint");
        assert!(output_clamp > 0.0, "output clamp must be > 0");
        assert!(spec.hidden.iter().all(|w| *w > 0), "widths must be positive");
        ErrorModel {
            dim,
            spec,
            output_clamp,
            iteration: 0,
            nets: Vec::new(),
            norm: None,
        }
    }

    /// Rebuild a model from checkpointed parts.
    pub fn from_parts(
        dim: usize,
        spec: MlpSpec,
        output_clamp: f64,
        iteration: u32,
        nets: Vec<JointNet>,
        norm: Option<NormStats>,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidShape("zero joints"));
        }
        if !nets.is_empty() {
            if nets.len() != dim {
                return Err(ModelError::InvalidShape("one net per joint required"));
            }
            let norm = norm
                .as_ref()
                .ok_or(ModelError::InvalidShape("trained model needs norm stats"))?;
            if norm.input.mean.len() != 3 * dim || norm.input.scale.len() != 3 * dim {
                return Err(ModelError::InvalidShape("input stats must cover 3*dim"));
            }
            if norm.y_mean.len() != dim || norm.y_scale.len() != dim {
                return Err(ModelError::InvalidShape("target stats must cover dim"));
            }
            for net in &nets {
                if net.input_dim() != 3 * dim {
                    return Err(ModelError::InvalidShape("net input must be 3*dim"));
                }
                let mut prev = net.input_dim();
                for layer in &net.layers {
                    if layer.in_dim != prev
                        || layer.w.len() != layer.in_dim * layer.out_dim
                        || layer.b.len() != layer.out_dim
                    {
                        return Err(ModelError::InvalidShape("inconsistent layer"));
                    }
                    prev = layer.out_dim;
                }
                if prev != 1 {
                    return Err(ModelError::InvalidShape("output width must be 1"));
                }
            }
        } else if iteration != 0 {
            return Err(ModelError::InvalidShape("trained model without nets"));
        }
        Ok(ErrorModel {
            dim,
            spec,
            output_clamp,
            iteration,
            nets,
            norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn output_clamp(&self) -> f64 {
        self.output_clamp
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn nets(&self) -> &[JointNet] {
        &self.nets
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    /// True while no training has happened (`k = 0`).
    pub fn is_untrained(&self) -> bool {
        self.nets.is_empty()
    }

    /// Predicted torque correction, clamped componentwise.
    ///
    /// The untrained model returns exact zeros without evaluating anything.
    pub fn predict(&self, x: &InputPoint) -> Vec<f64> {
        assert_eq!(x.dim(), self.dim, "input dimension mismatch");
        if self.nets.is_empty() {
            return vec![0.0; self.dim];
        }
        let norm = self.norm.as_ref().expect("trained model has norm stats");
        let features = x.features();
        let standardized = norm.input.apply(&features);
        let mut out = Vec::with_capacity(self.dim);
        for (j, net) in self.nets.iter().enumerate() {
            let raw = net.forward_single(&standardized);
            out.push(norm.y_mean[j] + norm.y_scale[j] * raw);
        }
        math::clamp_to(&mut out, self.output_clamp);
        out
    }
}

/// Outcome of one training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    /// Set when the dataset was empty and the model was returned unchanged.
    pub skipped_empty: bool,
    /// Full-dataset loss of the (warm-started) model before the first step.
    pub loss_before: Option<f64>,
    /// Full-dataset loss after the last epoch.
    pub loss_after: Option<f64>,
}

/// Mean squared residual of the model over a dataset, averaged over samples
/// and joints. `None` on an empty dataset.
pub fn mse_loss(model: &ErrorModel, data: &Dataset) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for sample in &data.samples {
        let pred = model.predict(&sample.x);
        for (p, y) in pred.iter().zip(&sample.y) {
            let r = p - y;
            total += r * r;
        }
    }
    Some(total / (data.len() * model.dim) as f64)
}

/// Train the model on a dataset for a number of epochs.
///
/// Parameters warm-start from the incoming model (fresh He init when the
/// incoming model is untrained); normalization statistics are recomputed from
/// this dataset; the iteration counter advances. An empty dataset is refused:
/// the incoming model is returned unchanged with `skipped_empty` set.
pub fn train(
    model: &ErrorModel,
    data: &Dataset,
    epochs: usize,
    rng: &mut Rng,
    params: &TrainParams,
) -> (ErrorModel, TrainReport) {
    if data.is_empty() {
        return (
            model.clone(),
            TrainReport {
                skipped_empty: true,
                loss_before: None,
                loss_after: None,
            },
        );
    }
    let dim = model.dim;
    let in_dim = 3 * dim;
    let n = data.len();

    let mut features = Vec::with_capacity(n * in_dim);
    for sample in &data.samples {
        assert_eq!(sample.x.dim(), dim, "sample dimension mismatch");
        features.extend_from_slice(&sample.x.features());
    }
    let input_stats = Standardizer::fit(&features, in_dim);
    let mut x_std = vec![0.0; n * in_dim];
    for (row_in, row_out) in features
        .chunks_exact(in_dim)
        .zip(x_std.chunks_exact_mut(in_dim))
    {
        input_stats.apply_into(row_in, row_out);
    }

    let mut y_raw = vec![0.0; n * dim];
    for (s, sample) in data.samples.iter().enumerate() {
        for j in 0..dim {
            y_raw[s * dim + j] = sample.y[j];
        }
    }
    let y_stats = Standardizer::fit(&y_raw, dim);

    let mut nets = if model.nets.is_empty() {
        Vec::new()
    } else {
        model.nets.clone()
    };

    let norm = NormStats {
        input: input_stats,
        y_mean: y_stats.mean.clone(),
        y_scale: y_stats.scale.clone(),
    };

    // per-joint substreams so joint training order cannot leak randomness
    let stream_base = rng.next_u64();
    if nets.is_empty() {
        for j in 0..dim {
            let mut init_rng = Rng::stream(stream_base, j as u64, 0);
            nets.push(JointNet::init(
                in_dim,
                &model.spec.hidden,
                model.spec.alpha_init,
                &mut init_rng,
            ));
        }
    }

    let mut out = ErrorModel {
        dim,
        spec: model.spec.clone(),
        output_clamp: model.output_clamp,
        iteration: model.iteration + 1,
        nets,
        norm: Some(norm.clone()),
    };
    let loss_before = Some(dataset_loss(&out, &x_std, &y_raw, n));

    let batch = params.batch_size.max(1).min(n);
    for (j, net) in out.nets.iter_mut().enumerate() {
        let mut epoch_rng = Rng::stream(stream_base, j as u64, 1);
        let y_std: Vec<f64> = (0..n)
            .map(|s| (y_raw[s * dim + j] - norm.y_mean[j]) / norm.y_scale[j])
            .collect();

        let mut adam = AdamState::new(net);
        let mut grads = Grads::new(net);
        let mut work = BatchWork::new(net, batch);
        let mut indices: Vec<usize> = (0..n).collect();
        let mut x_batch = vec![0.0; batch * in_dim];
        let mut y_batch = vec![0.0; batch];
        let mut d_out = vec![0.0; batch];

        for _ in 0..epochs {
            epoch_rng.shuffle(&mut indices);
            for chunk in indices.chunks(batch) {
                let b = chunk.len();
                for (row, &s) in chunk.iter().enumerate() {
                    x_batch[row * in_dim..(row + 1) * in_dim]
                        .copy_from_slice(&x_std[s * in_dim..(s + 1) * in_dim]);
                    y_batch[row] = y_std[s];
                }
                let pred = forward_batch(net, &x_batch[..b * in_dim], b, &mut work);
                for row in 0..b {
                    d_out[row] = 2.0 * (pred[row] - y_batch[row]) / b as f64;
                }
                backward_batch(net, &x_batch[..b * in_dim], b, &d_out[..b], &mut work, &mut grads);
                adam.step(net, &grads, params.learn_rate);
                work.sync_weights(net);
            }
        }
    }

    let loss_after = Some(dataset_loss(&out, &x_std, &y_raw, n));
    (
        out,
        TrainReport {
            skipped_empty: false,
            loss_before,
            loss_after,
        },
    )
}

/// Full-dataset clamped-prediction loss over pre-standardized inputs, using
/// the batched forward path. Matches [`mse_loss`] on the same data.
fn dataset_loss(model: &ErrorModel, x_std: &[f64], y_raw: &[f64], n: usize) -> f64 {
    let dim = model.dim;
    let in_dim = 3 * dim;
    let norm = model.norm.as_ref().expect("trained model");
    let chunk = EVAL_CHUNK.min(n);
    let mut total = 0.0;
    for (j, net) in model.nets.iter().enumerate() {
        let mut work = BatchWork::new(net, chunk);
        let mut offset = 0;
        while offset < n {
            let b = chunk.min(n - offset);
            let out = forward_batch(
                net,
                &x_std[offset * in_dim..(offset + b) * in_dim],
                b,
                &mut work,
            );
            for (row, raw) in out.iter().enumerate() {
                let mut pred = norm.y_mean[j] + norm.y_scale[j] * raw;
                if pred > model.output_clamp {
                    pred = model.output_clamp;
                } else if pred < -model.output_clamp {
                    pred = -model.output_clamp;
                }
                let r = pred - y_raw[(offset + row) * dim + j];
                total = math::mul_add(r, r, total);
            }
            offset += b;
        }
    }
    total / (n * dim) as f64
}

/// Result of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Verify backpropagation against central finite differences on `n_params`
/// randomly chosen parameters (weights, biases and PReLU slopes), using the
/// per-joint full-batch loss on this dataset. The model must be trained
/// (`k >= 1`) so networks and normalization exist.
pub fn gradient_check(
    model: &ErrorModel,
    data: &Dataset,
    n_params: usize,
    rng: &mut Rng,
) -> GradientCheck {
    assert!(!model.nets.is_empty(), "gradient check needs a trained model");
    assert!(!data.is_empty(), "gradient check needs data");
    let dim = model.dim;
    let in_dim = 3 * dim;
    let n = data.len();
    let norm = model.norm.as_ref().unwrap();

    let mut x_std = vec![0.0; n * in_dim];
    for (s, sample) in data.samples.iter().enumerate() {
        let f = sample.x.features();
        norm.input
            .apply_into(&f, &mut x_std[s * in_dim..(s + 1) * in_dim]);
    }

    let per_joint_targets: Vec<Vec<f64>> = (0..dim)
        .map(|j| {
            data.samples
                .iter()
                .map(|s| (s.y[j] - norm.y_mean[j]) / norm.y_scale[j])
                .collect()
        })
        .collect();

    let full_loss = |net: &JointNet, y: &[f64]| -> f64 {
        let mut work = BatchWork::new(net, EVAL_CHUNK.min(n));
        let mut total = 0.0;
        let mut offset = 0;
        while offset < n {
            let b = EVAL_CHUNK.min(n - offset);
            let out = forward_batch(
                net,
                &x_std[offset * in_dim..(offset + b) * in_dim],
                b,
                &mut work,
            );
            for (p, t) in out.iter().zip(&y[offset..offset + b]) {
                let r = p - t;
                total += r * r;
            }
            offset += b;
        }
        total / n as f64
    };

    // analytic full-batch gradients per joint, computed once on demand
    let mut cached: Vec<Option<Grads>> = (0..dim).map(|_| None).collect();
    let mut max_rel = 0.0f64;

    for _ in 0..n_params {
        let j = rng.below(dim);
        let net = &model.nets[j];
        if cached[j].is_none() {
            let mut grads = Grads::new(net);
            let mut accum = Grads::new(net);
            let mut work = BatchWork::new(net, EVAL_CHUNK.min(n));
            let y = &per_joint_targets[j];
            let mut offset = 0;
            while offset < n {
                let b = EVAL_CHUNK.min(n - offset);
                let xs = &x_std[offset * in_dim..(offset + b) * in_dim];
                let out = forward_batch(net, xs, b, &mut work).to_vec();
                let d_out: Vec<f64> = out
                    .iter()
                    .zip(&y[offset..offset + b])
                    .map(|(p, t)| 2.0 * (p - t) / n as f64)
                    .collect();
                backward_batch(net, xs, b, &d_out, &mut work, &mut grads);
                for l in 0..net.layers.len() {
                    for (a, g) in accum.gw[l].iter_mut().zip(&grads.gw[l]) {
                        *a += g;
                    }
                    for (a, g) in accum.gb[l].iter_mut().zip(&grads.gb[l]) {
                        *a += g;
                    }
                    accum.galpha[l] += grads.galpha[l];
                }
                offset += b;
            }
            cached[j] = Some(accum);
        }
        let grads = cached[j].as_ref().unwrap();

        let l = rng.below(net.layers.len());
        // 0 => weight, 1 => bias, 2 => alpha (hidden layers only)
        let kind = rng.below(if l + 1 < net.layers.len() { 3 } else { 2 });
        let idx = match kind {
            0 => rng.below(net.layers[l].w.len()),
            1 => rng.below(net.layers[l].b.len()),
            _ => 0,
        };
        let (current, analytic) = match kind {
            0 => (net.layers[l].w[idx], grads.gw[l][idx]),
            1 => (net.layers[l].b[idx], grads.gb[l][idx]),
            _ => (net.layers[l].alpha, grads.galpha[l]),
        };

        let mut probe = net.clone();
        let set = |nt: &mut JointNet, v: f64| match kind {
            0 => nt.layers[l].w[idx] = v,
            1 => nt.layers[l].b[idx] = v,
            _ => nt.layers[l].alpha = v,
        };
        let h = 1e-6 * math::abs(current).max(1.0);
        set(&mut probe, current + h);
        let up = full_loss(&probe, &per_joint_targets[j]);
        set(&mut probe, current - h);
        let down = full_loss(&probe, &per_joint_targets[j]);
        let numeric = (up - down) / (2.0 * h);

        let rel = math::abs(analytic - numeric)
            / math::abs(analytic).max(math::abs(numeric)).max(1e-10);
        if rel > max_rel {
            max_rel = rel;
        }
    }

    GradientCheck {
        checked: n_params,
        max_rel_err: max_rel,
    }
}
