//! Adam optimizer over the per-layer parameter tensors.

use alloc::vec;
use alloc::vec::Vec;

use super::net::{Grads, JointNet};
use crate::math;

/// Hyperparameters for one training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub learn_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learn_rate: 1e-3,
            batch_size: 64,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment estimates mirroring a net's parameters.
pub struct AdamState {
    mw: Vec<Vec<f64>>,
    vw: Vec<Vec<f64>>,
    mb: Vec<Vec<f64>>,
    vb: Vec<Vec<f64>>,
    ma: Vec<f64>,
    va: Vec<f64>,
    beta1_t: f64,
    beta2_t: f64,
}

impl AdamState {
    pub fn new(net: &JointNet) -> Self {
        AdamState {
            mw: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            vw: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            mb: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            vb: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            ma: vec![0.0; net.layers.len()],
            va: vec![0.0; net.layers.len()],
            beta1_t: 1.0,
            beta2_t: 1.0,
        }
    }

    /// One update of every parameter from freshly computed gradients.
    pub fn step(&mut self, net: &mut JointNet, grads: &Grads, lr: f64) {
        self.beta1_t *= BETA1;
        self.beta2_t *= BETA2;
        let corr1 = 1.0 - self.beta1_t;
        let corr2 = 1.0 - self.beta2_t;

        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            adam_update(&mut layer.w, &grads.gw[l], &mut self.mw[l], &mut self.vw[l], lr, corr1, corr2);
            adam_update(&mut layer.b, &grads.gb[l], &mut self.mb[l], &mut self.vb[l], lr, corr1, corr2);
            if l < last {
                let g = grads.galpha[l];
                let m = &mut self.ma[l];
                let v = &mut self.va[l];
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                layer.alpha -= lr * (*m / corr1) / (math::sqrt(*v / corr2) + EPS);
            }
        }
    }
}

#[inline]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    corr1: f64,
    corr2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        params[i] -= lr * (m[i] / corr1) / (math::sqrt(v[i] / corr2) + EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn adam_descends_a_quadratic() {
        // single 1x1 linear layer fitting y = 0 from weight 1: loss = w^2
        let mut rng = Rng::from_seed(33);
        let mut net = JointNet::init(1, &[1], 0.25, &mut rng);
        net.layers[0].w[0] = 1.0;
        let mut adam = AdamState::new(&net);
        let mut grads = Grads::new(&net);
        for _ in 0..2000 {
            grads.gw[0][0] = 2.0 * net.layers[0].w[0];
            grads.gb[0][0] = 0.0;
            grads.gw[1][0] = 0.0;
            grads.gb[1][0] = 0.0;
            grads.galpha[0] = 0.0;
            adam.step(&mut net, &grads, 1e-2);
        }
        assert!(net.layers[0].w[0].abs() < 1e-3);
    }
}
