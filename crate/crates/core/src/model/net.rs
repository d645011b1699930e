//! Dense feedforward network with per-layer learnable PReLU slopes.
//!
//! Weights are stored `[in][out]` row-major; the training work buffers also
//! keep an `[out][in]` transposed copy (refreshed after every optimizer step)
//! so the input-gradient pass streams contiguous rows as well.
//!
//! The batched passes dispatch to AVX-512 register-tiled kernels when the
//! build target has them and fall back to portable scalar code otherwise.
//! Both paths use fused multiply-adds and fixed accumulation orders, so
//! results are reproducible run to run on a given build.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::Rng;

/// PReLU: identity on non-negatives, slope `alpha` on negatives.
#[inline(always)]
pub fn prelu(z: f64, alpha: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        alpha * z
    }
}

/// One dense layer. `alpha` is the learnable activation slope applied after
/// this layer (ignored for the output layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[in][out]`: `w[i * out_dim + o]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: f64,
}

impl Dense {
    /// He-style fan-in scaled uniform init, zero bias.
    fn init(in_dim: usize, out_dim: usize, alpha: f64, rng: &mut Rng) -> Self {
        let bound = math::sqrt(6.0 / in_dim as f64);
        let w = (0..in_dim * out_dim)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Dense {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
            alpha,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len() + 1
    }
}

/// Feedforward net for one joint: hidden widths plus a scalar output layer,
/// PReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct JointNet {
    pub layers: Vec<Dense>,
}

impl JointNet {
    pub fn init(input_dim: usize, hidden: &[usize], alpha_init: f64, rng: &mut Rng) -> Self {
        assert!(!hidden.is_empty(), "need at least one hidden layer");
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for width in hidden {
            assert!(*width > 0, "layer widths must be positive");
            layers.push(Dense::init(prev, *width, alpha_init, rng));
            prev = *width;
        }
        layers.push(Dense::init(prev, 1, alpha_init, rng));
        JointNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Forward pass for a single (already standardized) input.
    pub fn forward_single(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let o_dim = layer.out_dim;
            let mut out = layer.b.clone();
            // four input rows per pass so the output row is touched once
            // per quad instead of once per input
            let mut i = 0;
            while i + 4 <= layer.in_dim {
                let (x0, x1, x2, x3) = (cur[i], cur[i + 1], cur[i + 2], cur[i + 3]);
                let w0 = &layer.w[i * o_dim..(i + 1) * o_dim];
                let w1 = &layer.w[(i + 1) * o_dim..(i + 2) * o_dim];
                let w2 = &layer.w[(i + 2) * o_dim..(i + 3) * o_dim];
                let w3 = &layer.w[(i + 3) * o_dim..(i + 4) * o_dim];
                for o in 0..o_dim {
                    let a = math::mul_add(w0[o], x0, out[o]);
                    let b = math::mul_add(w1[o], x1, a);
                    let c = math::mul_add(w2[o], x2, b);
                    out[o] = math::mul_add(w3[o], x3, c);
                }
                i += 4;
            }
            while i < layer.in_dim {
                let xi = cur[i];
                let w_row = &layer.w[i * o_dim..(i + 1) * o_dim];
                for o in 0..o_dim {
                    out[o] = math::mul_add(w_row[o], xi, out[o]);
                }
                i += 1;
            }
            if l < last {
                for z in out.iter_mut() {
                    *z = prelu(*z, layer.alpha);
                }
            }
            cur = out;
        }
        cur[0]
    }
}

/// Scratch buffers for batched passes, sized once per `(net, max_batch)`.
pub struct BatchWork {
    max_batch: usize,
    /// Pre-activations per layer, `batch * out_dim`.
    pre: Vec<Vec<f64>>,
    /// Post-activations per layer (output layer aliases its pre-activation).
    post: Vec<Vec<f64>>,
    /// Gradients w.r.t. pre-activations per layer.
    delta: Vec<Vec<f64>>,
    /// Transposed weights `[out][in]` per layer for the input-gradient pass.
    wt: Vec<Vec<f64>>,
}

impl BatchWork {
    pub fn new(net: &JointNet, max_batch: usize) -> Self {
        let mut work = BatchWork {
            max_batch,
            pre: net
                .layers
                .iter()
                .map(|l| vec![0.0; max_batch * l.out_dim])
                .collect(),
            post: net
                .layers
                .iter()
                .map(|l| vec![0.0; max_batch * l.out_dim])
                .collect(),
            delta: net
                .layers
                .iter()
                .map(|l| vec![0.0; max_batch * l.out_dim])
                .collect(),
            wt: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.w.len()])
                .collect(),
        };
        work.sync_weights(net);
        work
    }

    /// Refresh the transposed weight copies. Must be called after every
    /// parameter update and before the next backward pass.
    pub fn sync_weights(&mut self, net: &JointNet) {
        for (layer, wt) in net.layers.iter().zip(self.wt.iter_mut()) {
            let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
            for i in 0..i_dim {
                for o in 0..o_dim {
                    wt[o * i_dim + i] = layer.w[i * o_dim + o];
                }
            }
        }
    }
}

/// Parameter gradients, overwritten by [`backward_batch`].
pub struct Grads {
    pub gw: Vec<Vec<f64>>,
    pub gb: Vec<Vec<f64>>,
    pub galpha: Vec<f64>,
}

impl Grads {
    pub fn new(net: &JointNet) -> Self {
        Grads {
            gw: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            gb: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            galpha: vec![0.0; net.layers.len()],
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod kernels {
    //! AVX-512 register-tiled matrix kernels.
    //!
    //! Safety: callers guarantee `x: batch*i_dim`, `d: batch*o_dim`,
    //! `w: i_dim*o_dim`, `wt: o_dim*i_dim`, `out/dx` sized to match. Ragged
    //! tile edges use masked loads/stores, so no access leaves the slices.

    #[cfg(target_arch = "x86_64")]
    use core::arch::x86_64::*;

    #[inline(always)]
    fn tail_mask(cnt: usize) -> u8 {
        debug_assert!(cnt >= 1 && cnt <= 8);
        if cnt == 8 {
            0xFF
        } else {
            (1u8 << cnt) - 1
        }
    }

    /// `out[b][o] = bias[o] + sum_i x[b][i] * w[i][o]`
    pub fn matmul_forward(
        x: &[f64],
        batch: usize,
        i_dim: usize,
        o_dim: usize,
        w: &[f64],
        bias: &[f64],
        out: &mut [f64],
    ) {
        debug_assert!(x.len() >= batch * i_dim);
        debug_assert!(w.len() == i_dim * o_dim);
        debug_assert!(out.len() >= batch * o_dim);
        unsafe {
            let xp = x.as_ptr();
            let wp = w.as_ptr();
            let bp = bias.as_ptr();
            let op = out.as_mut_ptr();
            let mut b = 0;
            while b + 8 <= batch {
                let mut o0 = 0;
                while o0 < o_dim {
                    let cnt = (o_dim - o0).min(8);
                    let m = tail_mask(cnt);
                    let mut a0 = _mm512_setzero_pd();
                    let mut a1 = _mm512_setzero_pd();
                    let mut a2 = _mm512_setzero_pd();
                    let mut a3 = _mm512_setzero_pd();
                    let mut a4 = _mm512_setzero_pd();
                    let mut a5 = _mm512_setzero_pd();
                    let mut a6 = _mm512_setzero_pd();
                    let mut a7 = _mm512_setzero_pd();
                    for i in 0..i_dim {
                        let wv = _mm512_maskz_loadu_pd(m, wp.add(i * o_dim + o0));
                        let row = b * i_dim + i;
                        a0 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row)), wv, a0);
                        a1 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + i_dim)), wv, a1);
                        a2 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 2 * i_dim)), wv, a2);
                        a3 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 3 * i_dim)), wv, a3);
                        a4 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 4 * i_dim)), wv, a4);
                        a5 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 5 * i_dim)), wv, a5);
                        a6 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 6 * i_dim)), wv, a6);
                        a7 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 7 * i_dim)), wv, a7);
                    }
                    let bv = _mm512_maskz_loadu_pd(m, bp.add(o0));
                    let base = b * o_dim + o0;
                    _mm512_mask_storeu_pd(op.add(base), m, _mm512_add_pd(a0, bv));
                    _mm512_mask_storeu_pd(op.add(base + o_dim), m, _mm512_add_pd(a1, bv));
                    _mm512_mask_storeu_pd(op.add(base + 2 * o_dim), m, _mm512_add_pd(a2, bv));
                    _mm512_mask_storeu_pd(op.add(base + 3 * o_dim), m, _mm512_add_pd(a3, bv));
                    _mm512_mask_storeu_pd(op.add(base + 4 * o_dim), m, _mm512_add_pd(a4, bv));
                    _mm512_mask_storeu_pd(op.add(base + 5 * o_dim), m, _mm512_add_pd(a5, bv));
                    _mm512_mask_storeu_pd(op.add(base + 6 * o_dim), m, _mm512_add_pd(a6, bv));
                    _mm512_mask_storeu_pd(op.add(base + 7 * o_dim), m, _mm512_add_pd(a7, bv));
                    o0 += 8;
                }
                b += 8;
            }
            while b < batch {
                let mut o0 = 0;
                while o0 < o_dim {
                    let cnt = (o_dim - o0).min(8);
                    let m = tail_mask(cnt);
                    let mut acc = _mm512_setzero_pd();
                    for i in 0..i_dim {
                        let wv = _mm512_maskz_loadu_pd(m, wp.add(i * o_dim + o0));
                        acc = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(b * i_dim + i)), wv, acc);
                    }
                    let bv = _mm512_maskz_loadu_pd(m, bp.add(o0));
                    _mm512_mask_storeu_pd(op.add(b * o_dim + o0), m, _mm512_add_pd(acc, bv));
                    o0 += 8;
                }
                b += 1;
            }
        }
    }

    /// `gw[i][o] += sum_b x[b][i] * d[b][o]` (gw pre-zeroed by the caller)
    pub fn grad_weights(
        x: &[f64],
        d: &[f64],
        batch: usize,
        i_dim: usize,
        o_dim: usize,
        gw: &mut [f64],
    ) {
        debug_assert!(x.len() >= batch * i_dim);
        debug_assert!(d.len() >= batch * o_dim);
        debug_assert!(gw.len() == i_dim * o_dim);
        unsafe {
            let xp = x.as_ptr();
            let dp = d.as_ptr();
            let gp = gw.as_mut_ptr();
            let i_full = i_dim / 8 * 8;
            let mut i0 = 0;
            while i0 < i_full {
                let mut o0 = 0;
                while o0 < o_dim {
                    let cnt = (o_dim - o0).min(8);
                    let m = tail_mask(cnt);
                    let mut a0 = _mm512_setzero_pd();
                    let mut a1 = _mm512_setzero_pd();
                    let mut a2 = _mm512_setzero_pd();
                    let mut a3 = _mm512_setzero_pd();
                    let mut a4 = _mm512_setzero_pd();
                    let mut a5 = _mm512_setzero_pd();
                    let mut a6 = _mm512_setzero_pd();
                    let mut a7 = _mm512_setzero_pd();
                    for b in 0..batch {
                        let dv = _mm512_maskz_loadu_pd(m, dp.add(b * o_dim + o0));
                        let row = b * i_dim + i0;
                        a0 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row)), dv, a0);
                        a1 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 1)), dv, a1);
                        a2 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 2)), dv, a2);
                        a3 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 3)), dv, a3);
                        a4 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 4)), dv, a4);
                        a5 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 5)), dv, a5);
                        a6 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 6)), dv, a6);
                        a7 = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(row + 7)), dv, a7);
                    }
                    let accs = [a0, a1, a2, a3, a4, a5, a6, a7];
                    for (r, acc) in accs.into_iter().enumerate() {
                        let row = gp.add((i0 + r) * o_dim + o0);
                        let cur = _mm512_maskz_loadu_pd(m, row);
                        _mm512_mask_storeu_pd(row, m, _mm512_add_pd(cur, acc));
                    }
                    o0 += 8;
                }
                i0 += 8;
            }
            for i in i_full..i_dim {
                let mut o0 = 0;
                while o0 < o_dim {
                    let cnt = (o_dim - o0).min(8);
                    let m = tail_mask(cnt);
                    let mut acc = _mm512_setzero_pd();
                    for b in 0..batch {
                        let dv = _mm512_maskz_loadu_pd(m, dp.add(b * o_dim + o0));
                        acc = _mm512_fmadd_pd(_mm512_set1_pd(*xp.add(b * i_dim + i)), dv, acc);
                    }
                    let row = gp.add(i * o_dim + o0);
                    let cur = _mm512_maskz_loadu_pd(m, row);
                    _mm512_mask_storeu_pd(row, m, _mm512_add_pd(cur, acc));
                    o0 += 8;
                }
            }
        }
    }

    /// `dx[b][i] = sum_o d[b][o] * wt[o][i]` with transposed weights
    pub fn grad_input(
        d: &[f64],
        wt: &[f64],
        batch: usize,
        i_dim: usize,
        o_dim: usize,
        dx: &mut [f64],
    ) {
        debug_assert!(d.len() >= batch * o_dim);
        debug_assert!(wt.len() == i_dim * o_dim);
        debug_assert!(dx.len() >= batch * i_dim);
        unsafe {
            let dp = d.as_ptr();
            let wp = wt.as_ptr();
            let xp = dx.as_mut_ptr();
            let mut b = 0;
            while b + 4 <= batch {
                let mut i0 = 0;
                while i0 < i_dim {
                    let cnt = (i_dim - i0).min(8);
                    let m = tail_mask(cnt);
                    let mut a0 = _mm512_setzero_pd();
                    let mut a1 = _mm512_setzero_pd();
                    let mut a2 = _mm512_setzero_pd();
                    let mut a3 = _mm512_setzero_pd();
                    for o in 0..o_dim {
                        let wv = _mm512_maskz_loadu_pd(m, wp.add(o * i_dim + i0));
                        let col = b * o_dim + o;
                        a0 = _mm512_fmadd_pd(_mm512_set1_pd(*dp.add(col)), wv, a0);
                        a1 = _mm512_fmadd_pd(_mm512_set1_pd(*dp.add(col + o_dim)), wv, a1);
                        a2 = _mm512_fmadd_pd(_mm512_set1_pd(*dp.add(col + 2 * o_dim)), wv, a2);
                        a3 = _mm512_fmadd_pd(_mm512_set1_pd(*dp.add(col + 3 * o_dim)), wv, a3);
                    }
                    let base = b * i_dim + i0;
                    _mm512_mask_storeu_pd(xp.add(base), m, a0);
                    _mm512_mask_storeu_pd(xp.add(base + i_dim), m, a1);
                    _mm512_mask_storeu_pd(xp.add(base + 2 * i_dim), m, a2);
                    _mm512_mask_storeu_pd(xp.add(base + 3 * i_dim), m, a3);
                    i0 += 8;
                }
                b += 4;
            }
            while b < batch {
                let mut i0 = 0;
                while i0 < i_dim {
                    let cnt = (i_dim - i0).min(8);
                    let m = tail_mask(cnt);
                    let mut acc = _mm512_setzero_pd();
                    for o in 0..o_dim {
                        let wv = _mm512_maskz_loadu_pd(m, wp.add(o * i_dim + i0));
                        acc = _mm512_fmadd_pd(_mm512_set1_pd(*dp.add(b * o_dim + o)), wv, acc);
                    }
                    _mm512_mask_storeu_pd(xp.add(b * i_dim + i0), m, acc);
                    i0 += 8;
                }
                b += 1;
            }
        }
    }
}

/// `out[b][o] = bias[o] + sum_i in[b][i] * w[i][o]` for a batch.
fn linear_forward(input: &[f64], batch: usize, layer: &Dense, out: &mut [f64]) {
    let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    {
        kernels::matmul_forward(input, batch, i_dim, o_dim, &layer.w, &layer.b, out);
        return;
    }
    #[allow(unreachable_code)]
    {
        let mut b = 0;
        while b + 4 <= batch {
            let x = &input[b * i_dim..(b + 4) * i_dim];
            let block = &mut out[b * o_dim..(b + 4) * o_dim];
            let (r0, rest) = block.split_at_mut(o_dim);
            let (r1, rest) = rest.split_at_mut(o_dim);
            let (r2, r3) = rest.split_at_mut(o_dim);
            r0.copy_from_slice(&layer.b);
            r1.copy_from_slice(&layer.b);
            r2.copy_from_slice(&layer.b);
            r3.copy_from_slice(&layer.b);
            for i in 0..i_dim {
                let w_row = &layer.w[i * o_dim..(i + 1) * o_dim];
                let x0 = x[i];
                let x1 = x[i_dim + i];
                let x2 = x[2 * i_dim + i];
                let x3 = x[3 * i_dim + i];
                for o in 0..o_dim {
                    let w = w_row[o];
                    r0[o] = math::mul_add(w, x0, r0[o]);
                    r1[o] = math::mul_add(w, x1, r1[o]);
                    r2[o] = math::mul_add(w, x2, r2[o]);
                    r3[o] = math::mul_add(w, x3, r3[o]);
                }
            }
            b += 4;
        }
        while b < batch {
            let x_row = &input[b * i_dim..(b + 1) * i_dim];
            let out_row = &mut out[b * o_dim..(b + 1) * o_dim];
            out_row.copy_from_slice(&layer.b);
            for (i, xi) in x_row.iter().enumerate() {
                let w_row = &layer.w[i * o_dim..(i + 1) * o_dim];
                for (acc, wo) in out_row.iter_mut().zip(w_row) {
                    *acc = math::mul_add(*wo, *xi, *acc);
                }
            }
            b += 1;
        }
    }
}

/// Batched forward pass over standardized inputs (`batch * input_dim`).
/// Returns the output column (`batch` scalars) in `work.post[last]`.
pub fn forward_batch<'w>(
    net: &JointNet,
    input: &[f64],
    batch: usize,
    work: &'w mut BatchWork,
) -> &'w [f64] {
    debug_assert!(batch <= work.max_batch);
    debug_assert_eq!(input.len(), batch * net.input_dim());
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        if l == 0 {
            linear_forward(input, batch, layer, &mut work.pre[0]);
        } else {
            let (post, pre) = (&work.post[l - 1], &mut work.pre[l]);
            linear_forward(&post[..batch * layer.in_dim], batch, layer, pre);
        }
        let n = batch * layer.out_dim;
        let (pre, post) = (&work.pre[l], &mut work.post[l]);
        if l < last {
            let alpha = layer.alpha;
            for (z, p) in pre[..n].iter().zip(post[..n].iter_mut()) {
                let slope = if *z >= 0.0 { 1.0 } else { alpha };
                *p = z * slope;
            }
        } else {
            post[..n].copy_from_slice(&pre[..n]);
        }
    }
    &work.post[last][..batch]
}

#[cfg_attr(
    all(target_arch = "x86_64", target_feature = "avx512f", not(test)),
    allow(dead_code)
)]
fn grad_input_scalar(d: &[f64], layer: &Dense, batch: usize, dx: &mut [f64]) {
    let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
    for b in 0..batch {
        let d_row = &d[b * o_dim..(b + 1) * o_dim];
        let dx_row = &mut dx[b * i_dim..(b + 1) * i_dim];
        for i in 0..i_dim {
            let w_row = &layer.w[i * o_dim..(i + 1) * o_dim];
            let mut dot = 0.0;
            for (dv, wv) in d_row.iter().zip(w_row) {
                dot = math::mul_add(*dv, *wv, dot);
            }
            dx_row[i] = dot;
        }
    }
}

#[cfg_attr(
    all(target_arch = "x86_64", target_feature = "avx512f", not(test)),
    allow(dead_code)
)]
fn grad_weights_scalar(x: &[f64], d: &[f64], batch: usize, i_dim: usize, o_dim: usize, gw: &mut [f64]) {
    let mut b = 0;
    while b + 4 <= batch {
        let d0 = &d[b * o_dim..(b + 1) * o_dim];
        let d1 = &d[(b + 1) * o_dim..(b + 2) * o_dim];
        let d2 = &d[(b + 2) * o_dim..(b + 3) * o_dim];
        let d3 = &d[(b + 3) * o_dim..(b + 4) * o_dim];
        let xs = &x[b * i_dim..(b + 4) * i_dim];
        for i in 0..i_dim {
            let g_row = &mut gw[i * o_dim..(i + 1) * o_dim];
            let x0 = xs[i];
            let x1 = xs[i_dim + i];
            let x2 = xs[2 * i_dim + i];
            let x3 = xs[3 * i_dim + i];
            for o in 0..o_dim {
                let a = math::mul_add(d0[o], x0, g_row[o]);
                let c = math::mul_add(d1[o], x1, a);
                let e = math::mul_add(d2[o], x2, c);
                g_row[o] = math::mul_add(d3[o], x3, e);
            }
        }
        b += 4;
    }
    while b < batch {
        let d_row = &d[b * o_dim..(b + 1) * o_dim];
        let x_row = &x[b * i_dim..(b + 1) * i_dim];
        for (i, xi) in x_row.iter().enumerate() {
            let g_row = &mut gw[i * o_dim..(i + 1) * o_dim];
            for (acc, dv) in g_row.iter_mut().zip(d_row) {
                *acc = math::mul_add(*dv, *xi, *acc);
            }
        }
        b += 1;
    }
}

/// Batched backward pass. `d_out` is the gradient of the loss w.r.t. the
/// scalar outputs (`batch` values). Parameter gradients are *overwritten*.
///
/// `work` must have been synced (`sync_weights`) with the current parameters.
pub fn backward_batch(
    net: &JointNet,
    input: &[f64],
    batch: usize,
    d_out: &[f64],
    work: &mut BatchWork,
    grads: &mut Grads,
) {
    debug_assert_eq!(d_out.len(), batch);
    let last = net.layers.len() - 1;
    work.delta[last][..batch].copy_from_slice(d_out);

    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
        let act_in: &[f64] = if l == 0 { input } else { &work.post[l - 1] };

        let gw = &mut grads.gw[l];
        let gb = &mut grads.gb[l];
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);

        let delta = &work.delta[l];
        for b in 0..batch {
            let d_row = &delta[b * o_dim..(b + 1) * o_dim];
            for (acc, dv) in gb.iter_mut().zip(d_row) {
                *acc += dv;
            }
        }

        #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
        kernels::grad_weights(act_in, delta, batch, i_dim, o_dim, gw);
        #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
        grad_weights_scalar(act_in, delta, batch, i_dim, o_dim, gw);

        if l > 0 {
            let prev_alpha = net.layers[l - 1].alpha;
            let (delta_head, delta_tail) = work.delta.split_at_mut(l);
            let delta_in = &mut delta_head[l - 1];
            let delta_out = &delta_tail[0];

            #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
            kernels::grad_input(delta_out, &work.wt[l], batch, i_dim, o_dim, delta_in);
            #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
            grad_input_scalar(delta_out, layer, batch, delta_in);

            // through the previous layer's PReLU: scale the gradient by the
            // active slope and accumulate the slope gradient lane-wise
            let pre_prev = &work.pre[l - 1];
            let n = batch * i_dim;
            let mut lanes = [0.0f64; 8];
            let chunks = n / 8;
            for c in 0..chunks {
                let base = c * 8;
                for lane in 0..8 {
                    let z = pre_prev[base + lane];
                    let g = delta_in[base + lane];
                    let (slope, zneg) = if z >= 0.0 { (1.0, 0.0) } else { (prev_alpha, z) };
                    delta_in[base + lane] = g * slope;
                    lanes[lane] = math::mul_add(g, zneg, lanes[lane]);
                }
            }
            let mut galpha = lane_sum(&lanes);
            for idx in chunks * 8..n {
                let z = pre_prev[idx];
                let g = delta_in[idx];
                let (slope, zneg) = if z >= 0.0 { (1.0, 0.0) } else { (prev_alpha, z) };
                delta_in[idx] = g * slope;
                galpha = math::mul_add(g, zneg, galpha);
            }
            grads.galpha[l - 1] = galpha;
        }
    }
    grads.galpha[last] = 0.0;
}

#[inline(always)]
fn lane_sum(acc: &[f64; 8]) -> f64 {
    let p0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let p1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    p0 + p1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prelu_definition() {
        assert_eq!(prelu(-2.0, 0.25), -0.5);
        assert_eq!(prelu(3.0, 0.25), 3.0);
        assert_eq!(prelu(0.0, 0.7), 0.0);
    }

    #[test]
    fn prelu_continuous_at_zero() {
        for alpha in [0.0, 0.25, 1.0, 3.0] {
            let eps = 1e-12;
            assert!((prelu(eps, alpha) - prelu(-eps, alpha)).abs() <= eps * (1.0 + alpha));
        }
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = Rng::from_seed(21);
        // widths chosen to exercise full tiles, ragged tiles and batch tails
        let net = JointNet::init(6, &[19, 8, 5], 0.25, &mut rng);
        for batch in [1usize, 3, 8, 11, 16] {
            let input: Vec<f64> = (0..batch * 6).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let mut work = BatchWork::new(&net, batch);
            let out = forward_batch(&net, &input, batch, &mut work).to_vec();
            for b in 0..batch {
                let single = net.forward_single(&input[b * 6..(b + 1) * 6]);
                assert!(
                    (out[b] - single).abs() < 1e-12,
                    "batch {batch} sample {b}: {} vs {single}",
                    out[b]
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_small_net() {
        let mut rng = Rng::from_seed(22);
        let mut net = JointNet::init(3, &[9, 4], 0.25, &mut rng);
        let batch = 7;
        let input: Vec<f64> = (0..batch * 3).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let targets: Vec<f64> = (0..batch).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss = |net: &JointNet| -> f64 {
            let mut work = BatchWork::new(net, batch);
            let out = forward_batch(net, &input, batch, &mut work);
            out.iter()
                .zip(&targets)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / batch as f64
        };

        let mut work = BatchWork::new(&net, batch);
        let out = forward_batch(&net, &input, batch, &mut work).to_vec();
        let d_out: Vec<f64> = out
            .iter()
            .zip(&targets)
            .map(|(p, y)| 2.0 * (p - y) / batch as f64)
            .collect();
        let mut grads = Grads::new(&net);
        backward_batch(&net, &input, batch, &d_out, &mut work, &mut grads);

        let h = 1e-6;
        for l in 0..net.layers.len() {
            for i in 0..net.layers[l].w.len() {
                let orig = net.layers[l].w[i];
                net.layers[l].w[i] = orig + h;
                let up = loss(&net);
                net.layers[l].w[i] = orig - h;
                let down = loss(&net);
                net.layers[l].w[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.gw[l][i];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * numeric.abs().max(1.0),
                    "w[{l}][{i}]: numeric {numeric} analytic {analytic}"
                );
            }
            for o in 0..net.layers[l].b.len() {
                let orig = net.layers[l].b[o];
                net.layers[l].b[o] = orig + h;
                let up = loss(&net);
                net.layers[l].b[o] = orig - h;
                let down = loss(&net);
                net.layers[l].b[o] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.gb[l][o];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * numeric.abs().max(1.0),
                    "b[{l}][{o}]: numeric {numeric} analytic {analytic}"
                );
            }
            if l + 1 < net.layers.len() {
                let orig = net.layers[l].alpha;
                net.layers[l].alpha = orig + h;
                let up = loss(&net);
                net.layers[l].alpha = orig - h;
                let down = loss(&net);
                net.layers[l].alpha = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.galpha[l];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * numeric.abs().max(1.0),
                    "alpha[{l}]: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    #[test]
    fn simd_kernels_match_scalar_reference() {
        let mut rng = Rng::from_seed(23);
        for (i_dim, o_dim, batch) in [(6, 200, 64), (200, 100, 64), (100, 50, 61), (50, 20, 13), (20, 1, 64)] {
            let x: Vec<f64> = (0..batch * i_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let d: Vec<f64> = (0..batch * o_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let layer = Dense {
                in_dim: i_dim,
                out_dim: o_dim,
                w: (0..i_dim * o_dim).map(|_| rng.uniform(-0.3, 0.3)).collect(),
                b: (0..o_dim).map(|_| rng.uniform(-0.1, 0.1)).collect(),
                alpha: 0.25,
            };

            let mut out_simd = vec![0.0; batch * o_dim];
            kernels::matmul_forward(&x, batch, i_dim, o_dim, &layer.w, &layer.b, &mut out_simd);
            for b in 0..batch {
                for o in 0..o_dim {
                    let mut acc = 0.0;
                    for i in 0..i_dim {
                        acc = math::mul_add(x[b * i_dim + i], layer.w[i * o_dim + o], acc);
                    }
                    acc += layer.b[o];
                    let got = out_simd[b * o_dim + o];
                    assert!(
                        (got - acc).abs() <= 1e-12 * acc.abs().max(1.0),
                        "fwd ({i_dim},{o_dim}) b{b} o{o}: {got} vs {acc}"
                    );
                }
            }

            let mut gw_simd = vec![0.0; i_dim * o_dim];
            kernels::grad_weights(&x, &d, batch, i_dim, o_dim, &mut gw_simd);
            let mut gw_ref = vec![0.0; i_dim * o_dim];
            grad_weights_scalar(&x, &d, batch, i_dim, o_dim, &mut gw_ref);
            for idx in 0..gw_ref.len() {
                assert!(
                    (gw_simd[idx] - gw_ref[idx]).abs() <= 1e-11 * gw_ref[idx].abs().max(1.0),
                    "gw ({i_dim},{o_dim}) idx {idx}"
                );
            }

            let mut wt = vec![0.0; i_dim * o_dim];
            for i in 0..i_dim {
                for o in 0..o_dim {
                    wt[o * i_dim + i] = layer.w[i * o_dim + o];
                }
            }
            let mut dx_simd = vec![0.0; batch * i_dim];
            kernels::grad_input(&d, &wt, batch, i_dim, o_dim, &mut dx_simd);
            let mut dx_ref = vec![0.0; batch * i_dim];
            grad_input_scalar(&d, &layer, batch, &mut dx_ref);
            for idx in 0..dx_ref.len() {
                assert!(
                    (dx_simd[idx] - dx_ref[idx]).abs() <= 1e-11 * dx_ref[idx].abs().max(1.0),
                    "dx ({i_dim},{o_dim}) idx {idx}"
                );
            }
        }
    }
}
