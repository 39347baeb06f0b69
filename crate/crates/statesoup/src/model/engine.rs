//! The gated-linear recurrence, written once and instantiated at f32
//! (production) and f64 (oracle paths).
//!
//! Layout conventions: ssm and transition matrices are n-major `[N][D]` so
//! every inner loop sweeps the contiguous channel axis; conv buffers are
//! `[W][D]` oldest-first. Elementwise passes run through the slice kernels
//! in `kernels`, which keep the loops vectorizable.

use super::params::{LayerParams, ModelParams};
use crate::kernels::{axpy, vdecay_row, vdelta, vgate, vsilu, vtransition, vzero};
use crate::scalar::Scalar;

pub(crate) const RMSNORM_EPS: f64 = 1e-5;

/// Mutable view over one layer's recurrent state.
pub(crate) struct LayerStateMut<'a, F> {
    pub ssm: &'a mut [F],
    pub conv: &'a mut [F],
    /// None skips decay accumulation (training tape does not need it).
    pub log_decay: Option<&'a mut [f64]>,
}

/// Per-step intermediate values of one layer. The inference path reuses one
/// of these as scratch; the training tape keeps one per (token, layer).
#[derive(Debug, Clone)]
pub(crate) struct LayerWork<F> {
    pub h_in: Vec<F>,
    pub inv_rms: F,
    pub x: Vec<F>,
    pub p: Vec<F>,
    pub c: Vec<F>,
    pub sig_c: Vec<F>,
    pub u: Vec<F>,
    pub dtu: Vec<F>,
    pub dt: Vec<F>,
    pub sig_dt_pre: Vec<F>,
    pub b: Vec<F>,
    pub cv: Vec<F>,
    pub a: Vec<F>,
    pub y: Vec<F>,
    pub z: Vec<F>,
    pub sig_z: Vec<F>,
    pub yg: Vec<F>,
    pub o: Vec<F>,
}

impl<F: Scalar> LayerWork<F> {
    pub fn new(d: usize, n: usize) -> Self {
        LayerWork {
            h_in: vec![F::ZERO; d],
            inv_rms: F::ZERO,
            x: vec![F::ZERO; d],
            p: vec![F::ZERO; d],
            c: vec![F::ZERO; d],
            sig_c: vec![F::ZERO; d],
            u: vec![F::ZERO; d],
            dtu: vec![F::ZERO; d],
            dt: vec![F::ZERO; d],
            sig_dt_pre: vec![F::ZERO; d],
            b: vec![F::ZERO; n],
            cv: vec![F::ZERO; n],
            a: vec![F::ZERO; n * d],
            y: vec![F::ZERO; d],
            z: vec![F::ZERO; d],
            sig_z: vec![F::ZERO; d],
            yg: vec![F::ZERO; d],
            o: vec![F::ZERO; d],
        }
    }
}

/// RMS normalization with gain; returns 1/rms for the backward pass.
#[inline(never)]
pub(crate) fn rmsnorm<F: Scalar>(h: &[F], gain: &[f32], out: &mut [F]) -> F {
    let d = h.len();
    let mut ss = 0.0f64;
    for &v in h {
        ss += v.to_f64() * v.to_f64();
    }
    let inv = F::from_f64(1.0 / (ss / d as f64 + RMSNORM_EPS).sqrt());
    for i in 0..d {
        out[i] = h[i] * inv * F::from_f32(gain[i]);
    }
    inv
}

#[inline(never)]
fn conv_step<F: Scalar>(kernel: &[f32], conv: &mut [F], p: &[F], c: &mut [F]) {
    let d = p.len();
    let w = kernel.len() / d;
    conv.copy_within(d.., 0);
    conv[(w - 1) * d..].copy_from_slice(p);
    vzero(c);
    for row in 0..w {
        let k = &kernel[row * d..(row + 1) * d];
        let src = &conv[row * d..(row + 1) * d];
        for (cv, (&kv, &sv)) in c.iter_mut().zip(k.iter().zip(src.iter())) {
            *cv += F::from_f32(kv) * sv;
        }
    }
}

/// One recurrent block applied to residual stream `h` (updated in place).
/// All intermediates land in `wk`; the state advances by one step.
pub(crate) fn layer_forward<F: Scalar>(
    lp: &LayerParams,
    rates: &[F],
    st: &mut LayerStateMut<'_, F>,
    h: &mut [F],
    wk: &mut LayerWork<F>,
) {
    let d = h.len();
    let n = rates.len();

    wk.h_in.copy_from_slice(h);
    wk.inv_rms = rmsnorm(h, &lp.norm_scale, &mut wk.x);

    lp.w_in.matvec(&wk.x, &mut wk.p);
    conv_step(&lp.conv_kernel, st.conv, &wk.p, &mut wk.c);
    vsilu(&wk.c, &mut wk.sig_c, &mut wk.u);
    vdelta(
        &wk.u,
        &lp.w_delta,
        &lp.b_delta,
        &mut wk.dt,
        &mut wk.sig_dt_pre,
        &mut wk.dtu,
    );

    lp.w_b.matvec(&wk.u, &mut wk.b);
    lp.w_c.matvec(&wk.u, &mut wk.cv);

    // transitions, state update, and decay accumulation, one channel row
    // per state dimension
    for nn in 0..n {
        let r = rates[nn];
        vtransition(
            &mut wk.a[nn * d..(nn + 1) * d],
            &mut st.ssm[nn * d..(nn + 1) * d],
            &wk.dt,
            &wk.dtu,
            r,
            wk.b[nn],
        );
        if let Some(ld) = st.log_decay.as_deref_mut() {
            vdecay_row(&mut ld[nn * d..(nn + 1) * d], &wk.dt, r.to_f64());
        }
    }

    // readout y = Σ_n C[n] * s[n, :]
    vzero(&mut wk.y);
    for nn in 0..n {
        axpy(&mut wk.y, wk.cv[nn], &st.ssm[nn * d..(nn + 1) * d]);
    }

    lp.w_gate.matvec(&wk.x, &mut wk.z);
    vgate(&wk.z, &wk.y, &mut wk.sig_z, &mut wk.yg);
    lp.w_out.matvec(&wk.yg, &mut wk.o);
    for i in 0..d {
        h[i] += wk.o[i];
    }
}

/// Per-layer transition rates exp(a_log).
pub(crate) fn layer_rates<F: Scalar>(lp: &LayerParams) -> Vec<F> {
    lp.a_log.iter().map(|&a| F::from_f32(a).exp()).collect()
}

/// Final norm + tied head. Returns (normed activations written to `fn_buf`,
/// inv_rms) and fills `logits`.
pub(crate) fn head_forward<F: Scalar>(
    params: &ModelParams,
    h: &[F],
    fn_buf: &mut [F],
    logits: &mut [F],
) -> F {
    let inv = rmsnorm(h, &params.final_norm, fn_buf);
    params.embedding.matvec(fn_buf, logits);
    inv
}

/// Copy a token's embedding row into the residual stream.
pub(crate) fn embed_token<F: Scalar>(params: &ModelParams, token: u32, h: &mut [F]) {
    let row = params.embedding.row(token as usize);
    for (hv, &e) in h.iter_mut().zip(row.iter()) {
        *hv = F::from_f32(e);
    }
}
