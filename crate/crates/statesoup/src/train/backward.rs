//! Forward-with-tape and reverse-mode differentiation through the unrolled
//! recurrence.
//!
//! The tape keeps every per-(token, layer) intermediate the backward sweep
//! needs. Time couples layers through the recurrent state (carried gradient
//! d_ssm) and the conv window (a W-deep ring of upstream conv gradients).

use crate::kernels::{
    accum_outer, axpy, dot, softmax_and_logprob, state_backward, vdelta_bwd, vdtu_bwd, vfma,
    vfma_f32, vgate_bwd, vnorm_gain_bwd, vrmsnorm_bwd_tail, vsilu_bwd, vzero,
};
use crate::model::engine::{embed_token, layer_forward, rmsnorm, LayerStateMut, LayerWork};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

use super::Gradients;

pub(crate) struct Tape<F> {
    pub capacity: usize,
    pub works: Vec<Vec<LayerWork<F>>>,
    /// ssm after the step, per (token, layer): `[T][L][N*D]`.
    pub states: Vec<Vec<Vec<F>>>,
    /// Softmax probabilities per position: `[T][V]`.
    pub probs: Vec<Vec<F>>,
    /// Residual stream after the last layer: `[T][D]`.
    pub h_final: Vec<Vec<F>>,
    /// Final-normed activations: `[T][D]`.
    pub fn_buf: Vec<Vec<F>>,
    /// 1/rms of the final norm: `[T]`.
    pub inv_final: Vec<F>,
}

impl<F: Scalar> Tape<F> {
    pub fn new(config: &ModelConfig, capacity: usize) -> Self {
        let (d, n, l, v) = (
            config.embed_dim,
            config.state_dim,
            config.num_layers,
            config.vocab_size,
        );
        Tape {
            capacity,
            works: (0..capacity)
                .map(|_| (0..l).map(|_| LayerWork::new(d, n)).collect())
                .collect(),
            states: (0..capacity)
                .map(|_| (0..l).map(|_| vec![F::ZERO; n * d]).collect())
                .collect(),
            probs: (0..capacity).map(|_| vec![F::ZERO; v]).collect(),
            h_final: (0..capacity).map(|_| vec![F::ZERO; d]).collect(),
            fn_buf: (0..capacity).map(|_| vec![F::ZERO; d]).collect(),
            inv_final: vec![F::ZERO; capacity],
        }
    }
}

/// Scratch buffers for one backward sweep.
pub(crate) struct BackwardScratch<F> {
    dlogits: Vec<F>,
    dfn: Vec<F>,
    dxn: Vec<F>,
    dh: Vec<F>,
    dh_in: Vec<F>,
    dyg: Vec<F>,
    dy: Vec<F>,
    dz: Vec<F>,
    dx: Vec<F>,
    dx_tmp: Vec<F>,
    dcv: Vec<F>,
    db: Vec<F>,
    ddt: Vec<F>,
    ddtu: Vec<F>,
    du: Vec<F>,
    dc: Vec<F>,
    dp: Vec<F>,
    da_tmp: Vec<F>,
    /// Carried state gradient per layer: `[L][N*D]`.
    d_ssm: Vec<Vec<F>>,
    /// Ring of conv-input gradients per layer: `[L][W][D]` indexed by t mod W.
    dc_ring: Vec<Vec<F>>,
    zeros_state: Vec<F>,
}

impl<F: Scalar> BackwardScratch<F> {
    pub fn new(config: &ModelConfig) -> Self {
        let (d, n, l, v, w) = (
            config.embed_dim,
            config.state_dim,
            config.num_layers,
            config.vocab_size,
            config.conv_width,
        );
        BackwardScratch {
            dlogits: vec![F::ZERO; v],
            dfn: vec![F::ZERO; d],
            dxn: vec![F::ZERO; d],
            dh: vec![F::ZERO; d],
            dh_in: vec![F::ZERO; d],
            dyg: vec![F::ZERO; d],
            dy: vec![F::ZERO; d],
            dz: vec![F::ZERO; d],
            dx: vec![F::ZERO; d],
            dx_tmp: vec![F::ZERO; d],
            dcv: vec![F::ZERO; n],
            db: vec![F::ZERO; n],
            ddt: vec![F::ZERO; d],
            ddtu: vec![F::ZERO; d],
            du: vec![F::ZERO; d],
            dc: vec![F::ZERO; d],
            dp: vec![F::ZERO; d],
            da_tmp: vec![F::ZERO; d],
            d_ssm: (0..l).map(|_| vec![F::ZERO; n * d]).collect(),
            dc_ring: (0..l).map(|_| vec![F::ZERO; w * d]).collect(),
            zeros_state: vec![F::ZERO; n * d],
        }
    }

    fn reset(&mut self) {
        for v in &mut self.d_ssm {
            v.iter_mut().for_each(|x| *x = F::ZERO);
        }
        for v in &mut self.dc_ring {
            v.iter_mut().for_each(|x| *x = F::ZERO);
        }
    }
}

/// Run one sequence from the zero state, filling `tape` for positions
/// `0..tokens.len()-1` and returning the mean next-token NLL.
pub(crate) fn forward_row<F: Scalar>(
    model: &ModelParams,
    rates: &[Vec<F>],
    tokens: &[u32],
    tape: &mut Tape<F>,
    ssm_cur: &mut [Vec<F>],
    conv_cur: &mut [Vec<F>],
    logits_buf: &mut Vec<F>,
) -> f64 {
    let steps = tokens.len() - 1;
    assert!(steps <= tape.capacity, "tape too small for sequence");
    let v = model.config.vocab_size;
    for s in ssm_cur.iter_mut() {
        s.iter_mut().for_each(|x| *x = F::ZERO);
    }
    for c in conv_cur.iter_mut() {
        c.iter_mut().for_each(|x| *x = F::ZERO);
    }
    logits_buf.resize(v, F::ZERO);

    let mut h = vec![F::ZERO; model.config.embed_dim];
    let mut nll = 0.0f64;
    for t in 0..steps {
        embed_token(model, tokens[t], &mut h);
        for (li, lp) in model.layers.iter().enumerate() {
            let mut view = LayerStateMut {
                ssm: &mut ssm_cur[li],
                conv: &mut conv_cur[li],
                log_decay: None,
            };
            layer_forward(lp, &rates[li], &mut view, &mut h, &mut tape.works[t][li]);
            tape.states[t][li].copy_from_slice(&ssm_cur[li]);
        }
        tape.h_final[t].copy_from_slice(&h);
        tape.inv_final[t] = rmsnorm(&h, &model.final_norm, &mut tape.fn_buf[t]);
        model.embedding.matvec(&tape.fn_buf[t], logits_buf);
        nll -= softmax_and_logprob(logits_buf, tokens[t + 1] as usize);
        tape.probs[t].copy_from_slice(logits_buf);
    }
    nll / steps as f64
}

/// Backward sweep over one sequence; accumulates into `grads`.
pub(crate) fn backward_row<F: Scalar>(
    model: &ModelParams,
    rates: &[Vec<F>],
    tokens: &[u32],
    tape: &Tape<F>,
    scratch: &mut BackwardScratch<F>,
    grads: &mut Gradients<F>,
) {
    let steps = tokens.len() - 1;
    let d = model.config.embed_dim;
    let _n = model.config.state_dim;
    let w = model.config.conv_width;
    let coeff = F::from_f64(1.0 / steps as f64);
    scratch.reset();

    for t in (0..steps).rev() {
        // head: dlogits = (probs - onehot) / steps
        let target = tokens[t + 1] as usize;
        for (dv, &p) in scratch.dlogits.iter_mut().zip(tape.probs[t].iter()) {
            *dv = p * coeff;
        }
        scratch.dlogits[target] -= coeff;
        accum_outer(&mut grads.embedding, &scratch.dlogits, &tape.fn_buf[t]);
        model.embedding.tmatvec(&scratch.dlogits, &mut scratch.dfn);

        // final rmsnorm backward
        let inv = tape.inv_final[t];
        let h_fin = &tape.h_final[t];
        vnorm_gain_bwd(
            &scratch.dfn,
            h_fin,
            inv,
            &model.final_norm,
            &mut grads.final_norm,
            &mut scratch.dxn,
        );
        let dot_xh = dot(&scratch.dxn, h_fin);
        let k = inv * inv * inv * dot_xh * F::from_f64(1.0 / d as f64);
        vrmsnorm_bwd_tail(&scratch.dxn, h_fin, inv, k, &mut scratch.dh);

        for li in (0..model.layers.len()).rev() {
            let lp = &model.layers[li];
            let wk = &tape.works[t][li];
            let s_t = &tape.states[t][li];
            let s_prev: &[F] = if t > 0 {
                &tape.states[t - 1][li]
            } else {
                &scratch.zeros_state
            };
            let g = &mut grads.layers[li];
            let d_ssm = &mut scratch.d_ssm[li];
            let ring = &mut scratch.dc_ring[li];

            // o = w_out . yg
            lp.w_out.tmatvec(&scratch.dh, &mut scratch.dyg);
            accum_outer(&mut g.w_out, &scratch.dh, &wk.yg);

            // yg = y ⊙ z σ(z)
            vgate_bwd(
                &scratch.dyg,
                &wk.z,
                &wk.sig_z,
                &wk.y,
                &mut scratch.dy,
                &mut scratch.dz,
            );

            // z = w_gate . x
            accum_outer(&mut g.w_gate, &scratch.dz, &wk.x);
            lp.w_gate.tmatvec(&scratch.dz, &mut scratch.dx);

            // readout y[d] = Σ_n cv[n] s[n, d] and the state recurrence,
            // fused over channel rows
            vzero(&mut scratch.ddt);
            vzero(&mut scratch.ddtu);
            state_backward(
                d_ssm,
                s_t,
                s_prev,
                &wk.a,
                &scratch.dy,
                &wk.dtu,
                &wk.dt,
                &wk.cv,
                &wk.b,
                &rates[li],
                &mut scratch.dcv,
                &mut scratch.db,
                &mut scratch.ddt,
                &mut scratch.ddtu,
                &mut g.a_log,
                &mut scratch.da_tmp,
            );

            // b = w_b . u, cv = w_c . u
            accum_outer(&mut g.w_b, &scratch.db, &wk.u);
            accum_outer(&mut g.w_c, &scratch.dcv, &wk.u);
            vzero(&mut scratch.du);
            lp.w_b.tmatvec(&scratch.db, &mut scratch.dx_tmp);
            axpy(&mut scratch.du, F::ONE, &scratch.dx_tmp);
            lp.w_c.tmatvec(&scratch.dcv, &mut scratch.dx_tmp);
            axpy(&mut scratch.du, F::ONE, &scratch.dx_tmp);

            // dtu = dt ⊙ u
            vdtu_bwd(
                &scratch.ddtu,
                &wk.u,
                &wk.dt,
                &mut scratch.ddt,
                &mut scratch.du,
            );

            // dt = softplus(w_delta ⊙ u + b_delta)
            vdelta_bwd(
                &scratch.ddt,
                &wk.sig_dt_pre,
                &wk.u,
                &lp.w_delta,
                &mut g.w_delta,
                &mut g.b_delta,
                &mut scratch.du,
            );

            // u = silu(c)
            vsilu_bwd(&scratch.du, &wk.c, &wk.sig_c, &mut scratch.dc);

            // conv: c_t[i] = Σ_w K[w][i] p_{t-(W-1-w)}[i]
            ring[(t % w) * d..(t % w + 1) * d].copy_from_slice(&scratch.dc);
            for row in 0..w {
                let tau = t as isize - (w as isize - 1 - row as isize);
                if tau >= 0 {
                    let p_tau = &tape.works[tau as usize][li].p;
                    vfma(
                        &mut g.conv_kernel[row * d..(row + 1) * d],
                        &scratch.dc,
                        p_tau,
                    );
                }
            }
            // dp_t[i] = Σ_j K[W-1-j][i] dc_{t+j}[i]
            vzero(&mut scratch.dp);
            for j in 0..w {
                if t + j < steps {
                    let krow = w - 1 - j;
                    let slot = ((t + j) % w) * d;
                    vfma_f32(
                        &mut scratch.dp,
                        &lp.conv_kernel[krow * d..(krow + 1) * d],
                        &ring[slot..slot + d],
                    );
                }
            }

            // p = w_in . x
            accum_outer(&mut g.w_in, &scratch.dp, &wk.x);
            lp.w_in.tmatvec(&scratch.dp, &mut scratch.dx_tmp);
            axpy(&mut scratch.dx, F::ONE, &scratch.dx_tmp);

            // rmsnorm with gain
            let inv = wk.inv_rms;
            vnorm_gain_bwd(
                &scratch.dx,
                &wk.h_in,
                inv,
                &lp.norm_scale,
                &mut g.norm_scale,
                &mut scratch.dxn,
            );
            let dot_xh = dot(&scratch.dxn, &wk.h_in);
            let k = inv * inv * inv * dot_xh * F::from_f64(1.0 / d as f64);
            vrmsnorm_bwd_tail(&scratch.dxn, &wk.h_in, inv, k, &mut scratch.dh_in);

            // residual: dh flows through unchanged plus the block branch
            axpy(&mut scratch.dh, F::ONE, &scratch.dh_in);
        }

        // embedding lookup at the bottom of the stack
        let row = tokens[t] as usize * d;
        axpy(&mut grads.embedding[row..row + d], F::ONE, &scratch.dh);
    }
}
