//! Flat-slice linear algebra used by the recurrence engine.
//!
//! Everything is written in "axpy" form (accumulate along the contiguous
//! output axis) so the compiler can vectorize without reassociating float
//! sums; results are bit-deterministic for a fixed input order.

use crate::scalar::Scalar;

// The slice kernels below are `#[inline(never)]` on purpose: slice
// parameters carry noalias guarantees only across a call boundary, and
// without them LLVM refuses to vectorize loops that stream through several
// buffers of the same struct. Call overhead is negligible at these sizes.
//
// The f32 instantiations of the hottest kernels (matvec and the fused
// transition update) additionally dispatch to AVX-512 implementations at
// runtime; the generic code is the portable fallback and the only path for
// f64 oracle work.

#[cfg(target_arch = "x86_64")]
#[inline(always)]
fn has_avx512() -> bool {
    std::arch::is_x86_feature_detected!("avx512f")
}

#[cfg(not(target_arch = "x86_64"))]
#[inline(always)]
fn has_avx512() -> bool {
    false
}

#[inline(always)]
fn as_f32<F: 'static>(v: &[F]) -> Option<&[f32]> {
    if std::any::TypeId::of::<F>() == std::any::TypeId::of::<f32>() {
        Some(unsafe { std::slice::from_raw_parts(v.as_ptr() as *const f32, v.len()) })
    } else {
        None
    }
}

#[inline(always)]
fn as_f32_mut<F: 'static>(v: &mut [F]) -> Option<&mut [f32]> {
    if std::any::TypeId::of::<F>() == std::any::TypeId::of::<f32>() {
        Some(unsafe { std::slice::from_raw_parts_mut(v.as_mut_ptr() as *mut f32, v.len()) })
    } else {
        None
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const LOG2_E: f32 = std::f32::consts::LOG2_E;

    /// Same polynomial as `scalar::fast_exp_f32`, 16 lanes at a time.
    #[inline(always)]
    unsafe fn exp16(x: __m512) -> __m512 {
        let x = _mm512_max_ps(x, _mm512_set1_ps(-87.0));
        let x = _mm512_min_ps(x, _mm512_set1_ps(88.0));
        let n = _mm512_roundscale_ps::<0>(_mm512_mul_ps(x, _mm512_set1_ps(LOG2_E)));
        let r = _mm512_fnmadd_ps(n, _mm512_set1_ps(LN2_HI), x);
        let r = _mm512_fnmadd_ps(n, _mm512_set1_ps(LN2_LO), r);
        let mut p = _mm512_set1_ps(1.0 / 720.0);
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0 / 120.0));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0 / 24.0));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0 / 6.0));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(0.5));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0));
        let ni = _mm512_cvtps_epi32(n);
        let bits = _mm512_slli_epi32::<23>(_mm512_add_epi32(ni, _mm512_set1_epi32(127)));
        _mm512_mul_ps(p, _mm512_castsi512_ps(bits))
    }

    /// y[t] = Σ_j x[j] * mat[j * out + t]; register-tiled over outputs with
    /// masked tails. Serves both `matvec` (mat = wt) and `tmatvec` (mat = w
    /// with the roles of out/inp swapped).
    #[target_feature(enable = "avx512f")]
    pub unsafe fn gemv(mat: &[f32], out: usize, inp: usize, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(mat.len(), out * inp);
        debug_assert_eq!(x.len(), inp);
        debug_assert_eq!(y.len(), out);
        let mp = mat.as_ptr();
        let mut t = 0;
        while t + 64 <= out {
            let mut acc0 = _mm512_setzero_ps();
            let mut acc1 = _mm512_setzero_ps();
            let mut acc2 = _mm512_setzero_ps();
            let mut acc3 = _mm512_setzero_ps();
            for (j, &xj) in x.iter().enumerate() {
                let xv = _mm512_set1_ps(xj);
                let base = mp.add(j * out + t);
                acc0 = _mm512_fmadd_ps(xv, _mm512_loadu_ps(base), acc0);
                acc1 = _mm512_fmadd_ps(xv, _mm512_loadu_ps(base.add(16)), acc1);
                acc2 = _mm512_fmadd_ps(xv, _mm512_loadu_ps(base.add(32)), acc2);
                acc3 = _mm512_fmadd_ps(xv, _mm512_loadu_ps(base.add(48)), acc3);
            }
            let yp = y.as_mut_ptr().add(t);
            _mm512_storeu_ps(yp, acc0);
            _mm512_storeu_ps(yp.add(16), acc1);
            _mm512_storeu_ps(yp.add(32), acc2);
            _mm512_storeu_ps(yp.add(48), acc3);
            t += 64;
        }
        while t < out {
            let rem = (out - t).min(16);
            let mask: __mmask16 = if rem == 16 { 0xFFFF } else { (1u16 << rem) - 1 };
            let mut acc = _mm512_setzero_ps();
            for (j, &xj) in x.iter().enumerate() {
                let xv = _mm512_set1_ps(xj);
                let col = _mm512_maskz_loadu_ps(mask, mp.add(j * out + t));
                acc = _mm512_fmadd_ps(xv, col, acc);
            }
            _mm512_mask_storeu_ps(y.as_mut_ptr().add(t), mask, acc);
            t += rem;
        }
    }

    /// Fused transition row: a = exp(-dt * r), s = a ⊙ s + dtu * bn.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn transition(
        a_row: &mut [f32],
        s_row: &mut [f32],
        dt: &[f32],
        dtu: &[f32],
        r: f32,
        bn: f32,
    ) {
        let d = a_row.len();
        let rv = _mm512_set1_ps(-r);
        let bv = _mm512_set1_ps(bn);
        let mut i = 0;
        while i + 32 <= d {
            let d0 = _mm512_loadu_ps(dt.as_ptr().add(i));
            let d1 = _mm512_loadu_ps(dt.as_ptr().add(i + 16));
            let a0 = exp16(_mm512_mul_ps(d0, rv));
            let a1 = exp16(_mm512_mul_ps(d1, rv));
            _mm512_storeu_ps(a_row.as_mut_ptr().add(i), a0);
            _mm512_storeu_ps(a_row.as_mut_ptr().add(i + 16), a1);
            let s0 = _mm512_loadu_ps(s_row.as_ptr().add(i));
            let s1 = _mm512_loadu_ps(s_row.as_ptr().add(i + 16));
            let u0 = _mm512_loadu_ps(dtu.as_ptr().add(i));
            let u1 = _mm512_loadu_ps(dtu.as_ptr().add(i + 16));
            _mm512_storeu_ps(
                s_row.as_mut_ptr().add(i),
                _mm512_fmadd_ps(a0, s0, _mm512_mul_ps(u0, bv)),
            );
            _mm512_storeu_ps(
                s_row.as_mut_ptr().add(i + 16),
                _mm512_fmadd_ps(a1, s1, _mm512_mul_ps(u1, bv)),
            );
            i += 32;
        }
        while i < d {
            let rem = (d - i).min(16);
            let mask: __mmask16 = if rem == 16 { 0xFFFF } else { (1u16 << rem) - 1 };
            let dv = _mm512_maskz_loadu_ps(mask, dt.as_ptr().add(i));
            let av = exp16(_mm512_mul_ps(dv, rv));
            _mm512_mask_storeu_ps(a_row.as_mut_ptr().add(i), mask, av);
            let sv = _mm512_maskz_loadu_ps(mask, s_row.as_ptr().add(i));
            let uv = _mm512_maskz_loadu_ps(mask, dtu.as_ptr().add(i));
            _mm512_mask_storeu_ps(
                s_row.as_mut_ptr().add(i),
                mask,
                _mm512_fmadd_ps(av, sv, _mm512_mul_ps(uv, bv)),
            );
            i += rem;
        }
    }

    /// Rank-1 accumulate dw += dy ⊗ x.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn accum_outer(dw: &mut [f32], dy: &[f32], x: &[f32]) {
        let inp = x.len();
        let xp = x.as_ptr();
        for (o, &g) in dy.iter().enumerate() {
            let gv = _mm512_set1_ps(g);
            let row = dw.as_mut_ptr().add(o * inp);
            let mut i = 0;
            while i + 16 <= inp {
                let r = _mm512_loadu_ps(row.add(i));
                _mm512_storeu_ps(
                    row.add(i),
                    _mm512_fmadd_ps(gv, _mm512_loadu_ps(xp.add(i)), r),
                );
                i += 16;
            }
            if i < inp {
                let rem = inp - i;
                let mask: __mmask16 = (1u16 << rem) - 1;
                let r = _mm512_maskz_loadu_ps(mask, row.add(i));
                let xv = _mm512_maskz_loadu_ps(mask, xp.add(i));
                _mm512_mask_storeu_ps(row.add(i), mask, _mm512_fmadd_ps(gv, xv, r));
            }
        }
    }

    #[inline(always)]
    unsafe fn reduce(v: __m512) -> f32 {
        _mm512_reduce_add_ps(v)
    }

    /// Fused readout + state backward over all channel rows of one layer
    /// step. Per row n:
    ///   dcv[n]   = dy · s_t[n]
    ///   ds[n]   += cv[n] * dy
    ///   db[n]    = ds[n] · dtu
    ///   ddtu    += b[n] * ds[n]
    ///   da       = ds[n] ⊙ s_prev[n] ⊙ a[n]
    ///   ddt     += -r_n * da
    ///   da_log[n] += -(da · dt) * r_n
    ///   ds[n]    = ds[n] ⊙ a[n]          (carry toward t-1)
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn state_bwd_fused(
        d_ssm: &mut [f32],
        s_t: &[f32],
        s_prev: &[f32],
        a: &[f32],
        dy: &[f32],
        dtu: &[f32],
        dt: &[f32],
        cv: &[f32],
        b: &[f32],
        rates: &[f32],
        dcv: &mut [f32],
        db: &mut [f32],
        ddt: &mut [f32],
        ddtu: &mut [f32],
        da_log: &mut [f32],
    ) {
        let d = dy.len();
        let n = rates.len();
        for nn in 0..n {
            let off = nn * d;
            let cvn = _mm512_set1_ps(cv[nn]);
            let bn = _mm512_set1_ps(b[nn]);
            let rn = rates[nn];
            let neg_r = _mm512_set1_ps(-rn);
            let mut acc_dcv = _mm512_setzero_ps();
            let mut acc_db = _mm512_setzero_ps();
            let mut acc_dadt = _mm512_setzero_ps();
            let mut i = 0;
            while i + 16 <= d {
                let dyv = _mm512_loadu_ps(dy.as_ptr().add(i));
                let sv = _mm512_loadu_ps(s_t.as_ptr().add(off + i));
                acc_dcv = _mm512_fmadd_ps(dyv, sv, acc_dcv);
                let mut dsv = _mm512_loadu_ps(d_ssm.as_ptr().add(off + i));
                dsv = _mm512_fmadd_ps(cvn, dyv, dsv);
                let dtuv = _mm512_loadu_ps(dtu.as_ptr().add(i));
                acc_db = _mm512_fmadd_ps(dsv, dtuv, acc_db);
                let ddtuv = _mm512_loadu_ps(ddtu.as_ptr().add(i));
                _mm512_storeu_ps(ddtu.as_mut_ptr().add(i), _mm512_fmadd_ps(bn, dsv, ddtuv));
                let av = _mm512_loadu_ps(a.as_ptr().add(off + i));
                let spv = _mm512_loadu_ps(s_prev.as_ptr().add(off + i));
                let dav = _mm512_mul_ps(_mm512_mul_ps(dsv, spv), av);
                let ddtv = _mm512_loadu_ps(ddt.as_ptr().add(i));
                _mm512_storeu_ps(ddt.as_mut_ptr().add(i), _mm512_fmadd_ps(neg_r, dav, ddtv));
                let dtv = _mm512_loadu_ps(dt.as_ptr().add(i));
                acc_dadt = _mm512_fmadd_ps(dav, dtv, acc_dadt);
                _mm512_storeu_ps(d_ssm.as_mut_ptr().add(off + i), _mm512_mul_ps(dsv, av));
                i += 16;
            }
            if i < d {
                let rem = d - i;
                let mask: __mmask16 = (1u16 << rem) - 1;
                let dyv = _mm512_maskz_loadu_ps(mask, dy.as_ptr().add(i));
                let sv = _mm512_maskz_loadu_ps(mask, s_t.as_ptr().add(off + i));
                acc_dcv = _mm512_fmadd_ps(dyv, sv, acc_dcv);
                let mut dsv = _mm512_maskz_loadu_ps(mask, d_ssm.as_ptr().add(off + i));
                dsv = _mm512_fmadd_ps(cvn, dyv, dsv);
                let dtuv = _mm512_maskz_loadu_ps(mask, dtu.as_ptr().add(i));
                acc_db = _mm512_fmadd_ps(dsv, dtuv, acc_db);
                let ddtuv = _mm512_maskz_loadu_ps(mask, ddtu.as_ptr().add(i));
                _mm512_mask_storeu_ps(
                    ddtu.as_mut_ptr().add(i),
                    mask,
                    _mm512_fmadd_ps(bn, dsv, ddtuv),
                );
                let av = _mm512_maskz_loadu_ps(mask, a.as_ptr().add(off + i));
                let spv = _mm512_maskz_loadu_ps(mask, s_prev.as_ptr().add(off + i));
                let dav = _mm512_mul_ps(_mm512_mul_ps(dsv, spv), av);
                let ddtv = _mm512_maskz_loadu_ps(mask, ddt.as_ptr().add(i));
                _mm512_mask_storeu_ps(
                    ddt.as_mut_ptr().add(i),
                    mask,
                    _mm512_fmadd_ps(neg_r, dav, ddtv),
                );
                let dtv = _mm512_maskz_loadu_ps(mask, dt.as_ptr().add(i));
                acc_dadt = _mm512_fmadd_ps(dav, dtv, acc_dadt);
                _mm512_mask_storeu_ps(
                    d_ssm.as_mut_ptr().add(off + i),
                    mask,
                    _mm512_mul_ps(dsv, av),
                );
            }
            dcv[nn] = reduce(acc_dcv);
            db[nn] = reduce(acc_db);
            da_log[nn] += -reduce(acc_dadt) * rn;
        }
    }

    /// Fixed-order dot product, 64 lanes of accumulators reduced at the end.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len();
        let mut acc0 = _mm512_setzero_ps();
        let mut acc1 = _mm512_setzero_ps();
        let mut i = 0;
        while i + 32 <= n {
            let a0 = _mm512_loadu_ps(a.as_ptr().add(i));
            let b0 = _mm512_loadu_ps(b.as_ptr().add(i));
            acc0 = _mm512_fmadd_ps(a0, b0, acc0);
            let a1 = _mm512_loadu_ps(a.as_ptr().add(i + 16));
            let b1 = _mm512_loadu_ps(b.as_ptr().add(i + 16));
            acc1 = _mm512_fmadd_ps(a1, b1, acc1);
            i += 32;
        }
        while i < n {
            let rem = (n - i).min(16);
            let mask: __mmask16 = if rem == 16 { 0xFFFF } else { (1u16 << rem) - 1 };
            let av = _mm512_maskz_loadu_ps(mask, a.as_ptr().add(i));
            let bv = _mm512_maskz_loadu_ps(mask, b.as_ptr().add(i));
            acc0 = _mm512_fmadd_ps(av, bv, acc0);
            i += rem;
        }
        _mm512_reduce_add_ps(_mm512_add_ps(acc0, acc1))
    }
}

/// y += a * x, elementwise.
#[inline(never)]
pub fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * *xi;
    }
}

/// y += a * x for an f32 row feeding a generic accumulator.
#[inline(never)]
pub fn axpy_f32<F: Scalar>(y: &mut [F], a: F, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * F::from_f32(*xi);
    }
}

/// dst += a ⊙ b, elementwise.
#[inline(never)]
pub fn vfma<F: Scalar>(dst: &mut [F], a: &[F], b: &[F]) {
    for ((d, &x), &y) in dst.iter_mut().zip(a.iter()).zip(b.iter()) {
        *d += x * y;
    }
}

/// dst += k ⊙ x with an f32 coefficient row.
#[inline(never)]
pub fn vfma_f32<F: Scalar>(dst: &mut [F], k: &[f32], x: &[F]) {
    for ((d, &c), &v) in dst.iter_mut().zip(k.iter()).zip(x.iter()) {
        *d += F::from_f32(c) * v;
    }
}

/// dst = 0.
#[inline(never)]
pub fn vzero<F: Scalar>(dst: &mut [F]) {
    for d in dst.iter_mut() {
        *d = F::ZERO;
    }
}

/// Fused transition + state update for one channel row:
/// a = exp(-dt * r), s = a ⊙ s + dtu * bn.
#[inline(never)]
pub fn vtransition<F: Scalar>(a_row: &mut [F], s_row: &mut [F], dt: &[F], dtu: &[F], r: F, bn: F) {
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        if let (Some(ar), Some(sr), Some(dts), Some(dtus)) = (
            as_f32_mut(a_row),
            as_f32_mut(s_row),
            as_f32(dt),
            as_f32(dtu),
        ) {
            unsafe { avx512::transition(ar, sr, dts, dtus, r.to_f32(), bn.to_f32()) };
            return;
        }
        // borrows returned above; fall through for non-f32
    }
    for i in 0..a_row.len() {
        let a = (-(dt[i] * r)).kernel_exp();
        a_row[i] = a;
        s_row[i] = a * s_row[i] + dtu[i] * bn;
    }
}

/// Decay-log accumulation for one channel row: ld -= dt * r.
#[inline(never)]
pub fn vdecay_row<F: Scalar>(ld_row: &mut [f64], dt: &[F], r: f64) {
    for (l, &d) in ld_row.iter_mut().zip(dt.iter()) {
        *l -= d.to_f64() * r;
    }
}

/// sig = σ(c), u = c ⊙ σ(c).
#[inline(never)]
pub fn vsilu<F: Scalar>(c: &[F], sig: &mut [F], u: &mut [F]) {
    for i in 0..c.len() {
        let s = c[i].kernel_sigmoid();
        sig[i] = s;
        u[i] = c[i] * s;
    }
}

/// Per-channel step sizes: pre = w ⊙ u + b, dt = softplus(pre),
/// sig = σ(pre), dtu = dt ⊙ u.
#[inline(never)]
pub fn vdelta<F: Scalar>(
    u: &[F],
    w: &[f32],
    b: &[f32],
    dt: &mut [F],
    sig: &mut [F],
    dtu: &mut [F],
) {
    for i in 0..u.len() {
        let pre = F::from_f32(w[i]) * u[i] + F::from_f32(b[i]);
        dt[i] = pre.kernel_softplus();
        sig[i] = pre.kernel_sigmoid();
        dtu[i] = dt[i] * u[i];
    }
}

/// Gate pass: sig_z = σ(z), yg = y ⊙ z ⊙ σ(z).
#[inline(never)]
pub fn vgate<F: Scalar>(z: &[F], y: &[F], sig_z: &mut [F], yg: &mut [F]) {
    for i in 0..z.len() {
        let s = z[i].kernel_sigmoid();
        sig_z[i] = s;
        yg[i] = y[i] * z[i] * s;
    }
}

/// Gate backward: dy = dyg ⊙ z σ(z); dz = dyg ⊙ y ⊙ σ(z)(1 + z(1 - σ(z))).
#[inline(never)]
pub fn vgate_bwd<F: Scalar>(dyg: &[F], z: &[F], sig_z: &[F], y: &[F], dy: &mut [F], dz: &mut [F]) {
    for i in 0..dyg.len() {
        let sz = sig_z[i];
        dy[i] = dyg[i] * z[i] * sz;
        dz[i] = dyg[i] * y[i] * sz * (F::ONE + z[i] * (F::ONE - sz));
    }
}

/// State backward for one channel row: da_tmp = ds ⊙ s_prev ⊙ a, then the
/// carry ds = ds ⊙ a.
#[inline(never)]
pub fn vstate_bwd<F: Scalar>(ds_row: &mut [F], sp_row: &[F], a_row: &[F], da_tmp: &mut [F]) {
    for i in 0..ds_row.len() {
        let a = a_row[i];
        da_tmp[i] = ds_row[i] * sp_row[i] * a;
        ds_row[i] *= a;
    }
}

/// Readout + state backward over all channel rows of one layer step; see
/// the fused AVX-512 variant for the row equations. `d_ssm` enters holding
/// the future-carried gradient and leaves holding the carry toward t-1.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
pub fn state_backward<F: Scalar>(
    d_ssm: &mut [F],
    s_t: &[F],
    s_prev: &[F],
    a: &[F],
    dy: &[F],
    dtu: &[F],
    dt: &[F],
    cv: &[F],
    b: &[F],
    rates: &[F],
    dcv: &mut [F],
    db: &mut [F],
    ddt: &mut [F],
    ddtu: &mut [F],
    da_log: &mut [F],
    da_tmp: &mut [F],
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        if let (
            Some(d_ssm),
            Some(s_t),
            Some(s_prev),
            Some(a),
            Some(dy),
            Some(dtu),
            Some(dt),
            Some(cv),
            Some(b),
            Some(rates),
            Some(dcv),
            Some(db),
            Some(ddt),
            Some(ddtu),
            Some(da_log),
        ) = (
            as_f32_mut(d_ssm),
            as_f32(s_t),
            as_f32(s_prev),
            as_f32(a),
            as_f32(dy),
            as_f32(dtu),
            as_f32(dt),
            as_f32(cv),
            as_f32(b),
            as_f32(rates),
            as_f32_mut(dcv),
            as_f32_mut(db),
            as_f32_mut(ddt),
            as_f32_mut(ddtu),
            as_f32_mut(da_log),
        ) {
            unsafe {
                avx512::state_bwd_fused(
                    d_ssm, s_t, s_prev, a, dy, dtu, dt, cv, b, rates, dcv, db, ddt, ddtu, da_log,
                )
            };
            return;
        }
    }
    let d = dy.len();
    for (nn, (&r, &bn)) in rates.iter().zip(b.iter()).enumerate() {
        let ds_row = &mut d_ssm[nn * d..(nn + 1) * d];
        let a_row = &a[nn * d..(nn + 1) * d];
        let sp_row = &s_prev[nn * d..(nn + 1) * d];
        dcv[nn] = dot(dy, &s_t[nn * d..(nn + 1) * d]);
        axpy(ds_row, cv[nn], dy);
        db[nn] = dot(ds_row, dtu);
        axpy(ddtu, bn, ds_row);
        vstate_bwd(ds_row, sp_row, a_row, da_tmp);
        axpy(ddt, -r, da_tmp);
        da_log[nn] += -dot(da_tmp, dt) * r;
    }
}

/// Silu backward: dc = du ⊙ σ(c)(1 + c(1 - σ(c))).
#[inline(never)]
pub fn vsilu_bwd<F: Scalar>(du: &[F], c: &[F], sig_c: &[F], dc: &mut [F]) {
    for i in 0..du.len() {
        let sc = sig_c[i];
        dc[i] = du[i] * sc * (F::ONE + c[i] * (F::ONE - sc));
    }
}

/// Step-size backward: dpre = ddt ⊙ σ(pre); accumulates the per-channel
/// parameter grads and the input route du += dpre ⊙ w.
#[inline(never)]
pub fn vdelta_bwd<F: Scalar>(
    ddt: &[F],
    sig_pre: &[F],
    u: &[F],
    w: &[f32],
    gw: &mut [F],
    gb: &mut [F],
    du: &mut [F],
) {
    for i in 0..ddt.len() {
        let dpre = ddt[i] * sig_pre[i];
        gw[i] += dpre * u[i];
        gb[i] += dpre;
        du[i] += dpre * F::from_f32(w[i]);
    }
}

/// dtu = dt ⊙ u backward: ddt += ddtu ⊙ u, du += ddtu ⊙ dt.
#[inline(never)]
pub fn vdtu_bwd<F: Scalar>(ddtu: &[F], u: &[F], dt: &[F], ddt: &mut [F], du: &mut [F]) {
    for i in 0..ddtu.len() {
        ddt[i] += ddtu[i] * u[i];
        du[i] += ddtu[i] * dt[i];
    }
}

/// RMSNorm backward shared tail: dh_out = inv ⊙ dxn - k ⊙ h.
#[inline(never)]
pub fn vrmsnorm_bwd_tail<F: Scalar>(dxn: &[F], h: &[F], inv: F, k: F, dh: &mut [F]) {
    for i in 0..dxn.len() {
        dh[i] = inv * dxn[i] - k * h[i];
    }
}

/// Gain backward + dxn: g_gain += dx ⊙ h ⊙ inv, dxn = dx ⊙ gain.
#[inline(never)]
pub fn vnorm_gain_bwd<F: Scalar>(
    dx: &[F],
    h: &[F],
    inv: F,
    gain: &[f32],
    g_gain: &mut [F],
    dxn: &mut [F],
) {
    for i in 0..dx.len() {
        g_gain[i] += dx[i] * h[i] * inv;
        dxn[i] = dx[i] * F::from_f32(gain[i]);
    }
}

/// Fixed-order dot product with independent accumulator lanes.
#[inline(never)]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        if let (Some(av), Some(bv)) = (as_f32(a), as_f32(b)) {
            return F::from_f32(unsafe { avx512::dot(av, bv) });
        }
    }
    const LANES: usize = 8;
    let mut acc = [F::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let av = &a[c * LANES..c * LANES + LANES];
        let bv = &b[c * LANES..c * LANES + LANES];
        for k in 0..LANES {
            acc[k] += av[k] * bv[k];
        }
    }
    let mut s = F::ZERO;
    for k in 0..LANES {
        s += acc[k];
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Dense weight matrix with both row layouts materialized.
///
/// `w` is row-major `[out][inp]` (the canonical layout: gradients, Adam
/// state, and serialization all use it); `wt` is its transpose `[inp][out]`,
/// kept so that both `matvec` and `tmatvec` run as contiguous axpy sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<f32>,
    wt: Vec<f32>,
}

impl Mat {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Mat {
            out,
            inp,
            w: vec![0.0; out * inp],
            wt: vec![0.0; out * inp],
        }
    }

    pub fn from_rows(out: usize, inp: usize, w: Vec<f32>) -> Self {
        assert_eq!(w.len(), out * inp);
        let mut m = Mat {
            out,
            inp,
            w,
            wt: Vec::new(),
        };
        m.refresh_transpose();
        m
    }

    /// Rebuild `wt` from `w`. Must be called after mutating `w` in place.
    pub fn refresh_transpose(&mut self) {
        if self.wt.len() != self.w.len() {
            self.wt = vec![0.0; self.w.len()];
        }
        for o in 0..self.out {
            for i in 0..self.inp {
                self.wt[i * self.out + o] = self.w[o * self.inp + i];
            }
        }
    }

    #[inline(always)]
    pub fn row(&self, o: usize) -> &[f32] {
        &self.w[o * self.inp..(o + 1) * self.inp]
    }

    /// y = W x (accumulating over inputs in index order, four columns per
    /// sweep to keep the accumulator traffic low).
    #[inline(never)]
    pub fn matvec<F: Scalar>(&self, x: &[F], y: &mut [F]) {
        debug_assert_eq!(x.len(), self.inp);
        debug_assert_eq!(y.len(), self.out);
        #[cfg(target_arch = "x86_64")]
        if has_avx512() {
            if let (Some(xs), Some(ys)) = (as_f32(x), as_f32_mut(y)) {
                unsafe { avx512::gemv(&self.wt, self.out, self.inp, xs, ys) };
                return;
            }
        }
        let out = self.out;
        let y = &mut y[..out];
        y.iter_mut().for_each(|v| *v = F::ZERO);
        let mut j = 0;
        while j + 4 <= self.inp {
            let (x0, x1, x2, x3) = (x[j], x[j + 1], x[j + 2], x[j + 3]);
            let c0 = &self.wt[j * out..(j + 1) * out];
            let c1 = &self.wt[(j + 1) * out..(j + 2) * out];
            let c2 = &self.wt[(j + 2) * out..(j + 3) * out];
            let c3 = &self.wt[(j + 3) * out..(j + 4) * out];
            for ((((yi, &a), &b), &c), &dv) in y.iter_mut().zip(c0).zip(c1).zip(c2).zip(c3) {
                *yi += x0 * F::from_f32(a)
                    + x1 * F::from_f32(b)
                    + x2 * F::from_f32(c)
                    + x3 * F::from_f32(dv);
            }
            j += 4;
        }
        while j < self.inp {
            let xj = x[j];
            let col = &self.wt[j * out..(j + 1) * out];
            for (yi, &wv) in y.iter_mut().zip(col.iter()) {
                *yi += xj * F::from_f32(wv);
            }
            j += 1;
        }
    }

    /// dx = W^T dy (accumulating over outputs in index order, four rows per
    /// sweep).
    #[inline(never)]
    pub fn tmatvec<F: Scalar>(&self, dy: &[F], dx: &mut [F]) {
        debug_assert_eq!(dy.len(), self.out);
        debug_assert_eq!(dx.len(), self.inp);
        #[cfg(target_arch = "x86_64")]
        if has_avx512() {
            if let (Some(gs), Some(xs)) = (as_f32(dy), as_f32_mut(dx)) {
                unsafe { avx512::gemv(&self.w, self.inp, self.out, gs, xs) };
                return;
            }
        }
        let inp = self.inp;
        let dx = &mut dx[..inp];
        dx.iter_mut().for_each(|v| *v = F::ZERO);
        let mut o = 0;
        while o + 4 <= self.out {
            let (g0, g1, g2, g3) = (dy[o], dy[o + 1], dy[o + 2], dy[o + 3]);
            let r0 = &self.w[o * inp..(o + 1) * inp];
            let r1 = &self.w[(o + 1) * inp..(o + 2) * inp];
            let r2 = &self.w[(o + 2) * inp..(o + 3) * inp];
            let r3 = &self.w[(o + 3) * inp..(o + 4) * inp];
            for ((((xi, &a), &b), &c), &dv) in dx.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
                *xi += g0 * F::from_f32(a)
                    + g1 * F::from_f32(b)
                    + g2 * F::from_f32(c)
                    + g3 * F::from_f32(dv);
            }
            o += 4;
        }
        while o < self.out {
            let g = dy[o];
            let row = &self.w[o * inp..(o + 1) * inp];
            for (xi, &wv) in dx.iter_mut().zip(row.iter()) {
                *xi += g * F::from_f32(wv);
            }
            o += 1;
        }
    }
}

/// Accumulate the rank-1 update dW += dy ⊗ x into a row-major buffer.
#[inline(never)]
pub fn accum_outer<F: Scalar>(dw: &mut [F], dy: &[F], x: &[F]) {
    debug_assert_eq!(dw.len(), dy.len() * x.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        if let (Some(dwv), Some(dyv), Some(xv)) = (as_f32_mut(dw), as_f32(dy), as_f32(x)) {
            unsafe { avx512::accum_outer(dwv, dyv, xv) };
            return;
        }
    }
    let inp = x.len();
    for (row, &g) in dw.chunks_exact_mut(inp).zip(dy.iter()) {
        for (d, &xv) in row.iter_mut().zip(x.iter()) {
            *d += g * xv;
        }
    }
}

/// In-place softmax with f64 accumulation; returns nothing, normalizes `v`.
pub fn softmax_in_place<F: Scalar>(v: &mut [F]) {
    let mut m = v[0];
    for &x in v.iter() {
        m = m.maxv(x);
    }
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += x.to_f64();
    }
    let inv = F::from_f64(1.0 / sum);
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Fused training-head primitive: turn logits into softmax probabilities in
/// place (kernel-exp, f64-accumulated normalizer) and return the log
/// probability of `target`.
pub fn softmax_and_logprob<F: Scalar>(v: &mut [F], target: usize) -> f64 {
    let mut m = v[0];
    for &x in v.iter() {
        m = m.maxv(x);
    }
    let target_logit = (v[target] - m).to_f64();
    for x in v.iter_mut() {
        *x = (*x - m).kernel_exp();
    }
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let chunks = v.len() / LANES;
    for c in 0..chunks {
        let cv = &v[c * LANES..c * LANES + LANES];
        for k in 0..LANES {
            acc[k] += cv[k].to_f64();
        }
    }
    let mut sum = 0.0f64;
    for a in acc {
        sum += a;
    }
    for i in chunks * LANES..v.len() {
        sum += v[i].to_f64();
    }
    let inv = F::from_f64(1.0 / sum);
    for x in v.iter_mut() {
        *x *= inv;
    }
    target_logit - sum.ln()
}

/// log(softmax(v)[target]) with f64 accumulation, without mutating `v`.
pub fn log_softmax_at<F: Scalar>(v: &[F], target: usize) -> f64 {
    let mut m = v[0];
    for &x in v.iter() {
        m = m.maxv(x);
    }
    let mut sum = 0.0f64;
    for &x in v.iter() {
        sum += (x - m).to_f64().exp();
    }
    (v[target] - m).to_f64() - sum.ln()
}

/// Index of the maximum element; ties broken by the lowest index.
pub fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
