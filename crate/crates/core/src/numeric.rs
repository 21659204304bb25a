//! Scalar helpers shared by the kernel and the model: the `Real` float abstraction,
//! a vectorizable `exp` for the f32 forward path, activations, dense projections and
//! exact integer rounding used by schedules and grids.

use num_traits::Float;

/// Floating-point type the scan kernel is generic over.
///
/// The model runs in `f32`; oracle and equivalence checks re-run in `f64`.
pub trait Real: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    /// `exp` used inside the scan and the influence sweep. For `f64` this is the libm
    /// `exp`; for `f32` a branch-free polynomial (max relative error ~2e-7) that the
    /// compiler can vectorize.
    fn exp_fast(self) -> Self;

    /// `ln(1 + exp(x))`.
    fn softplus(self) -> Self;

    /// `x * sigmoid(x)`.
    fn silu(self) -> Self;

    fn from_f64(v: f64) -> Self;
}

impl Real for f64 {
    #[inline(always)]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn softplus(self) -> Self {
        if self > 20.0 {
            self
        } else {
            self.exp().ln_1p()
        }
    }

    #[inline]
    fn silu(self) -> Self {
        self / (1.0 + (-self).exp())
    }

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Real for f32 {
    #[inline(always)]
    fn exp_fast(self) -> Self {
        expf(self)
    }

    #[inline(always)]
    fn softplus(self) -> Self {
        let u = expf(self);
        let w = 1.0 + u;
        // ln(w) * u / (w - 1) recovers ln1p(u) when w rounds.
        let small = if w == 1.0 { u } else { lnf(w) * u / (w - 1.0) };
        if self > 20.0 {
            self
        } else {
            small
        }
    }

    #[inline(always)]
    fn silu(self) -> Self {
        self / (1.0 + expf(-self))
    }

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Cephes-style `expf`: range reduction by `ln 2`, degree-5 minimax polynomial on
/// `[-ln2/2, ln2/2]`, reconstruction through the exponent bits.
#[inline(always)]
pub fn expf(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // 1.5 * 2^23: adding and subtracting rounds to nearest integer without a libm call.
    const ROUND_MAGIC: f32 = 12_582_912.0;

    // max/min also map NaN to a finite value.
    #[allow(clippy::manual_clamp)]
    let x = x.max(-87.3).min(88.0);
    let k = x * LOG2E + ROUND_MAGIC;
    let n = k - ROUND_MAGIC;
    let g = x - n * LN2_HI - n * LN2_LO;
    let z = g * g;
    let p = ((((1.987_569_2e-4 * g + 1.398_199_9e-3) * g + 8.333_452e-3) * g + 4.166_579_6e-2) * g
        + 1.666_666_5e-1)
        * g
        + 5e-1;
    let y = p * z + g + 1.0;
    // The low mantissa bits of `k` hold `n` offset by 0x40_0000; rebuild 2^n from them
    // without a float-to-int conversion.
    let scale = f32::from_bits(
        k.to_bits()
            .wrapping_sub(0x4B40_0000)
            .wrapping_add(127)
            .wrapping_shl(23),
    );
    y * scale
}

/// Cephes-style natural log for positive finite `x`: mantissa in `[sqrt(1/2), sqrt(2))`,
/// degree-8 polynomial, exponent added back in two parts.
#[inline(always)]
pub fn lnf(x: f32) -> f32 {
    let x = x.max(f32::MIN_POSITIVE);
    let bits = x.to_bits();
    let mut e = ((bits >> 23) as i32 - 127) as f32;
    let mut m = f32::from_bits((bits & 0x007f_ffff) | 0x3f80_0000);
    if m > std::f32::consts::SQRT_2 {
        m *= 0.5;
        e += 1.0;
    }
    let f = m - 1.0;
    let z = f * f;
    let mut y = 7.037_683_6e-2;
    y = y * f - 1.151_461e-1;
    y = y * f + 1.167_699_9e-1;
    y = y * f - 1.242_014_1e-1;
    y = y * f + 1.424_932_3e-1;
    y = y * f - 1.666_805_8e-1;
    y = y * f + 2.000_071_4e-1;
    y = y * f - 2.499_999_4e-1;
    y = y * f + 3.333_333e-1;
    y *= z * f;
    y += -2.121_944_4e-4 * e;
    y += -0.5 * z;
    f + y + 0.693_359_4 * e
}

/// Widest instruction set the hot loops were compiled for that this CPU supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Simd {
    Avx512,
    Avx2,
    Base,
}

pub(crate) fn simd_level() -> Simd {
    static LEVEL: std::sync::OnceLock<Simd> = std::sync::OnceLock::new();
    *LEVEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::is_x86_feature_detected as has;
            if has!("avx512f") && has!("avx512vl") && has!("avx2") && has!("fma") {
                return Simd::Avx512;
            }
            if has!("avx2") && has!("fma") {
                return Simd::Avx2;
            }
        }
        Simd::Base
    })
}

/// Defines `$name` as a runtime dispatcher over copies of the `#[inline(always)]`
/// function `$body` compiled for AVX-512, AVX2/FMA and the baseline target.
macro_rules! multiversion {
    ($vis:vis fn $name:ident $(<$g:ident: $bound:path>)? ($($arg:ident: $ty:ty),* $(,)?) -> $ret:ty => $body:ident) => {
        $vis fn $name $(<$g: $bound>)? ($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,avx512vl,avx2,fma")]
                unsafe fn wide $(<$g: $bound>)? ($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn narrow $(<$g: $bound>)? ($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                match $crate::numeric::simd_level() {
                    // SAFETY: the CPU supports the features each variant is compiled for.
                    $crate::numeric::Simd::Avx512 => return unsafe { wide($($arg),*) },
                    $crate::numeric::Simd::Avx2 => return unsafe { narrow($($arg),*) },
                    $crate::numeric::Simd::Base => {}
                }
            }
            $body($($arg),*)
        }
    };
}
pub(crate) use multiversion;

#[inline(always)]
fn softplus_rows_body(vals: &mut [f32], bias: &[f32]) {
    for row in vals.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = (*v + *b).softplus().max(f32::MIN_POSITIVE);
        }
    }
}

// In place: v = max(softplus(v + bias[col]), MIN_POSITIVE).
multiversion!(
    pub(crate) fn softplus_rows(vals: &mut [f32], bias: &[f32]) -> () => softplus_rows_body
);

#[inline(always)]
fn silu_body(vals: &mut [f32]) {
    for v in vals.iter_mut() {
        *v = v.silu();
    }
}

multiversion!(pub(crate) fn silu_inplace(vals: &mut [f32]) -> () => silu_body);

#[inline(always)]
pub fn softplus<F: Real>(x: F) -> F {
    x.softplus()
}

#[inline(always)]
pub fn silu<F: Real>(x: F) -> F {
    x.silu()
}

/// `out[rows x out_dim] = x[rows x in_dim] * w^T` with `w` stored `[out_dim x in_dim]`.
pub fn linear(x: &[f32], rows: usize, w: &[f32], out_dim: usize, in_dim: usize) -> Vec<f32> {
    assert_eq!(x.len(), rows * in_dim, "linear: input length");
    assert_eq!(w.len(), out_dim * in_dim, "linear: weight length");
    let mut out = vec![0.0f32; rows * out_dim];
    if rows == 0 || out_dim == 0 || in_dim == 0 {
        return out;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside `x`, `w`
    // and `out`; the three buffers do not alias.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            in_dim,
            out_dim,
            1.0,
            x.as_ptr(),
            in_dim as isize,
            1,
            w.as_ptr(),
            1,
            in_dim as isize,
            0.0,
            out.as_mut_ptr(),
            out_dim as isize,
            1,
        );
    }
    out
}

pub const RMS_EPS: f32 = 1e-5;

/// Row-wise RMS normalization with a learned per-channel scale.
pub fn rms_norm(x: &[f32], width: usize, scale: &[f32]) -> Vec<f32> {
    debug_assert_eq!(scale.len(), width);
    let mut out = vec![0.0f32; x.len()];
    for (row, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / width as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, v), s) in dst.iter_mut().zip(row).zip(scale) {
            *o = v * inv * s;
        }
    }
    out
}

/// `round(num / den)` with halves rounded away from zero, for non-negative operands.
#[inline]
pub fn round_div(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

/// Denominator used to turn a decimal keep ratio into an exact rational.
pub const RATIO_DENOM: u128 = 1_000_000_000;

/// Quantizes a ratio in `(0, 1]` to `RATIO_DENOM` steps so that schedule arithmetic is
/// exact; `0.7` becomes `700_000_000 / 10^9`.
pub fn ratio_numerator(r: f64) -> Option<u128> {
    if !(r.is_finite() && r > 0.0 && r <= 1.0) {
        return None;
    }
    let num = (r * RATIO_DENOM as f64).round() as u128;
    (num > 0).then_some(num.min(RATIO_DENOM))
}
