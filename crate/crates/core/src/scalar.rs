use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for constants and file payloads.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Elementwise `tanh`, the hot loop of network evaluation.
    fn tanh_in_place(v: &mut [Self]) {
        for x in v {
            *x = x.tanh();
        }
    }
}

// tanh(x) = 1 - 2 / (exp(2x) + 1), with exp evaluated branch-free as
// 2^k * p(r), r = y - k ln 2, |r| <= ln 2 / 2, so the loop vectorizes. The
// argument is clamped where tanh is already +-1 to working precision. Adding
// the 1.5 * 2^p shifter rounds to the nearest integer and leaves k in the low
// mantissa bits, from which 2^k is assembled without a float-to-int cast.

#[inline(always)]
#[allow(clippy::manual_clamp, clippy::excessive_precision)]
fn tanh_f64_kernel(v: &mut [f64]) {
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1/13! .. 1/2!, 1, 1: truncation below 1e-17 on |r| <= 0.35
    const C: [f64; 14] = [
        1.0 / 6_227_020_800.0,
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    for x in v {
        let y = (2.0 * *x).max(-80.0).min(80.0);
        let t = y * std::f64::consts::LOG2_E + SHIFTER;
        let k = t - SHIFTER;
        let r = (y - k * LN2_HI) - k * LN2_LO;
        let mut p = C[0];
        for &c in &C[1..] {
            p = p * r + c;
        }
        let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
        *x = 1.0 - 2.0 / (p * scale + 1.0);
    }
}

#[inline(always)]
#[allow(clippy::manual_clamp, clippy::excessive_precision)]
fn tanh_f32_kernel(v: &mut [f32]) {
    const SHIFTER: f32 = 12_582_912.0;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const C: [f32; 8] = [
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    for x in v {
        let y = (2.0 * *x).max(-40.0).min(40.0);
        let t = y * std::f32::consts::LOG2_E + SHIFTER;
        let k = t - SHIFTER;
        let r = (y - k * LN2_HI) - k * LN2_LO;
        let mut p = C[0];
        for &c in &C[1..] {
            p = p * r + c;
        }
        let scale = f32::from_bits(t.to_bits().wrapping_add(127) << 23);
        *x = 1.0 - 2.0 / (p * scale + 1.0);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn tanh_f64(v: &mut [f64]) {
        super::tanh_f64_kernel(v)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn tanh_f32(v: &mut [f32]) {
        super::tanh_f32_kernel(v)
    }

    pub fn available() -> bool {
        use std::sync::OnceLock;
        static HAS: OnceLock<bool> = OnceLock::new();
        *HAS.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }
}

impl Scalar for f64 {
    fn tanh_in_place(v: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        if avx2::available() {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { avx2::tanh_f64(v) };
        }
        tanh_f64_kernel(v)
    }
}

impl Scalar for f32 {
    fn tanh_in_place(v: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        if avx2::available() {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { avx2::tanh_f32(v) };
        }
        tanh_f32_kernel(v)
    }
}
