//! `i8 x i8 -> i32` dot products with runtime instruction-set dispatch.
//!
//! Every path must produce exactly the same integer as the scalar loop. Sums
//! wrap on overflow in all paths, which keeps them identical even past
//! `i32::MAX` (unreachable for `k` below ~133k anyway).

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Scalar,
    #[cfg(target_arch = "x86_64")]
    Avx2,
}

impl Kernel {
    /// Best kernel for the running CPU, probed once.
    pub fn detect() -> Kernel {
        static DETECTED: OnceLock<Kernel> = OnceLock::new();
        *DETECTED.get_or_init(|| {
            #[cfg(target_arch = "x86_64")]
            if std::is_x86_feature_detected!("avx2") {
                return Kernel::Avx2;
            }
            Kernel::Scalar
        })
    }

    /// Every kernel this CPU can run.
    pub fn available() -> Vec<Kernel> {
        #[allow(unused_mut)]
        let mut out = vec![Kernel::Scalar];
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            out.push(Kernel::Avx2);
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Scalar => "scalar",
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx2 => "avx2",
        }
    }

    #[inline]
    pub fn dot(self, a: &[i8], b: &[i8]) -> i32 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            Kernel::Scalar => dot_scalar(a, b),
            // SAFETY: Avx2 is only constructed after the feature probe succeeds.
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx2 => unsafe { dot_avx2(a, b) },
        }
    }
}

#[inline]
fn dot_scalar(a: &[i8], b: &[i8]) -> i32 {
    a.iter()
        .zip(b)
        .fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x as i32 * y as i32))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[i8], b: &[i8]) -> i32 {
    use std::arch::x86_64::*;

    let n = a.len().min(b.len());
    let chunks = n / 16;
    let mut acc = _mm256_setzero_si256();
    for c in 0..chunks {
        let pa = a.as_ptr().add(c * 16) as *const __m128i;
        let pb = b.as_ptr().add(c * 16) as *const __m128i;
        let wa = _mm256_cvtepi8_epi16(_mm_loadu_si128(pa));
        let wb = _mm256_cvtepi8_epi16(_mm_loadu_si128(pb));
        // Pairwise i16 products summed into i32 lanes; |pair| <= 2 * 127^2 fits.
        acc = _mm256_add_epi32(acc, _mm256_madd_epi16(wa, wb));
    }
    let lo = _mm256_castsi256_si128(acc);
    let hi = _mm256_extracti128_si256(acc, 1);
    let s = _mm_add_epi32(lo, hi);
    let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b01_00_11_10));
    let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b10_11_00_01));
    let mut total = _mm_cvtsi128_si32(s);
    for i in chunks * 16..n {
        total = total.wrapping_add(a[i] as i32 * b[i] as i32);
    }
    total
}
