//! Elementwise nonlinearities applied in place over slices.
//!
//! Each function computes every element with the same arithmetic regardless
//! of its position in the slice or the slice length, so results do not
//! depend on how a tensor is batched. On x86-64 builds with AVX2 and FMA,
//! `f32` slices use eight-lane polynomial approximations with errors of
//! order 1e-7; other element types call `libm` per element.

use crate::scalar::Scalar;

macro_rules! dispatch {
    ($x:ident, $simd:path, $scalar:expr) => {{
        #[cfg(simd_f32)]
        if let Some(v) = S::as_f32_mut($x) {
            $simd(v);
            return;
        }
        $x.iter_mut().for_each(|v| *v = $scalar(*v));
    }};
}

pub fn exp<S: Scalar>(x: &mut [S]) {
    dispatch!(x, simd::exp, S::exp)
}

pub fn sigmoid<S: Scalar>(x: &mut [S]) {
    dispatch!(x, simd::sigmoid, S::sigmoid)
}

pub fn tanh<S: Scalar>(x: &mut [S]) {
    dispatch!(x, simd::tanh, S::tanh)
}

/// Exact-form GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu<S: Scalar>(x: &mut [S]) {
    dispatch!(x, simd::gelu, gelu_scalar)
}

/// Derivative of [`gelu`], `Φ(x) + x·φ(x)`, replacing `x` in place.
pub fn gelu_grad<S: Scalar>(x: &mut [S]) {
    dispatch!(x, simd::gelu_grad, gelu_grad_scalar)
}

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (x * S::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let cdf = half * (S::ONE + (x * S::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * S::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[cfg(simd_f32)]
mod simd {
    use core::arch::x86_64::*;

    /// Applies `f` to full eight-lane blocks and to a zero-padded copy of the
    /// remainder, so the tail goes through the same vector code.
    #[inline(always)]
    fn map(x: &mut [f32], f: impl Fn(__m256) -> __m256) {
        let mut blocks = x.chunks_exact_mut(8);
        for b in &mut blocks {
            // SAFETY: `b` holds exactly eight elements.
            unsafe { _mm256_storeu_ps(b.as_mut_ptr(), f(_mm256_loadu_ps(b.as_ptr()))) };
        }
        let rest = blocks.into_remainder();
        if !rest.is_empty() {
            let mut buf = [0f32; 8];
            buf[..rest.len()].copy_from_slice(rest);
            // SAFETY: `buf` holds eight elements.
            unsafe { _mm256_storeu_ps(buf.as_mut_ptr(), f(_mm256_loadu_ps(buf.as_ptr()))) };
            let n = rest.len();
            rest.copy_from_slice(&buf[..n]);
        }
    }

    #[inline(always)]
    fn splat(v: f32) -> __m256 {
        // SAFETY: AVX is enabled whenever this module is compiled.
        unsafe { _mm256_set1_ps(v) }
    }

    /// Range reduction by powers of two and a degree-5 polynomial on
    /// `|r| ≤ ln2/2`. Inputs below the smallest normal result give zero and
    /// NaN propagates.
    #[inline(always)]
    fn exp8(x: __m256) -> __m256 {
        // SAFETY: AVX2 and FMA are enabled whenever this module is compiled.
        unsafe {
            let underflow = _mm256_cmp_ps::<_CMP_LT_OQ>(x, splat(-87.336_54));
            // `min/max` return their second operand when either is NaN.
            let x = _mm256_min_ps(splat(88.376_26), x);
            let x = _mm256_max_ps(splat(-87.336_54), x);
            let n = _mm256_floor_ps(_mm256_fmadd_ps(x, splat(core::f32::consts::LOG2_E), splat(0.5)));
            let r = _mm256_fnmadd_ps(n, splat(0.693_359_4), x);
            let r = _mm256_fnmadd_ps(n, splat(-2.121_944_4e-4), r);
            let mut p = splat(1.987_569_1e-4);
            p = _mm256_fmadd_ps(p, r, splat(1.398_2e-3));
            p = _mm256_fmadd_ps(p, r, splat(8.333_452e-3));
            p = _mm256_fmadd_ps(p, r, splat(4.166_579_6e-2));
            p = _mm256_fmadd_ps(p, r, splat(0.166_666_65));
            p = _mm256_fmadd_ps(p, r, splat(0.5));
            let y = _mm256_add_ps(_mm256_fmadd_ps(_mm256_mul_ps(p, r), r, r), splat(1.0));
            let bits = _mm256_slli_epi32::<23>(_mm256_add_epi32(_mm256_cvtps_epi32(n), _mm256_set1_epi32(127)));
            let y = _mm256_mul_ps(y, _mm256_castsi256_ps(bits));
            _mm256_andnot_ps(underflow, y)
        }
    }

    #[inline(always)]
    fn sigmoid8(x: __m256) -> __m256 {
        // SAFETY: AVX is enabled whenever this module is compiled.
        unsafe {
            let e = exp8(_mm256_sub_ps(_mm256_setzero_ps(), x));
            _mm256_div_ps(splat(1.0), _mm256_add_ps(splat(1.0), e))
        }
    }

    /// Odd polynomial near zero, `1 − 2/(e^{2|x|} + 1)` elsewhere.
    #[inline(always)]
    fn tanh8(x: __m256) -> __m256 {
        // SAFETY: AVX2 and FMA are enabled whenever this module is compiled.
        unsafe {
            let sign = _mm256_and_ps(x, splat(-0.0));
            let ax = _mm256_andnot_ps(splat(-0.0), x);
            let z = _mm256_mul_ps(x, x);
            let mut p = splat(-5.704_988_7e-3);
            p = _mm256_fmadd_ps(p, z, splat(2.063_909e-2));
            p = _mm256_fmadd_ps(p, z, splat(-5.373_971_6e-2));
            p = _mm256_fmadd_ps(p, z, splat(0.133_314_42));
            p = _mm256_fmadd_ps(p, z, splat(-0.333_332_8));
            let small = _mm256_fmadd_ps(_mm256_mul_ps(p, z), x, x);
            let e = exp8(_mm256_add_ps(ax, ax));
            let large = _mm256_sub_ps(splat(1.0), _mm256_div_ps(splat(2.0), _mm256_add_ps(e, splat(1.0))));
            let large = _mm256_or_ps(large, sign);
            let is_small = _mm256_cmp_ps::<_CMP_LT_OQ>(ax, splat(0.625));
            _mm256_blendv_ps(large, small, is_small)
        }
    }

    /// `erfc(|x|)` from a Chebyshev fit in `t = 1/(1 + |x|/2)` with
    /// relative error below about 2e-7 everywhere.
    #[inline(always)]
    fn erfc_abs8(ax: __m256) -> __m256 {
        const C: [f32; 10] = [
            0.170_872_77,
            -0.822_152_23,
            1.488_515_9,
            -1.135_204,
            0.278_868_07,
            -0.186_288_06,
            0.096_784_18,
            0.374_091_96,
            1.000_023_7,
            -1.265_512_2,
        ];
        // SAFETY: AVX2 and FMA are enabled whenever this module is compiled.
        unsafe {
            let t = _mm256_div_ps(splat(1.0), _mm256_fmadd_ps(ax, splat(0.5), splat(1.0)));
            let mut p = splat(C[0]);
            for &c in &C[1..] {
                p = _mm256_fmadd_ps(p, t, splat(c));
            }
            let arg = _mm256_fnmadd_ps(ax, ax, p);
            _mm256_mul_ps(t, exp8(arg))
        }
    }

    /// Standard normal CDF, with the tail taken directly for negative inputs.
    #[inline(always)]
    fn cdf8(x: __m256) -> __m256 {
        // SAFETY: AVX is enabled whenever this module is compiled.
        unsafe {
            let ax = _mm256_andnot_ps(splat(-0.0), x);
            let tail = _mm256_mul_ps(splat(0.5), erfc_abs8(_mm256_mul_ps(ax, splat(core::f32::consts::FRAC_1_SQRT_2))));
            let negative = _mm256_cmp_ps::<_CMP_LT_OQ>(x, _mm256_setzero_ps());
            _mm256_blendv_ps(_mm256_sub_ps(splat(1.0), tail), tail, negative)
        }
    }

    #[inline(always)]
    fn gelu8(x: __m256) -> __m256 {
        // SAFETY: AVX is enabled whenever this module is compiled.
        unsafe { _mm256_mul_ps(x, cdf8(x)) }
    }

    #[inline(always)]
    fn gelu_grad8(x: __m256) -> __m256 {
        // SAFETY: AVX2 and FMA are enabled whenever this module is compiled.
        unsafe {
            let e = exp8(_mm256_mul_ps(splat(-0.5), _mm256_mul_ps(x, x)));
            let pdf = _mm256_mul_ps(e, splat(0.398_942_3));
            _mm256_fmadd_ps(x, pdf, cdf8(x))
        }
    }

    pub fn exp(x: &mut [f32]) {
        map(x, exp8)
    }

    pub fn sigmoid(x: &mut [f32]) {
        map(x, sigmoid8)
    }

    pub fn tanh(x: &mut [f32]) {
        map(x, tanh8)
    }

    pub fn gelu(x: &mut [f32]) {
        map(x, gelu8)
    }

    pub fn gelu_grad(x: &mut [f32]) {
        map(x, gelu_grad8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn grid() -> impl Iterator<Item = f32> {
        (-20_000..=20_000).map(|i| i as f32 * 1e-3).chain([-200.0, -88.0, -87.0, 80.0, 88.0])
    }

    fn check(f: fn(&mut [f32]), reference: fn(f64) -> f64, abs: f64, rel: f64) {
        let xs: Vec<f32> = grid().collect();
        let mut ys = xs.clone();
        f(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let r = reference(x as f64);
            let err = (y as f64 - r).abs();
            assert!(err <= abs + rel * r.abs(), "x={x} y={y} ref={r}");
        }
    }

    #[test]
    fn exp_accuracy() {
        check(exp, libm::exp, 1e-37, 4e-7);
        let mut v = [f32::NEG_INFINITY, -1000.0, f32::NAN, 0.0];
        exp(&mut v);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.0);
        assert!(v[2].is_nan());
        assert_eq!(v[3], 1.0);
    }

    #[test]
    fn sigmoid_tanh_gelu_accuracy() {
        check(sigmoid, |x| 1.0 / (1.0 + libm::exp(-x)), 1e-37, 5e-7);
        check(tanh, libm::tanh, 1e-7, 5e-7);
        check(gelu, |x| 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)), 1e-7, 1e-6);
        check(gelu_grad, gelu_grad_scalar::<f64>, 2e-7, 1e-6);
    }

    #[test]
    fn result_independent_of_position() {
        let xs: Vec<f32> = (0..37).map(|i| (i as f32 - 18.0) * 0.37).collect();
        let mut whole = xs.clone();
        tanh(&mut whole);
        for (i, &x) in xs.iter().enumerate() {
            let mut one = [x];
            tanh(&mut one);
            assert_eq!(one[0].to_bits(), whole[i].to_bits());
        }
    }
}
