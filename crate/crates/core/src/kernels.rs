//! Dense matrix kernels on row-major slices.
//!
//! Every output element is reduced in an order that depends only on the
//! reduction length, never on the number of rows or columns being computed
//! or on tile position, so a row computed alone is bit-identical to the same
//! row computed as part of a larger product.
//!
//! On x86-64 builds with AVX2 and FMA enabled, `f32` products use explicit
//! SIMD variants that keep the same guarantee with their own fixed order.

use alloc::vec;

use crate::scalar::Scalar;

const LANES: usize = 8;

#[inline(always)]
fn reduce<S: Scalar>(acc: &[S; LANES]) -> S {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[inline(always)]
fn dot_tile<S: Scalar, const MR: usize, const NR: usize>(
    a: [&[S]; MR],
    b: [&[S]; NR],
    k: usize,
) -> [[S; NR]; MR] {
    let mut acc = [[[S::ZERO; LANES]; NR]; MR];
    let chunks = k / LANES;
    for q in 0..chunks {
        let off = q * LANES;
        let av: [&[S; LANES]; MR] =
            core::array::from_fn(|r| a[r][off..off + LANES].try_into().unwrap());
        let bv: [&[S; LANES]; NR] =
            core::array::from_fn(|c| b[c][off..off + LANES].try_into().unwrap());
        for r in 0..MR {
            for c in 0..NR {
                for l in 0..LANES {
                    acc[r][c][l] += av[r][l] * bv[c][l];
                }
            }
        }
    }
    let mut out = [[S::ZERO; NR]; MR];
    for r in 0..MR {
        for c in 0..NR {
            let mut s = reduce(&acc[r][c]);
            for p in chunks * LANES..k {
                s += a[r][p] * b[c][p];
            }
            out[r][c] = s;
        }
    }
    out
}

/// Dot product with the same reduction order as [`gemm_nt`].
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len());
    #[cfg(simd_f32)]
    if let (Some(a), Some(b)) = (S::as_f32(a), S::as_f32(b)) {
        return S::from_f64(simd::dot(a, b) as f64);
    }
    dot_tile::<S, 1, 1>([a], [b], a.len())[0][0]
}

#[inline(always)]
fn store<S: Scalar>(c: &mut [S], idx: usize, v: S, accumulate: bool) {
    if accumulate {
        c[idx] += v;
    } else {
        c[idx] = v;
    }
}

/// `C[m×n] (+)= A[m×k] · B[n×k]ᵀ` with leading dimensions `lda`, `ldb`, `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nt<S: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[S],
    lda: usize,
    b: &[S],
    ldb: usize,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
) {
    #[cfg(simd_f32)]
    if let (Some(a), Some(b)) = (S::as_f32(a), S::as_f32(b)) {
        let c = S::as_f32_mut(c).unwrap();
        return simd::gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    }
    const MR: usize = 4;
    const NR: usize = 4;
    let arow = |i: usize| &a[i * lda..i * lda + k];
    let brow = |j: usize| &b[j * ldb..j * ldb + k];
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    let mut i = 0;
    while i < m_main {
        let ar: [&[S]; MR] = core::array::from_fn(|r| arow(i + r));
        let mut j = 0;
        while j < n_main {
            let br: [&[S]; NR] = core::array::from_fn(|q| brow(j + q));
            let t = dot_tile::<S, MR, NR>(ar, br, k);
            for (r, row) in t.iter().enumerate() {
                for (q, v) in row.iter().enumerate() {
                    store(c, (i + r) * ldc + j + q, *v, accumulate);
                }
            }
            j += NR;
        }
        for j in n_main..n {
            let t = dot_tile::<S, MR, 1>(ar, [brow(j)], k);
            for (r, row) in t.iter().enumerate() {
                store(c, (i + r) * ldc + j, row[0], accumulate);
            }
        }
        i += MR;
    }
    for i in m_main..m {
        let ar = [arow(i)];
        let mut j = 0;
        while j < n_main {
            let br: [&[S]; NR] = core::array::from_fn(|q| brow(j + q));
            let t = dot_tile::<S, 1, NR>(ar, br, k);
            for (q, v) in t[0].iter().enumerate() {
                store(c, i * ldc + j + q, *v, accumulate);
            }
            j += NR;
        }
        for j in n_main..n {
            let t = dot_tile::<S, 1, 1>(ar, [brow(j)], k);
            store(c, i * ldc + j, t[0][0], accumulate);
        }
    }
}

/// `C[m×n] (+)= A[m×k] · B[k×n]`, accumulated row-wise over `k` in order.
///
/// Exact zeros in `A` are skipped, which leaves finite results unchanged.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nn<S: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[S],
    lda: usize,
    b: &[S],
    ldb: usize,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
) {
    #[cfg(simd_f32)]
    if let (Some(a), Some(b)) = (S::as_f32(a), S::as_f32(b)) {
        let c = S::as_f32_mut(c).unwrap();
        return simd::gemm_nn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    }
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        if !accumulate {
            crow.iter_mut().for_each(|v| *v = S::ZERO);
        }
        let arow = &a[i * lda..i * lda + k];
        for (p, &s) in arow.iter().enumerate() {
            if s == S::ZERO {
                continue;
            }
            let brow = &b[p * ldb..p * ldb + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += s * bv;
            }
        }
    }
}

/// `C[m×n] (+)= A[k×m]ᵀ · B[k×n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_tn<S: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[S],
    lda: usize,
    b: &[S],
    ldb: usize,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
) {
    #[cfg(simd_f32)]
    if let (Some(a), Some(b)) = (S::as_f32(a), S::as_f32(b)) {
        let c = S::as_f32_mut(c).unwrap();
        return simd::gemm_tn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    }
    let mut at = vec![S::ZERO; m * k];
    transpose_into(k, m, a, lda, &mut at);
    let mut bt = vec![S::ZERO; n * k];
    transpose_into(k, n, b, ldb, &mut bt);
    gemm_nt(m, n, k, &at, k, &bt, k, c, ldc, accumulate);
}

/// Writes the transpose of the `rows×cols` matrix `src` into `dst` (`cols×rows`).
pub fn transpose_into<S: Scalar>(rows: usize, cols: usize, src: &[S], lds: usize, dst: &mut [S]) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * lds + c];
                }
            }
        }
    }
}

#[cfg(simd_f32)]
mod simd {
    //! AVX2/FMA kernels for `f32`.
    //!
    //! `gemm_nt` accumulates eight lanes with fused multiply-add over `k`,
    //! folds the lanes in a fixed tree and adds the `k % 8` tail serially.
    //! `gemm_nn` adds `a·b` (unfused) row by row in `k` order, so vector
    //! lanes and the scalar tail round identically.

    use core::arch::x86_64::*;

    /// Lane sum in the order `((x0+x1)+(x2+x3)) + ((x4+x5)+(x6+x7))`.
    #[inline(always)]
    unsafe fn fold(v: __m256) -> f32 {
        let mut x = [0f32; 8];
        _mm256_storeu_ps(x.as_mut_ptr(), v);
        ((x[0] + x[1]) + (x[2] + x[3])) + ((x[4] + x[5]) + (x[6] + x[7]))
    }

    /// Four lane sums at once, each in the same order as [`fold`].
    #[inline(always)]
    unsafe fn fold4(a: __m256, b: __m256, c: __m256, d: __m256) -> __m128 {
        let ab = _mm256_hadd_ps(a, b);
        let cd = _mm256_hadd_ps(c, d);
        let abcd = _mm256_hadd_ps(ab, cd);
        _mm_add_ps(_mm256_castps256_ps128(abcd), _mm256_extractf128_ps(abcd, 1))
    }

    /// # Safety
    /// Every slice in `a` and `b` holds at least `k` elements.
    #[inline(always)]
    unsafe fn accumulate<const MR: usize, const NR: usize>(a: &[&[f32]; MR], b: &[&[f32]; NR], k: usize) -> [[__m256; NR]; MR] {
        let mut acc = [[_mm256_setzero_ps(); NR]; MR];
        for q in 0..k / 8 {
            let bv: [__m256; NR] = core::array::from_fn(|c| _mm256_loadu_ps(b[c].as_ptr().add(q * 8)));
            for r in 0..MR {
                let av = _mm256_loadu_ps(a[r].as_ptr().add(q * 8));
                for c in 0..NR {
                    acc[r][c] = _mm256_fmadd_ps(av, bv[c], acc[r][c]);
                }
            }
        }
        acc
    }

    /// # Safety
    /// Every slice in `a` and `b` holds at least `k` elements.
    #[inline(always)]
    unsafe fn tile<const MR: usize, const NR: usize>(a: [&[f32]; MR], b: [&[f32]; NR], k: usize) -> [[f32; NR]; MR] {
        let acc = accumulate::<MR, NR>(&a, &b, k);
        let mut out = [[0f32; NR]; MR];
        for r in 0..MR {
            for c in 0..NR {
                out[r][c] = fold(acc[r][c]) + tail(a[r], b[c], k);
            }
        }
        out
    }

    #[inline(always)]
    fn tail(a: &[f32], b: &[f32], k: usize) -> f32 {
        let mut s = 0.0;
        for p in k - k % 8..k {
            s += a[p] * b[p];
        }
        s
    }

    /// Four columns per row; same per-element arithmetic as [`tile`].
    ///
    /// # Safety
    /// Every slice in `a` and `b` holds at least `k` elements.
    #[inline(always)]
    unsafe fn tile4<const MR: usize>(a: [&[f32]; MR], b: [&[f32]; 4], k: usize) -> [[f32; 4]; MR] {
        let acc = accumulate::<MR, 4>(&a, &b, k);
        let mut out = [[0f32; 4]; MR];
        for r in 0..MR {
            _mm_storeu_ps(out[r].as_mut_ptr(), fold4(acc[r][0], acc[r][1], acc[r][2], acc[r][3]));
            if !k.is_multiple_of(8) {
                for c in 0..4 {
                    out[r][c] += tail(a[r], b[c], k);
                }
            }
        }
        out
    }

    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        let k = a.len().min(b.len());
        // SAFETY: both slices hold at least `k` elements.
        unsafe { tile::<1, 1>([a], [b], k)[0][0] }
    }

    #[inline(always)]
    fn put(c: &mut [f32], idx: usize, v: f32, accumulate: bool) {
        if accumulate {
            c[idx] += v;
        } else {
            c[idx] = v;
        }
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn rows<const MR: usize>(
        i: usize,
        n: usize,
        k: usize,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        ldc: usize,
        accumulate: bool,
    ) {
        const NR: usize = 4;
        let ar: [&[f32]; MR] = core::array::from_fn(|r| &a[(i + r) * lda..(i + r) * lda + k]);
        let brow = |j: usize| &b[j * ldb..j * ldb + k];
        let n_main = n - n % NR;
        let mut j = 0;
        while j < n_main {
            let br: [&[f32]; NR] = core::array::from_fn(|q| brow(j + q));
            // SAFETY: every row slice above has length `k`.
            let t = unsafe { tile4::<MR>(ar, br, k) };
            for (r, row) in t.iter().enumerate() {
                for (q, v) in row.iter().enumerate() {
                    put(c, (i + r) * ldc + j + q, *v, accumulate);
                }
            }
            j += NR;
        }
        for j in n_main..n {
            // SAFETY: as above.
            let t = unsafe { tile::<MR, 1>(ar, [brow(j)], k) };
            for (r, row) in t.iter().enumerate() {
                put(c, (i + r) * ldc + j, row[0], accumulate);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn gemm_nt(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        ldc: usize,
        accumulate: bool,
    ) {
        const MR: usize = 4;
        let m_main = m - m % MR;
        for i in (0..m_main).step_by(MR) {
            rows::<MR>(i, n, k, a, lda, b, ldb, c, ldc, accumulate);
        }
        for i in m_main..m {
            rows::<1>(i, n, k, a, lda, b, ldb, c, ldc, accumulate);
        }
    }

    #[allow(clippy::too_many_arguments)]
    /// Mask selecting the first `len` of eight lanes.
    #[inline(always)]
    unsafe fn lane_mask(len: usize) -> __m256i {
        let idx = _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7);
        _mm256_cmpgt_epi32(_mm256_set1_epi32(len as i32), idx)
    }

    /// `MR` rows of `C = Aᵀ·B` over sixteen columns starting at `j`, the
    /// last `width ≤ 16` of them valid.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn tn_tile<const MR: usize>(
        i: usize,
        j: usize,
        width: usize,
        k: usize,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        ldc: usize,
        accumulate: bool,
    ) {
        let m0 = lane_mask(width.min(8));
        let m1 = lane_mask(width.saturating_sub(8));
        let mut acc = [[_mm256_setzero_ps(); 2]; MR];
        let (ap, bp) = (a.as_ptr(), b.as_ptr());
        for p in 0..k {
            let brow = bp.add(p * ldb + j);
            let b0 = _mm256_maskload_ps(brow, m0);
            let b1 = _mm256_maskload_ps(brow.add(8), m1);
            for (r, row) in acc.iter_mut().enumerate() {
                let av = _mm256_broadcast_ss(&*ap.add(p * lda + i + r));
                row[0] = _mm256_fmadd_ps(av, b0, row[0]);
                row[1] = _mm256_fmadd_ps(av, b1, row[1]);
            }
        }
        for (r, row) in acc.iter().enumerate() {
            let cp = c.as_mut_ptr().add((i + r) * ldc + j);
            let (mut v0, mut v1) = (row[0], row[1]);
            if accumulate {
                v0 = _mm256_add_ps(v0, _mm256_maskload_ps(cp, m0));
                v1 = _mm256_add_ps(v1, _mm256_maskload_ps(cp.add(8), m1));
            }
            _mm256_maskstore_ps(cp, m0, v0);
            _mm256_maskstore_ps(cp.add(8), m1, v1);
        }
    }

    /// `C = Aᵀ·B` with `A: k×m` and `B: k×n`, accumulating over `k` in order.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm_tn(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        ldc: usize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(k == 0 || (a.len() >= (k - 1) * lda + m && b.len() >= (k - 1) * ldb + n));
        assert!(c.len() >= (m - 1) * ldc + n);
        const MR: usize = 6;
        for j in (0..n).step_by(16) {
            let width = (n - j).min(16);
            let mut i = 0;
            // SAFETY: the assertions above bound every index touched by the
            // tiles, and masked lanes beyond `width` are never accessed.
            unsafe {
                while i + MR <= m {
                    tn_tile::<MR>(i, j, width, k, a, lda, b, ldb, c, ldc, accumulate);
                    i += MR;
                }
                while i < m {
                    tn_tile::<1>(i, j, width, k, a, lda, b, ldb, c, ldc, accumulate);
                    i += 1;
                }
            }
        }
    }

    pub fn gemm_nn(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        ldc: usize,
        accumulate: bool,
    ) {
        const W: usize = 32;
        for i in 0..m {
            let arow = &a[i * lda..i * lda + k];
            let crow = &mut c[i * ldc..i * ldc + n];
            if !accumulate {
                crow.fill(0.0);
            }
            let n_main = n - n % W;
            for j0 in (0..n_main).step_by(W) {
                // SAFETY: `crow` and each `b` row hold `j0 + W <= n` elements
                // from the offsets used here.
                unsafe {
                    let cp = crow.as_mut_ptr().add(j0);
                    let mut acc: [__m256; 4] = core::array::from_fn(|x| _mm256_loadu_ps(cp.add(8 * x)));
                    for (p, &s) in arow.iter().enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let sv = _mm256_set1_ps(s);
                        let bp = b[p * ldb + j0..p * ldb + j0 + W].as_ptr();
                        for (x, v) in acc.iter_mut().enumerate() {
                            *v = _mm256_add_ps(*v, _mm256_mul_ps(sv, _mm256_loadu_ps(bp.add(8 * x))));
                        }
                    }
                    for (x, v) in acc.iter().enumerate() {
                        _mm256_storeu_ps(cp.add(8 * x), *v);
                    }
                }
            }
            let tail = &mut crow[n_main..];
            if tail.is_empty() {
                continue;
            }
            for (p, &s) in arow.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                let brow = &b[p * ldb + n_main..p * ldb + n];
                for (cv, &bv) in tail.iter_mut().zip(brow) {
                    *cv += s * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn seq(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn all_forms_agree_with_naive_product() {
        for &(m, n, k) in &[(1, 1, 1), (5, 7, 3), (9, 6, 17), (4, 4, 8), (13, 21, 35)] {
            let a = seq(m * k, 1);
            let b = seq(k * n, 2);
            let want = naive(m, n, k, &a, &b);

            let mut bt = vec![0.0; n * k];
            transpose_into(k, n, &b, n, &mut bt);
            let mut c = vec![0.0; m * n];
            gemm_nt(m, n, k, &a, k, &bt, k, &mut c, n, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            gemm_nn(m, n, k, &a, k, &b, n, &mut c, n, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            let mut at = vec![0.0; m * k];
            transpose_into(m, k, &a, k, &mut at);
            gemm_tn(m, n, k, &at, m, &b, n, &mut c, n, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            gemm_tn(m, n, k, &at, m, &b, n, &mut c, n, true);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - 2.0 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_precision_forms_agree_with_naive_product() {
        for &(m, n, k) in &[(1, 1, 1), (7, 5, 3), (13, 21, 35), (6, 16, 9), (19, 40, 70)] {
            let a = seq(m * k, 3);
            let b = seq(k * n, 4);
            let want = naive(m, n, k, &a, &b);
            let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            let (af, bf) = (f(&a), f(&b));
            let mut at = vec![0.0f32; m * k];
            transpose_into(m, k, &af, k, &mut at);
            let mut bt = vec![0.0f32; n * k];
            transpose_into(k, n, &bf, n, &mut bt);
            let check = |c: &[f32], scale: f64| {
                for (x, y) in c.iter().zip(&want) {
                    assert!((*x as f64 - scale * y).abs() < 1e-4 * (1.0 + y.abs()), "{m}x{n}x{k}");
                }
            };
            let mut c = vec![0.0f32; m * n];
            gemm_nt(m, n, k, &af, k, &bt, k, &mut c, n, false);
            check(&c, 1.0);
            gemm_nn(m, n, k, &af, k, &bf, n, &mut c, n, false);
            check(&c, 1.0);
            gemm_tn(m, n, k, &at, m, &bf, n, &mut c, n, false);
            check(&c, 1.0);
            gemm_tn(m, n, k, &at, m, &bf, n, &mut c, n, true);
            check(&c, 2.0);
        }
    }

    #[test]
    fn single_rows_match_full_product_bitwise() {
        let (m, n, k) = (11, 9, 37);
        let a: Vec<f32> = seq(m * k, 3).into_iter().map(|v| v as f32).collect();
        let b: Vec<f32> = seq(n * k, 4).into_iter().map(|v| v as f32).collect();
        let mut full = vec![0.0f32; m * n];
        gemm_nt(m, n, k, &a, k, &b, k, &mut full, n, false);
        for i in 0..m {
            let mut row = vec![0.0f32; n];
            gemm_nt(1, n, k, &a[i * k..], k, &b, k, &mut row, n, false);
            assert_eq!(&row[..], &full[i * n..(i + 1) * n]);
            for j in 0..n {
                assert_eq!(dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]), full[i * n + j]);
            }
        }
    }
}
