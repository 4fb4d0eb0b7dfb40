//! Radix-2 complex FFT used by the spectral loss.

use alloc::vec::Vec;

use crate::scalar::Scalar;

pub struct Fft<S> {
    n: usize,
    cos: Vec<S>,
    sin: Vec<S>,
    rev: Vec<usize>,
}

impl<S: Scalar> Fft<S> {
    /// `n` must be a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size must be a power of two");
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let tau = 2.0 * core::f64::consts::PI / n as f64;
        let cos = (0..n / 2).map(|k| S::from_f64(libm::cos(tau * k as f64))).collect();
        let sin = (0..n / 2).map(|k| S::from_f64(libm::sin(tau * k as f64))).collect();
        Self { n, cos, sin, rev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform. `inverse` flips the exponent sign; no 1/n scaling is applied.
    pub fn process(&self, re: &mut [S], im: &mut [S], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.rev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * step];
                    let wi = if inverse { self.sin[k * step] } else { -self.sin[k * step] };
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }
}
