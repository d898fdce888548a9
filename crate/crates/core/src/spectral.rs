//! Real-input discrete Fourier transform kernels.
//!
//! Forward transforms are unnormalized, `X[k] = sum_t x[t] exp(-2 pi i k t / n)`,
//! and only bins `0..=n/2` are kept. Power-of-two lengths use an iterative
//! radix-2 FFT; other lengths fall back to a direct evaluation with a shared
//! twiddle table.

use std::f64::consts::PI;

/// Number of retained bins for a real signal of length `n`.
pub fn half_bins(n: usize) -> usize {
    n / 2 + 1
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|j| {
                let th = 2.0 * PI * j as f64 / n as f64;
                (th.cos(), th.sin())
            })
            .unzip();
        Twiddles { cos, sin }
    }
}

/// In-place iterative radix-2 complex FFT (forward sign). `re.len()` must be a power of two.
fn fft_pow2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let tw = Twiddles::new(n);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let wr = tw.cos[k * step];
                let wi = -tw.sin[k * step];
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Forward real DFT of `x`, writing bins `0..=n/2` to `out_re`/`out_im`.
pub fn rdft(x: &[f64], out_re: &mut [f64], out_im: &mut [f64]) {
    let n = x.len();
    let m = half_bins(n);
    debug_assert_eq!(out_re.len(), m);
    debug_assert_eq!(out_im.len(), m);
    if n.is_power_of_two() {
        let mut re = x.to_vec();
        let mut im = vec![0.0; n];
        fft_pow2(&mut re, &mut im);
        out_re.copy_from_slice(&re[..m]);
        out_im.copy_from_slice(&im[..m]);
    } else {
        let tw = Twiddles::new(n);
        for k in 0..m {
            let (mut sr, mut si) = (0.0, 0.0);
            let mut j = 0usize;
            for &xt in x {
                sr += xt * tw.cos[j];
                si -= xt * tw.sin[j];
                j += k;
                if j >= n {
                    j -= n;
                }
            }
            out_re[k] = sr;
            out_im[k] = si;
        }
    }
}

/// Adjoint of [`rdft`]: maps cotangents on the retained bins back to the real signal.
///
/// `out[t] = sum_k g_re[k] cos(2 pi k t / n) - g_im[k] sin(2 pi k t / n)`, which is
/// exactly the transpose of the forward map restricted to real inputs.
pub fn rdft_adjoint(g_re: &[f64], g_im: &[f64], out: &mut [f64]) {
    let n = out.len();
    let m = half_bins(n);
    debug_assert_eq!(g_re.len(), m);
    if n.is_power_of_two() {
        // Re(sum_k c_k e^{+i th}) = Re(FFT(conj(c)))
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        re[..m].copy_from_slice(g_re);
        for k in 0..m {
            im[k] = -g_im[k];
        }
        fft_pow2(&mut re, &mut im);
        out.copy_from_slice(&re);
    } else {
        let tw = Twiddles::new(n);
        for (t, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut j = 0usize;
            for k in 0..m {
                acc += g_re[k] * tw.cos[j] - g_im[k] * tw.sin[j];
                j += t;
                if j >= n {
                    j -= n;
                }
            }
            *o = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        (0..half_bins(n))
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(r, i), (t, &v)| {
                    let th = 2.0 * PI * (k * t) as f64 / n as f64;
                    (r + v * th.cos(), i - v * th.sin())
                })
            })
            .unzip()
    }

    #[test]
    fn pow2_and_direct_agree_with_naive() {
        for n in [1, 2, 3, 8, 12, 64, 96] {
            let x: Vec<f64> = (0..n).map(|t| ((t * 7 + 3) % 11) as f64 - 5.0).collect();
            let m = half_bins(n);
            let (mut re, mut im) = (vec![0.0; m], vec![0.0; m]);
            rdft(&x, &mut re, &mut im);
            let (nr, ni) = naive(&x);
            for k in 0..m {
                assert!((re[k] - nr[k]).abs() < 1e-9, "n={n} k={k}");
                assert!((im[k] - ni[k]).abs() < 1e-9, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn adjoint_is_transpose() {
        // <rdft(x), g> == <x, rdft_adjoint(g)>
        for n in [5, 16, 24, 32] {
            let x: Vec<f64> = (0..n).map(|t| (t as f64 * 0.37).sin()).collect();
            let m = half_bins(n);
            let g_re: Vec<f64> = (0..m).map(|k| (k as f64 * 1.3).cos()).collect();
            let g_im: Vec<f64> = (0..m).map(|k| (k as f64 * 0.7 + 0.2).sin()).collect();
            let (mut re, mut im) = (vec![0.0; m], vec![0.0; m]);
            rdft(&x, &mut re, &mut im);
            let lhs: f64 = (0..m).map(|k| re[k] * g_re[k] + im[k] * g_im[k]).sum();
            let mut back = vec![0.0; n];
            rdft_adjoint(&g_re, &g_im, &mut back);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "n={n}: {lhs} vs {rhs}");
        }
    }
}
