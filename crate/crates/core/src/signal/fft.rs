//! Radix-2 FFT over f64 complex values.

use num_complex::Complex64;
use std::f64::consts::PI;

/// In-order iterative Cooley-Tukey FFT. Panics unless `x.len()` is a power
/// of two (length 0 is rejected too).
pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    fft_in_place(&mut buf, false);
    buf
}

/// Inverse FFT with 1/n normalization, so `ifft(fft(x)) == x`.
pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    fft_in_place(&mut buf, true);
    let n = buf.len() as f64;
    for v in &mut buf {
        *v /= n;
    }
    buf
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    assert!(
        n > 0 && n.is_power_of_two(),
        "fft length {n} is not a power of two"
    );
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let wlen = Complex64::from_polar(1.0, ang);
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for i in 0..len / 2 {
                let a = buf[start + i];
                let b = buf[start + i + len / 2] * w;
                buf[start + i] = a + b;
                buf[start + i + len / 2] = a - b;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

/// FFT of a real signal, zero-padded or truncated to `n` points.
pub fn fft_real(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (i, &v) in x.iter().take(n).enumerate() {
        buf[i] = Complex64::new(v, 0.0);
    }
    fft_in_place(&mut buf, false);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let y = fft(&[c(1.0), c(0.0), c(0.0), c(0.0)]);
        for v in y {
            assert!((v - c(1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_is_dc_only() {
        let y = fft(&[c(1.0); 4]);
        assert!((y[0] - c(4.0)).norm() < 1e-12);
        for v in &y[1..] {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_on_random_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 64;
        let x: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let fast = fft(&x);
        // Naive O(n^2) DFT oracle.
        for k in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * j) as f64 / n as f64;
                acc += v * Complex64::from_polar(1.0, ang);
            }
            assert!((fast[k] - acc).norm() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn ifft_inverts_fft() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x: Vec<Complex64> = (0..128)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let back = ifft(&fft(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn parseval_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Complex64> = (0..256)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
            .collect();
        let y = fft(&x);
        let time: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let freq: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64;
        assert!((time - freq).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "not a power of two")]
    fn rejects_non_power_of_two() {
        fft(&[c(1.0), c(2.0), c(3.0)]);
    }
}
