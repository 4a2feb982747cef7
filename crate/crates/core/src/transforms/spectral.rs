//! DFT helpers for the spectral transforms.
//!
//! Convention: unnormalized forward, 1/N inverse.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward DFT of a real row.
pub fn dft(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_forward(x.len());
        fft.process(&mut buf);
    });
    buf
}

/// Inverse DFT (scaled by 1/N), real part.
pub fn idft(spectrum: &[Complex<f64>]) -> Vec<f64> {
    idft_complex(spectrum).iter().map(|c| c.re).collect()
}

/// Inverse DFT (scaled by 1/N), complex output.
pub fn idft_complex(spectrum: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = spectrum.len();
    let mut buf = spectrum.to_vec();
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_inverse(n);
        fft.process(&mut buf);
    });
    let scale = 1.0 / n as f64;
    for c in buf.iter_mut() {
        *c *= scale;
    }
    buf
}

/// Analytic signal a(t) = x(t) + i*H[x](t) via one-sided spectrum doubling.
pub fn analytic(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    let mut spec = dft(x);
    let half = n / 2;
    for (k, c) in spec.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == half) {
            // DC and Nyquist stay single
        } else if k < half || (n % 2 == 1 && k == half) {
            *c *= 2.0;
        } else {
            *c = Complex::new(0.0, 0.0);
        }
    }
    idft_complex(&spec)
}

/// Hilbert transform H[x] (imaginary part of the analytic signal).
pub fn hilbert(x: &[f64]) -> Vec<f64> {
    analytic(x).iter().map(|c| c.im).collect()
}

/// Applies a real per-bin gain (defined on bins 0..=N/2, mirrored onto the
/// conjugate half) to a real row in the frequency domain.
pub fn filter_with_gain(x: &[f64], gain_half: &[f64]) -> Vec<f64> {
    let n = x.len();
    debug_assert_eq!(gain_half.len(), n / 2 + 1);
    let mut spec = dft(x);
    for k in 0..n {
        let kh = if k <= n / 2 { k } else { n - k };
        spec[k] *= gain_half[kh];
    }
    idft(&spec)
}

/// Energy of a real row restricted to bins whose index (folded onto 0..=N/2)
/// lies in [lo_bin, hi_bin], using the 1/N Parseval normalization.
pub fn band_energy(x: &[f64], lo_bin: f64, hi_bin: f64) -> f64 {
    let n = x.len();
    let spec = dft(x);
    let mut acc = 0.0;
    for (k, c) in spec.iter().enumerate() {
        let kh = if k <= n / 2 { k as f64 } else { (n - k) as f64 };
        if kh >= lo_bin && kh <= hi_bin {
            acc += c.norm_sqr();
        }
    }
    acc / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_signal_is_all_dc() {
        let spec = dft(&[2.5; 16]);
        assert!((spec[0].re - 40.0).abs() < 1e-9);
        for c in &spec[1..] {
            assert!(c.norm() < 1e-9);
        }
    }

    #[test]
    fn roundtrip_and_parseval_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let x: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let back = idft(&dft(&x));
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-5);
            }
            let time_energy: f64 = x.iter().map(|v| v * v).sum();
            let spec_energy: f64 =
                dft(&x).iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
            assert!((time_energy - spec_energy).abs() / time_energy < 1e-4);
        }
    }

    #[test]
    fn hilbert_of_cos_is_sin() {
        let n = 64;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * 4.0 * t as f64 / n as f64).cos())
            .collect();
        let h = hilbert(&x);
        for (t, hv) in h.iter().enumerate() {
            let want = (2.0 * std::f64::consts::PI * 4.0 * t as f64 / n as f64).sin();
            assert!((hv - want).abs() < 1e-9, "t={t}: {hv} vs {want}");
        }
    }
}
