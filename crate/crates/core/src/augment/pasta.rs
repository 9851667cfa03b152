use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::rng_for;

pub const PASTA_ALPHA: f64 = 3.0;
pub const PASTA_KAPPA: f64 = 2.0;

fn fft2(data: &mut [Complex<f64>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Per-bin standard deviation `σ(f) = α·(‖f‖/‖f‖_max)^κ`.
pub fn pasta_sigma(u: usize, v: usize, n: usize, alpha: f64, kappa: f64) -> f64 {
    let r = signed_freq(u, n).hypot(signed_freq(v, n));
    let rmax = (n as f64 / 2.0) * std::f64::consts::SQRT_2;
    alpha * (r / rmax).powf(kappa)
}

/// Amplitude multipliers `|1 + ε|` per bin, symmetric under `f ↦ −f` so the
/// inverse transform stays real.
pub fn pasta_multipliers(n: usize, alpha: f64, kappa: f64, seed: u64, channel: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, 0x9A57A + channel);
    let eps: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut out = vec![1.0; n * n];
    for v in 0..n {
        for u in 0..n {
            let mirror = ((n - v) % n) * n + (n - u) % n;
            let canon = (v * n + u).min(mirror);
            out[v * n + u] = (1.0 + pasta_sigma(u, v, n, alpha, kappa) * eps[canon]).abs();
        }
    }
    out
}

/// Forward spectrum of one channel and its perturbed version.
pub fn pasta_spectra(image: &Image, c: usize, alpha: f64, kappa: f64, seed: u64) -> Result<(Vec<Complex<f64>>, Vec<Complex<f64>>)> {
    let n = check_square_pow2(image)?;
    let mut spec: Vec<Complex<f64>> = image.data.iter().skip(c).step_by(image.channels).map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spec, n, false);
    let mult = pasta_multipliers(n, alpha, kappa, seed, c as u64);
    let perturbed = spec.iter().zip(&mult).map(|(z, m)| z * m).collect();
    Ok((spec, perturbed))
}

fn check_square_pow2(image: &Image) -> Result<usize> {
    let n = image.width;
    if image.height != n || !n.is_power_of_two() {
        return Err(Error::invalid(format!("PASTA needs a square power-of-two image, got {}×{}", image.height, image.width)));
    }
    Ok(n)
}

/// Frequency-dependent amplitude perturbation with the phase kept intact.
pub fn pasta(image: &Image, alpha: f64, kappa: f64, seed: u64) -> Result<Image> {
    let n = check_square_pow2(image)?;
    let mut out = image.clone();
    for c in 0..image.channels {
        let (_, mut spec) = pasta_spectra(image, c, alpha, kappa, seed)?;
        fft2(&mut spec, n, true);
        let norm = (n * n) as f64;
        for (i, z) in spec.iter().enumerate() {
            out.data[i * image.channels + c] = (z.re / norm).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
