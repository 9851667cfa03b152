//! Per-pixel invertible appearance shifts.
//!
//! A style maps each channel value `x ∈ [0, 1]` through
//! `x^γ → g·x + b → (1 − a)·x + a·fog → (x − lo)/(hi − lo)`.
//! Every stage is strictly increasing (γ, g > 0, a < 1), so the composition is
//! a bijection of `[0, 1]` onto a sub-interval. The last stage is a fixed
//! range fit, computed once per style, that keeps the output inside `[0, 1]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::rng_for;

pub const SOURCE_DOMAIN: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub domain: u32,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
    pub fog: f64,
    pub fog_color: [f64; 3],
    pub seed: u64,
    lo: f64,
    hi: f64,
}

impl DomainStyle {
    pub fn new(domain: u32, gain: [f64; 3], bias: [f64; 3], gamma: f64, fog: f64, fog_color: [f64; 3], seed: u64) -> Result<Self> {
        if gain.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::invalid(format!("style gain must be > 0, got {gain:?}")));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!("style gamma must be > 0, got {gamma}")));
        }
        if !(0.0..1.0).contains(&fog) {
            return Err(Error::invalid(format!("fog blend must lie in [0, 1), got {fog}")));
        }
        let mut style = DomainStyle {
            domain,
            gain,
            bias,
            gamma,
            fog,
            fog_color,
            seed,
            lo: 0.0,
            hi: 1.0,
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for c in 0..3 {
            for x in [0.0, 1.0] {
                let v = style.pre_fit(x, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        style.lo = lo;
        style.hi = hi;
        Ok(style)
    }

    pub fn identity() -> Self {
        DomainStyle::new(SOURCE_DOMAIN, [1.0; 3], [0.0; 3], 1.0, 0.0, [0.5; 3], 0).expect("identity style is valid")
    }

    /// Deterministic style for `domain`; domain 0 is the identity.
    pub fn for_domain(domain: u32, seed: u64) -> Self {
        if domain == SOURCE_DOMAIN {
            return Self::identity();
        }
        let style_seed = crate::numerics::mix_seed(seed, 0x57_71E0 + domain as u64);
        let mut rng = rng_for(style_seed, 0);
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| (rng.gen_range(lo.ln()..hi.ln())).exp();
        let gain = [
            log_uniform(&mut rng, 0.5, 2.0),
            log_uniform(&mut rng, 0.5, 2.0),
            log_uniform(&mut rng, 0.5, 2.0),
        ];
        let bias = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        let gamma = log_uniform(&mut rng, 0.5, 2.0);
        let fog = rng.gen_range(0.0..0.6);
        let base = rng.gen_range(0.4..0.9);
        let fog_color = [
            (base + rng.gen_range(-0.1..0.1f64)).clamp(0.0, 1.0),
            (base + rng.gen_range(-0.1..0.1f64)).clamp(0.0, 1.0),
            (base + rng.gen_range(-0.1..0.1f64)).clamp(0.0, 1.0),
        ];
        DomainStyle::new(domain, gain, bias, gamma, fog, fog_color, style_seed).expect("sampled style parameters are in range")
    }

    pub fn is_identity(&self) -> bool {
        self.gain == [1.0; 3] && self.bias == [0.0; 3] && self.gamma == 1.0 && self.fog == 0.0 && self.lo == 0.0 && self.hi == 1.0
    }

    fn pre_fit(&self, x: f64, c: usize) -> f64 {
        let z = x.max(0.0).powf(self.gamma);
        let y = self.gain[c] * z + self.bias[c];
        (1.0 - self.fog) * y + self.fog * self.fog_color[c]
    }

    /// Forward map of one channel value.
    pub fn apply_value(&self, x: f64, c: usize) -> f64 {
        (self.pre_fit(x, c) - self.lo) / (self.hi - self.lo)
    }

    /// Inverse map of one channel value.
    pub fn invert_value(&self, y: f64, c: usize) -> f64 {
        let w = y * (self.hi - self.lo) + self.lo;
        let v = (w - self.fog * self.fog_color[c]) / (1.0 - self.fog);
        let z = (v - self.bias[c]) / self.gain[c];
        z.max(0.0).powf(1.0 / self.gamma)
    }
}

/// Apply `style` to an interleaved RGB buffer with values in `[0, 1]`.
pub fn apply_shift(image01: &[f64], style: &DomainStyle) -> Vec<f64> {
    image01.iter().enumerate().map(|(i, &x)| style.apply_value(x, i % 3)).collect()
}

pub fn invert_shift(image01: &[f64], style: &DomainStyle) -> Vec<f64> {
    image01.iter().enumerate().map(|(i, &y)| style.invert_value(y, i % 3)).collect()
}
