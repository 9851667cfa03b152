//! Finite idealized world for the cross-domain agreement bound: if image
//! embeddings equal the embeddings of their captions and a fraction `p` of
//! captions ignores the domain, any decoder agrees on `x` and `φ(x)` for at
//! least a fraction `p` of samples.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::{vision_encode, ParamSet, ViTConfig};
use crate::numerics::{mix_seed, rng_for};

/// Embedding dimension of the idealized encoders.
pub const WORLD_DIM: usize = 16;
/// Number of domain-free caption meanings.
pub const WORLD_CAPTIONS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionAllocation {
    /// Exactly `⌈p·n⌉` invariant captions, chosen by a seeded shuffle.
    Deterministic,
    /// Each caption invariant independently with probability `p`.
    Iid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdealizedWorld {
    pub n: usize,
    pub p: f64,
    pub alignment_noise: f64,
    pub seed: u64,
    /// `phi[i]` is the target-domain index of source sample `i`.
    pub phi: Vec<usize>,
    /// Caption id of each source sample.
    pub caption_src: Vec<usize>,
    /// Caption id of each target sample (indexed by target index).
    pub caption_tgt: Vec<usize>,
    /// Whether source sample `i` keeps its caption under `φ`.
    pub invariant: Vec<bool>,
    /// Language encoder table, one unit vector per caption id.
    pub text: Vec<Vec<f64>>,
    pub vision_src: Vec<Vec<f64>>,
    pub vision_tgt: Vec<Vec<f64>>,
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Smallest count whose share of `n` is at least `p`.
pub fn invariant_count(n: usize, p: f64) -> usize {
    let x = p * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 * (1.0 + x) { r } else { x.ceil() };
    (k as usize).min(n)
}

pub fn build_world(n: usize, p: f64, alignment_noise: f64, seed: u64) -> Result<IdealizedWorld> {
    build_world_with(n, p, alignment_noise, seed, CaptionAllocation::Deterministic)
}

pub fn build_world_with(n: usize, p: f64, alignment_noise: f64, seed: u64, allocation: CaptionAllocation) -> Result<IdealizedWorld> {
    if n == 0 {
        return Err(Error::invalid("world needs n ≥ 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("p must lie in [0, 1], got {p}")));
    }
    if !(alignment_noise >= 0.0) {
        return Err(Error::invalid(format!("alignment noise must be ≥ 0, got {alignment_noise}")));
    }
    let mut rng = rng_for(seed, 0x1E33A);
    let mut phi: Vec<usize> = (0..n).collect();
    phi.shuffle(&mut rng);

    let invariant = match allocation {
        CaptionAllocation::Deterministic => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut inv = vec![false; n];
            for &i in &order[..invariant_count(n, p)] {
                inv[i] = true;
            }
            inv
        }
        CaptionAllocation::Iid => (0..n).map(|_| rng.gen::<f64>() < p).collect(),
    };

    // Ids below WORLD_CAPTIONS are domain-free; id WORLD_CAPTIONS + c is
    // "caption c, in the target domain".
    let caption_src: Vec<usize> = (0..n).map(|_| rng.gen_range(0..WORLD_CAPTIONS)).collect();
    let mut caption_tgt = vec![0; n];
    for i in 0..n {
        caption_tgt[phi[i]] = if invariant[i] { caption_src[i] } else { WORLD_CAPTIONS + caption_src[i] };
    }
    let text: Vec<Vec<f64>> = (0..2 * WORLD_CAPTIONS).map(|_| unit(&mut rng, WORLD_DIM)).collect();

    let mut noise_rng = rng_for(seed, 0x1E33B);
    let mut embed = |c: usize| -> Vec<f64> {
        text[c]
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                if alignment_noise == 0.0 {
                    v
                } else {
                    v + alignment_noise * z
                }
            })
            .collect()
    };
    let vision_src: Vec<Vec<f64>> = caption_src.iter().map(|&c| embed(c)).collect();
    let vision_tgt: Vec<Vec<f64>> = caption_tgt.iter().map(|&c| embed(c)).collect();
    Ok(IdealizedWorld {
        n,
        p,
        alignment_noise,
        seed,
        phi,
        caption_src,
        caption_tgt,
        invariant,
        text,
        vision_src,
        vision_tgt,
    })
}

impl IdealizedWorld {
    /// The individual equalities `M(φ(x)) = L(T(φ(x)))`, `L(T(φ(x))) = L(T(x))`
    /// and `L(T(x)) = M(x)` for source sample `i`.
    pub fn proof_chain(&self, i: usize) -> [bool; 3] {
        let t = self.phi[i];
        let lt_phi = &self.text[self.caption_tgt[t]];
        let lt_x = &self.text[self.caption_src[i]];
        [&self.vision_tgt[t] == lt_phi, lt_phi == lt_x, lt_x == &self.vision_src[i]]
    }

    pub fn invariant_fraction(&self) -> f64 {
        self.invariant.iter().filter(|&&b| b).count() as f64 / self.n as f64
    }
}

/// Index of the nearest centroid (squared Euclidean); ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f64>], e: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d: f64 = c.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Nearest-centroid decoder over the domain-free caption embeddings.
pub fn world_decoder(world: &IdealizedWorld) -> impl Fn(&[f64]) -> usize + '_ {
    move |e| nearest_centroid(&world.text[..WORLD_CAPTIONS], e)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgreementStats {
    pub n: usize,
    pub agree: usize,
    pub rate: f64,
    /// Three binomial standard errors.
    pub margin: f64,
}

impl AgreementStats {
    pub fn from_counts(agree: usize, n: usize) -> Self {
        let rate = if n == 0 { 0.0 } else { agree as f64 / n as f64 };
        let margin = if n == 0 { 0.0 } else { 3.0 * (rate * (1.0 - rate) / n as f64).sqrt() };
        AgreementStats { n, agree, rate, margin }
    }
}

/// Fraction of source samples whose decoded output equals that of their image under `φ`.
pub fn agreement_rate<O: PartialEq>(world: &IdealizedWorld, decoder: impl Fn(&[f64]) -> O) -> AgreementStats {
    let agree = (0..world.n)
        .filter(|&i| decoder(&world.vision_src[i]) == decoder(&world.vision_tgt[world.phi[i]]))
        .count();
    AgreementStats::from_counts(agree, world.n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub noise: f64,
    pub n: usize,
    pub rate: f64,
    pub margin: f64,
    pub seed: u64,
}

pub fn sweep(p_list: &[f64], noise_list: &[f64], n: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if p_list.is_empty() || noise_list.is_empty() {
        return Err(Error::invalid("sweep needs non-empty p and noise lists"));
    }
    let mut rows = Vec::with_capacity(p_list.len() * noise_list.len());
    for &p in p_list {
        for &noise in noise_list {
            let world = build_world(n, p, noise, seed)?;
            let s = agreement_rate(&world, world_decoder(&world));
            rows.push(SweepRow {
                p,
                noise,
                n,
                rate: s.rate,
                margin: s.margin,
                seed,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "p,noise,n,rate,margin,seed";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},{}", r.p, r.noise, r.n, r.rate, r.margin, r.seed);
    }
    s
}

/// Agreement of a trained encoder's pooled embeddings across domains:
/// nearest-centroid labels of each source image versus its shifted copy,
/// with centroids taken as per-label means of the source embeddings.
pub fn encoder_agreement(params: &ParamSet, vit: &ViTConfig, source: &[Image], shifted: &[Image], labels: &[usize]) -> Result<AgreementStats> {
    if source.len() != shifted.len() || source.len() != labels.len() || source.is_empty() {
        return Err(Error::invalid("encoder agreement needs equally many source, shifted and label entries"));
    }
    let embed = |imgs: &[Image]| -> Result<Vec<Vec<f64>>> { imgs.iter().map(|im| Ok(vision_encode(params, vit, im)?.1.into_vec())).collect() };
    let es = embed(source)?;
    let et = embed(shifted)?;
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut centroids = vec![vec![0.0; es[0].len()]; classes];
    let mut counts = vec![0usize; classes];
    for (e, &l) in es.iter().zip(labels) {
        centroids[l].iter_mut().zip(e).for_each(|(c, v)| *c += v);
        counts[l] += 1;
    }
    for (c, &k) in centroids.iter_mut().zip(&counts) {
        if k > 0 {
            c.iter_mut().for_each(|v| *v /= k as f64);
        } else {
            c.iter_mut().for_each(|v| *v = f64::INFINITY);
        }
    }
    let agree = es.iter().zip(&et).filter(|(a, b)| nearest_centroid(&centroids, a) == nearest_centroid(&centroids, b)).count();
    Ok(AgreementStats::from_counts(agree, es.len()))
}

/// Mean rate over seeds for one `(p, noise)` cell.
pub fn mean_rate(p: f64, noise: f64, n: usize, seeds: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    for &s in seeds {
        let w = build_world(n, p, noise, mix_seed(s, 0x5EED))?;
        total += agreement_rate(&w, world_decoder(&w)).rate;
    }
    Ok(total / seeds.len().max(1) as f64)
}
