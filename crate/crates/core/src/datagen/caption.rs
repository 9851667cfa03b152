//! Caption vocabulary and the domain-aware caption generator.
//!
//! A caption reads like "photo of two disc left one ring center ...": up to
//! three (count, class, position) groups for the classes with the largest
//! visible area. With probability `1 − p` per scene, a token describing the
//! rendering domain is appended, so captions of the same scene differ across
//! styles.

use rand::Rng;

use super::render::Rendered;
use super::scene::Scene;
use super::style::DomainStyle;
use crate::numerics::rng_for;

pub const VOCAB_SIZE: usize = 64;
pub const CONTEXT_LENGTH: usize = 13;

pub const PAD: u32 = 0;
// 1..=7: class names (token == class id)
pub const COUNT_ONE: u32 = 8;
pub const COUNT_TWO: u32 = 9;
pub const COUNT_THREE: u32 = 10;
pub const COUNT_MANY: u32 = 11;
pub const POS_LEFT: u32 = 12;
pub const POS_RIGHT: u32 = 13;
pub const POS_TOP: u32 = 14;
pub const POS_BOTTOM: u32 = 15;
pub const POS_CENTER: u32 = 16;
pub const PHOTO: u32 = 17;
pub const OF: u32 = 18;
pub const EMPTY_SCENE: u32 = 19;
/// First of 32 domain descriptor tokens.
pub const DOMAIN_BASE: u32 = 32;

const MAX_GROUPS: usize = 3;
const CAPTION_STREAM: u64 = 0xCA_9710;

pub fn domain_token(domain: u32) -> u32 {
    DOMAIN_BASE + domain % 32
}

pub fn is_domain_token(token: u32) -> bool {
    token >= DOMAIN_BASE && (token as usize) < VOCAB_SIZE
}

fn count_word(n: usize) -> u32 {
    match n {
        1 => COUNT_ONE,
        2 => COUNT_TWO,
        3 => COUNT_THREE,
        _ => COUNT_MANY,
    }
}

fn position_word(cx: f64, cy: f64) -> u32 {
    if cx < 1.0 / 3.0 {
        POS_LEFT
    } else if cx > 2.0 / 3.0 {
        POS_RIGHT
    } else if cy < 1.0 / 3.0 {
        POS_TOP
    } else if cy > 2.0 / 3.0 {
        POS_BOTTOM
    } else {
        POS_CENTER
    }
}

/// Whether this scene's captions stay free of domain tokens.
pub fn caption_is_invariant(p: f64, seed: u64) -> bool {
    let mut rng = rng_for(seed, CAPTION_STREAM);
    rng.gen::<f64>() < p
}

/// Token sequence of length [`CONTEXT_LENGTH`], padded with [`PAD`].
///
/// The semantic part depends only on the scene layout; `style` only matters
/// when the scene's invariance draw (from `seed`) fails.
pub fn caption(scene: &Scene, rendered: &Rendered, style: &DomainStyle, p: f64, seed: u64) -> Vec<u32> {
    let mut tokens = vec![PHOTO, OF];
    // visible area per class, and per-instance pixel centroids
    let n_obj = scene.objects.len();
    let mut area = vec![0usize; n_obj];
    let mut sx = vec![0.0; n_obj];
    let mut sy = vec![0.0; n_obj];
    let size = rendered.mask.width;
    for (i, &inst) in rendered.instances.iter().enumerate() {
        if inst > 0 {
            let o = inst as usize - 1;
            area[o] += 1;
            sx[o] += ((i % size) as f64 + 0.5) / size as f64;
            sy[o] += ((i / size) as f64 + 0.5) / size as f64;
        }
    }
    let mut class_area = [0usize; 8];
    let mut class_count = [0usize; 8];
    let mut class_anchor: [Option<usize>; 8] = [None; 8];
    for o in 0..n_obj {
        if area[o] == 0 {
            continue;
        }
        let c = scene.objects[o].class as usize;
        class_area[c] += area[o];
        class_count[c] += 1;
        if class_anchor[c].is_none_or(|a| area[o] > area[a]) {
            class_anchor[c] = Some(o);
        }
    }
    let mut classes: Vec<usize> = (1..8).filter(|&c| class_count[c] > 0).collect();
    classes.sort_by(|&a, &b| class_area[b].cmp(&class_area[a]).then(a.cmp(&b)));
    if classes.is_empty() {
        tokens.push(EMPTY_SCENE);
    }
    for &c in classes.iter().take(MAX_GROUPS) {
        let o = class_anchor[c].expect("present class has an anchor");
        tokens.push(count_word(class_count[c]));
        tokens.push(c as u32);
        tokens.push(position_word(sx[o] / area[o] as f64, sy[o] / area[o] as f64));
    }
    if !caption_is_invariant(p, seed) {
        tokens.push(domain_token(style.domain));
    }
    debug_assert!(tokens.len() <= CONTEXT_LENGTH);
    tokens.resize(CONTEXT_LENGTH, PAD);
    tokens
}

#[cfg(test)]
mod tests {
    use super::super::render::render;
    use super::super::scene::gen_scene;
    use super::super::DatasetConfig;
    use super::*;

    fn captions_for(seed: u64, p: f64, domains: &[u32]) -> Vec<Vec<u32>> {
        let cfg = DatasetConfig::default();
        let scene = gen_scene(seed, &cfg);
        domains
            .iter()
            .map(|&d| {
                let style = DomainStyle::for_domain(d, 1);
                let r = render(&scene, &style, 64);
                caption(&scene, &r, &style, p, seed)
            })
            .collect()
    }

    #[test]
    fn p_one_is_style_invariant() {
        for seed in 0..100 {
            let caps = captions_for(seed, 1.0, &[0, 1, 2, 3]);
            assert!(caps.windows(2).all(|w| w[0] == w[1]));
            assert!(caps[0].len() == CONTEXT_LENGTH);
        }
    }

    #[test]
    fn p_zero_always_mentions_domain() {
        for seed in 0..100 {
            for cap in captions_for(seed, 0.0, &[0, 1, 2]) {
                assert!(cap.iter().any(|&t| is_domain_token(t)));
            }
        }
    }

    #[test]
    fn match_rate_tracks_p() {
        // Binomial oracle: 10k Bernoulli(p) draws have std sqrt(p(1-p)/n) ≈ 0.004.
        let n = 10_000;
        let matches = (0..n).filter(|&s| caption_is_invariant(0.8, crate::numerics::mix_seed(99, s))).count();
        let rate = matches as f64 / n as f64;
        assert!((0.78..=0.82).contains(&rate), "{rate}");
    }

    #[test]
    fn tokens_inside_vocabulary() {
        for seed in 0..100 {
            for cap in captions_for(seed, 0.5, &[0, 5]) {
                assert!(cap.iter().all(|&t| (t as usize) < VOCAB_SIZE));
            }
        }
    }
}
