use std::collections::BTreeSet;

use super::params::ParamSet;
use super::vit::block_of;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeDirection {
    /// Blocks `0..k`, plus patch and position embeddings when `k ≥ 1`.
    EarlyToDeep,
    /// Blocks `depth−k..depth`, plus the final norm and projection when `k ≥ 1`.
    DeepToEarly,
}

impl FreezeDirection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "early" | "early-to-deep" => Ok(Self::EarlyToDeep),
            "deep" | "deep-to-early" => Ok(Self::DeepToEarly),
            other => Err(Error::Config(format!("unknown freeze direction {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::EarlyToDeep => "early-to-deep",
            Self::DeepToEarly => "deep-to-early",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeSpec {
    pub k: usize,
    pub direction: FreezeDirection,
}

impl Default for FreezeSpec {
    fn default() -> Self {
        FreezeSpec {
            k: 0,
            direction: FreezeDirection::EarlyToDeep,
        }
    }
}

/// Names of parameters excluded from optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMask {
    frozen: BTreeSet<String>,
}

impl TrainMask {
    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.len()
    }
}

/// Decide which encoder parameters stay fixed; decoders are always trainable.
pub fn freeze(params: &ParamSet, depth: usize, spec: FreezeSpec) -> Result<TrainMask> {
    if spec.k > depth {
        return Err(Error::Config(format!("cannot freeze {} blocks of a depth-{} encoder", spec.k, depth)));
    }
    let mut frozen = BTreeSet::new();
    if spec.k == 0 {
        return Ok(TrainMask { frozen });
    }
    let blocks = match spec.direction {
        FreezeDirection::EarlyToDeep => 0..spec.k,
        FreezeDirection::DeepToEarly => depth - spec.k..depth,
    };
    for name in params.names() {
        if !name.starts_with("vit.") {
            continue;
        }
        let hit = match block_of(name) {
            Some(b) => blocks.contains(&b),
            None => {
                let stem = name.strip_prefix("vit.").unwrap_or(name);
                let early = stem.starts_with("patch.") || stem == "pos" || stem == "mask_token";
                let late = stem.starts_with("ln.") || stem.starts_with("proj.");
                spec.k == depth
                    || (early && spec.direction == FreezeDirection::EarlyToDeep)
                    || (late && spec.direction == FreezeDirection::DeepToEarly)
            }
        };
        if hit {
            frozen.insert(name.clone());
        }
    }
    Ok(TrainMask { frozen })
}

#[cfg(test)]
mod tests {
    use super::super::{init_seg_decoder, init_vit, DecoderConfig, ViTConfig};
    use super::*;

    fn params() -> ParamSet {
        let vit = ViTConfig::micro();
        let mut ps = ParamSet::new();
        init_vit(&vit, 0, &mut ps).unwrap();
        init_seg_decoder(&vit, &DecoderConfig::default(), 0, &mut ps).unwrap();
        ps
    }

    #[test]
    fn k_zero_trains_everything() {
        let ps = params();
        let m = freeze(&ps, 8, FreezeSpec::default()).unwrap();
        assert!(ps.names().iter().all(|n| m.is_trainable(n)));
    }

    #[test]
    fn all_blocks_freeze_whole_encoder() {
        let ps = params();
        for direction in [FreezeDirection::EarlyToDeep, FreezeDirection::DeepToEarly] {
            let m = freeze(&ps, 8, FreezeSpec { k: 8, direction }).unwrap();
            for n in ps.names() {
                assert_eq!(m.is_trainable(n), !n.starts_with("vit."), "{n}");
            }
        }
    }

    #[test]
    fn early_mode_takes_embeddings_with_first_block() {
        let ps = params();
        let m = freeze(&ps, 8, FreezeSpec { k: 1, direction: FreezeDirection::EarlyToDeep }).unwrap();
        assert!(!m.is_trainable("vit.pos"));
        assert!(!m.is_trainable("vit.patch.w"));
        assert!(!m.is_trainable("vit.block0.attn.qkv.w"));
        assert!(m.is_trainable("vit.block1.attn.qkv.w"));
        assert!(m.is_trainable("vit.ln.g"));
        let m = freeze(&ps, 8, FreezeSpec { k: 2, direction: FreezeDirection::DeepToEarly }).unwrap();
        assert!(m.is_trainable("vit.pos"));
        assert!(!m.is_trainable("vit.block7.mlp.fc1.w"));
        assert!(!m.is_trainable("vit.block6.mlp.fc1.w"));
        assert!(m.is_trainable("vit.block5.mlp.fc1.w"));
    }

    #[test]
    fn too_many_blocks() {
        assert!(freeze(&params(), 8, FreezeSpec { k: 9, direction: FreezeDirection::EarlyToDeep }).is_err());
    }
}
