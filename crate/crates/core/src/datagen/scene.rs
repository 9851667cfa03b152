use rand::Rng;

use super::DatasetConfig;
use crate::numerics::rng_for;

/// Drawing primitive; each foreground class owns one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Bar,
}

impl Shape {
    pub fn for_class(class: u8) -> Shape {
        match class {
            1 => Shape::Disc,
            2 => Shape::Square,
            3 => Shape::Triangle,
            4 => Shape::Ring,
            5 => Shape::Cross,
            6 => Shape::Diamond,
            _ => Shape::Bar,
        }
    }

    /// Whether the normalized offset `(u, v) ∈ [-1, 1]²` from the object
    /// center lies inside the primitive.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => v <= 0.9 && v >= -0.9 && u.abs() <= (v + 0.9) / 1.8,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u8,
    pub shape: Shape,
    /// Center in the unit square.
    pub cx: f64,
    pub cy: f64,
    /// Half extent as a fraction of the image side.
    pub radius: f64,
    /// Draw order; larger is on top.
    pub z: usize,
    /// Per-object color jitter in `[-1, 1]³`.
    pub tint: [f64; 3],
}

/// Semantic content of one sample, independent of appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub background_seed: u64,
}

const SCENE_STREAM: u64 = 0x5C_E7E;

/// Draw a scene deterministically from `seed`.
pub fn gen_scene(seed: u64, config: &DatasetConfig) -> Scene {
    let mut rng = rng_for(seed, SCENE_STREAM);
    let background_seed = rng.gen::<u64>();
    let count = if config.max_objects == 0 {
        0
    } else {
        rng.gen_range(1..=config.max_objects)
    };
    let priors = config.class_priors();
    let total: f64 = priors.iter().sum();
    let mut objects = Vec::with_capacity(count);
    for z in 0..count {
        let mut u = rng.gen::<f64>() * total;
        let mut class = priors.len() as u8;
        for (i, &p) in priors.iter().enumerate() {
            if u < p {
                class = i as u8 + 1;
                break;
            }
            u -= p;
        }
        let radius = rng.gen_range(0.08..0.17);
        let cx = rng.gen_range(radius..1.0 - radius);
        let cy = rng.gen_range(radius..1.0 - radius);
        let tint = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        objects.push(SceneObject {
            class,
            shape: Shape::for_class(class),
            cx,
            cy,
            radius,
            z,
            tint,
        });
    }
    Scene {
        objects,
        background_seed,
    }
}
