use rand::Rng;

use super::scene::Scene;
use super::style::{apply_shift, DomainStyle};
use crate::image::{BoxAnn, Image, Mask};
use crate::numerics::rng_for;

/// Canonical (source-domain) colors for classes 0..8.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.42, 0.47, 0.40],
    [0.85, 0.22, 0.20],
    [0.20, 0.32, 0.85],
    [0.90, 0.82, 0.22],
    [0.78, 0.25, 0.78],
    [0.22, 0.78, 0.80],
    [0.95, 0.55, 0.15],
    [0.92, 0.92, 0.90],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Image,
    pub mask: Mask,
    /// Per-pixel object index + 1 (0 = background).
    pub instances: Vec<u16>,
    /// One box per visible object, in draw order.
    pub boxes: Vec<BoxAnn>,
}

/// Canonical rendering followed by the style's per-pixel shift.
pub fn render(scene: &Scene, style: &DomainStyle, size: usize) -> Rendered {
    let canonical = render_canonical(scene, size);
    let data = if style.is_identity() {
        canonical.image.data.clone()
    } else {
        apply_shift(&canonical.image.data, style)
    };
    Rendered {
        image: Image {
            data,
            ..canonical.image
        },
        ..canonical
    }
}

fn render_canonical(scene: &Scene, size: usize) -> Rendered {
    let mut rng = rng_for(scene.background_seed, 1);
    let freq = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
    let phase = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let base_shift: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];

    let mut image = Image::filled(size, size, 3, 0.0);
    let mut mask = Mask::filled(size, size, 0);
    let mut instances = vec![0u16; size * size];

    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by_key(|&i| scene.objects[i].z);

    for y in 0..size {
        let py = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64;
            let wave = 0.06 * (std::f64::consts::TAU * freq[0] * px + phase[0]).sin()
                + 0.06 * (std::f64::consts::TAU * freq[1] * py + phase[1]).sin();
            let mut color = [0.0; 3];
            for c in 0..3 {
                color[c] = PALETTE[0][c] + base_shift[c] + wave;
            }
            for &oi in &order {
                let o = &scene.objects[oi];
                let u = (px - o.cx) / o.radius;
                let v = (py - o.cy) / o.radius;
                if o.shape.contains(u, v) {
                    for c in 0..3 {
                        color[c] = PALETTE[o.class as usize][c] + 0.06 * o.tint[c] - 0.05 * v;
                    }
                    mask.data[y * size + x] = o.class;
                    instances[y * size + x] = oi as u16 + 1;
                }
            }
            for c in 0..3 {
                let i = image.idx(y, x, c);
                image.data[i] = color[c].clamp(0.0, 1.0);
            }
        }
    }
    let boxes = boxes_from_instances(&instances, size, scene);
    Rendered {
        image,
        mask,
        instances,
        boxes,
    }
}

fn boxes_from_instances(instances: &[u16], size: usize, scene: &Scene) -> Vec<BoxAnn> {
    let n = scene.objects.len();
    let mut ext = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for y in 0..size {
        for x in 0..size {
            let id = instances[y * size + x];
            if id > 0 {
                let e = &mut ext[id as usize - 1];
                e.0 = e.0.min(x);
                e.1 = e.1.min(y);
                e.2 = e.2.max(x);
                e.3 = e.3.max(y);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| scene.objects[i].z);
    let s = size as f64;
    order
        .into_iter()
        .filter(|&i| ext[i].0 != usize::MAX)
        .map(|i| {
            let (x0, y0, x1, y1) = ext[i];
            BoxAnn::from_corners(
                scene.objects[i].class,
                x0 as f64 / s,
                y0 as f64 / s,
                (x1 + 1) as f64 / s,
                (y1 + 1) as f64 / s,
            )
        })
        .collect()
}
