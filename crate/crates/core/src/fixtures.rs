//! Procedurally generated toy images: two 64×64 two-region photo pairs plus
//! a held-out image, all fully deterministic. Tests and the bundled demo
//! assets in `fixtures/` come from here, so every end-to-end run is
//! self-contained: no downloads, no external data.
//!
//! Each image is a "landscape": a sky above a wavy horizon and a ground
//! below it, with mild procedural texture so the feature statistics are not
//! degenerate. The pairs differ strongly in palette (cool vs warm), which is
//! what the style losses are supposed to move.

use crate::image_io::ImageBuffer;
use crate::regions::{LabelMap, RegionMaskSet};

pub const TOY_SIZE: usize = 64;
pub const SKY: u32 = 0;
pub const GROUND: u32 = 1;

#[derive(Clone, Debug)]
pub struct ToyPair {
    pub image_a: ImageBuffer,
    pub image_b: ImageBuffer,
    pub masks: RegionMaskSet,
}

fn horizon(x: usize, base: f64, amp: f64, freq: f64, phase: f64) -> usize {
    let t = x as f64 / TOY_SIZE as f64;
    (base + amp * (freq * std::f64::consts::TAU * t + phase).sin()).round() as usize
}

/// Cheap deterministic texture in [-1, 1].
fn grain(y: usize, x: usize, salt: f64) -> f64 {
    let (yf, xf) = (y as f64, x as f64);
    ((0.91 * xf + salt).sin() * (1.37 * yf - salt).cos() + (0.23 * (xf + yf) + 2.0 * salt).sin())
        / 2.0
}

fn sky_ground_image(
    horizon_of: impl Fn(usize) -> usize,
    sky: impl Fn(usize, usize, f64) -> [f64; 3],
    ground: impl Fn(usize, usize, f64) -> [f64; 3],
) -> (ImageBuffer, LabelMap) {
    let mut labels = Vec::with_capacity(TOY_SIZE * TOY_SIZE);
    let img = ImageBuffer::from_fn(TOY_SIZE, TOY_SIZE, |y, x| {
        let h = horizon_of(x);
        let px = if y < h {
            labels.push(SKY);
            let t = y as f64 / h.max(1) as f64;
            sky(y, x, t)
        } else {
            labels.push(GROUND);
            let t = (y - h) as f64 / (TOY_SIZE - h).max(1) as f64;
            ground(y, x, t)
        };
        [
            px[0].clamp(0.02, 0.98) as f32,
            px[1].clamp(0.02, 0.98) as f32,
            px[2].clamp(0.02, 0.98) as f32,
        ]
    });
    (img, LabelMap::new(TOY_SIZE, TOY_SIZE, labels).unwrap())
}

/// The bundled training pair: a cool blue/green scene and a warm
/// orange/brown one, sharing the sky/ground semantics.
pub fn toy_pair() -> ToyPair {
    let (image_a, labels_a) = sky_ground_image(
        |x| horizon(x, 36.0, 5.0, 2.0, 0.3),
        |y, x, t| {
            let g = 0.05 * grain(y, x, 1.0);
            [
                0.12 + 0.10 * t + g,
                0.30 + 0.18 * t + g,
                0.78 - 0.18 * t + g,
            ]
        },
        |y, x, t| {
            let g = 0.07 * grain(y, x, 2.0);
            [
                0.10 + 0.05 * t + g,
                0.48 + 0.12 * t + g,
                0.16 + 0.04 * t + g,
            ]
        },
    );
    let (image_b, labels_b) = sky_ground_image(
        |x| horizon(x, 30.0, 4.0, 3.0, 1.4),
        |y, x, t| {
            let g = 0.05 * grain(y, x, 3.0);
            [
                0.90 - 0.22 * t + g,
                0.55 - 0.10 * t + g,
                0.18 + 0.06 * t + g,
            ]
        },
        |y, x, t| {
            let g = 0.07 * grain(y, x, 4.0);
            [
                0.42 + 0.10 * t + g,
                0.24 + 0.06 * t + g,
                0.12 + 0.03 * t + g,
            ]
        },
    );
    ToyPair {
        image_a,
        image_b,
        masks: RegionMaskSet::from_label_maps(labels_a, labels_b).expect("toy masks correspond"),
    }
}

/// A second, differently colored pair for restyle-by-retraining runs.
pub fn second_toy_pair() -> ToyPair {
    let (image_a, labels_a) = sky_ground_image(
        |x| horizon(x, 34.0, 6.0, 1.0, 2.1),
        |y, x, t| {
            let g = 0.05 * grain(y, x, 5.0);
            [
                0.55 + 0.15 * t + g,
                0.15 + 0.10 * t + g,
                0.70 - 0.10 * t + g,
            ]
        },
        |y, x, t| {
            let g = 0.06 * grain(y, x, 6.0);
            [
                0.20 + 0.05 * t + g,
                0.20 + 0.08 * t + g,
                0.30 + 0.10 * t + g,
            ]
        },
    );
    let (image_b, labels_b) = sky_ground_image(
        |x| horizon(x, 28.0, 5.0, 2.0, 4.0),
        |y, x, t| {
            let g = 0.05 * grain(y, x, 7.0);
            [
                0.15 + 0.05 * t + g,
                0.65 - 0.12 * t + g,
                0.60 - 0.05 * t + g,
            ]
        },
        |y, x, t| {
            let g = 0.06 * grain(y, x, 8.0);
            [
                0.50 + 0.10 * t + g,
                0.45 + 0.05 * t + g,
                0.20 + 0.05 * t + g,
            ]
        },
    );
    ToyPair {
        image_a,
        image_b,
        masks: RegionMaskSet::from_label_maps(labels_a, labels_b).expect("toy masks correspond"),
    }
}

/// A held-out image with the same sky/ground semantics as [`toy_pair`], for
/// unseen-image inference. Returned with its label map.
pub fn toy_unseen() -> (ImageBuffer, LabelMap) {
    sky_ground_image(
        |x| horizon(x, 33.0, 6.0, 1.5, 5.2),
        |y, x, t| {
            let g = 0.04 * grain(y, x, 9.0);
            [
                0.40 + 0.08 * t + g,
                0.46 + 0.08 * t + g,
                0.55 - 0.05 * t + g,
            ]
        },
        |y, x, t| {
            let g = 0.06 * grain(y, x, 10.0);
            [
                0.35 + 0.08 * t + g,
                0.38 + 0.04 * t + g,
                0.22 + 0.05 * t + g,
            ]
        },
    )
}

/// Renders a label map as a mask image: sky blue (#0000FF), ground green
/// (#00FF00). Joint color enumeration sorts blue before green, so decoding
/// these files reproduces SKY = 0 and GROUND = 1.
pub fn mask_image(labels: &LabelMap) -> ImageBuffer {
    ImageBuffer::from_fn(labels.height(), labels.width(), |y, x| {
        match labels.label_at(y, x) {
            SKY => [0.0, 0.0, 1.0],
            _ => [0.0, 1.0, 0.0],
        }
    })
}
