//! Quantitative evaluation: reconstruction fidelity (PSNR), stylization
//! strength (Gram distance), and saturation-histogram distance in HSV.

use serde::Serialize;

use crate::backbone::{extract_features, Backbone};
use crate::error::{Error, Result};
use crate::image_io::ImageBuffer;
use crate::inference::{cycle_apply, self_apply};
use crate::losses::{style_loss, RegionView};
use crate::stylenet::StyleTag;
use crate::tensor::Scalar;
use crate::trainer::Checkpoint;

/// PSNR in dB, with a sentinel for the zero-error case where the ratio is
/// unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Psnr {
    #[serde(rename = "identical")]
    Identical(&'static str),
    Db(f64),
}

impl Psnr {
    pub fn identical() -> Self {
        Psnr::Identical("identical")
    }

    /// Infinity for the identical case, so thresholds compare naturally.
    pub fn as_db(&self) -> f64 {
        match self {
            Psnr::Identical(_) => f64::INFINITY,
            Psnr::Db(v) => *v,
        }
    }
}

/// 10·log10(1/MSE) over pixels in [0,1].
pub fn psnr(x: &ImageBuffer, y: &ImageBuffer) -> Result<Psnr> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::validation(format!(
            "psnr shape mismatch: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let mut acc = 0.0f64;
    for (a, b) in x.planes().iter().zip(y.planes()) {
        let d = *a as f64 - *b as f64;
        acc += d * d;
    }
    let mse = acc / x.planes().len() as f64;
    if mse == 0.0 {
        Ok(Psnr::identical())
    } else {
        Ok(Psnr::Db(10.0 * (1.0 / mse).log10()))
    }
}

/// Saturation channel of the standard HSV conversion: (max−min)/max, zero
/// for black.
pub fn saturation(r: f64, g: f64, b: f64) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

fn saturation_histogram(img: &ImageBuffer, bins: usize) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut hist = vec![0.0f64; bins];
    for y in 0..h {
        for x in 0..w {
            let s = saturation(
                img.get(0, y, x) as f64,
                img.get(1, y, x) as f64,
                img.get(2, y, x) as f64,
            );
            let idx = ((s * bins as f64) as usize).min(bins - 1);
            hist[idx] += 1.0;
        }
    }
    let total = (h * w) as f64;
    for v in &mut hist {
        *v /= total;
    }
    hist
}

/// L1 distance between normalized saturation histograms; ranges over [0, 2].
pub fn saturation_hist_distance(x: &ImageBuffer, y: &ImageBuffer, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::validation("need at least 2 histogram bins"));
    }
    x.validate()?;
    y.validate()?;
    let hx = saturation_histogram(x, bins);
    let hy = saturation_histogram(y, bins);
    Ok(hx.iter().zip(&hy).map(|(a, b)| (a - b).abs()).sum())
}

/// Style distance between two images: the Gram-based style loss on their
/// extracted feature pyramids.
pub fn style_gram_distance<S: Scalar>(
    x: &ImageBuffer,
    style: &ImageBuffer,
    backbone: &Backbone<S>,
    masks: Option<(RegionView<'_>, RegionView<'_>)>,
) -> Result<f64> {
    style_loss(
        &extract_features(backbone, x)?,
        &extract_features(backbone, style)?,
        masks.map(|m| m.0),
        masks.map(|m| m.1),
    )
}

/// The full evaluation of a checkpoint against its own training images.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub self_psnr_a: Psnr,
    pub self_psnr_b: Psnr,
    pub cycle_psnr_a: Psnr,
    pub cycle_psnr_b: Psnr,
    pub style_gram_dist_to_a: f64,
    pub style_gram_dist_to_b: f64,
    pub sat_hist_dist_to_a: f64,
    pub sat_hist_dist_to_b: f64,
}

pub const DEFAULT_SAT_BINS: usize = 32;

/// Measures the consistency and stylization properties of a checkpoint:
/// how close g_a(x_a) and the round trips are to the inputs, and how close
/// the stylizations' statistics are to their target styles.
pub fn evaluate(ckpt: &Checkpoint, backbone: &Backbone<f32>) -> Result<EvalReport> {
    ckpt.check_backbone(backbone);
    let self_a = self_apply(ckpt, StyleTag::A)?;
    let self_b = self_apply(ckpt, StyleTag::B)?;
    let cycle_a = cycle_apply(ckpt, StyleTag::A)?;
    let cycle_b = cycle_apply(ckpt, StyleTag::B)?;

    // Stylizations for the strength measures.
    let b_to_a = crate::losses::apply_composite(
        &ckpt.pair,
        StyleTag::A,
        &ckpt.image_b,
        ckpt.masks.side(StyleTag::B),
    )?;
    let a_to_b = crate::losses::apply_composite(
        &ckpt.pair,
        StyleTag::B,
        &ckpt.image_a,
        ckpt.masks.side(StyleTag::A),
    )?;

    let masks = &ckpt.masks;
    let view = |side| RegionView { set: masks, side };
    Ok(EvalReport {
        self_psnr_a: psnr(&self_a, &ckpt.image_a)?,
        self_psnr_b: psnr(&self_b, &ckpt.image_b)?,
        cycle_psnr_a: psnr(&cycle_a, &ckpt.image_a)?,
        cycle_psnr_b: psnr(&cycle_b, &ckpt.image_b)?,
        style_gram_dist_to_a: style_gram_distance(
            &b_to_a,
            &ckpt.image_a,
            backbone,
            Some((view(StyleTag::B), view(StyleTag::A))),
        )?,
        style_gram_dist_to_b: style_gram_distance(
            &a_to_b,
            &ckpt.image_b,
            backbone,
            Some((view(StyleTag::A), view(StyleTag::B))),
        )?,
        sat_hist_dist_to_a: saturation_hist_distance(&b_to_a, &ckpt.image_a, DEFAULT_SAT_BINS)?,
        sat_hist_dist_to_b: saturation_hist_distance(&a_to_b, &ckpt.image_b, DEFAULT_SAT_BINS)?,
    })
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method. Used to
/// check positive semidefiniteness of Gram matrices.
pub fn symmetric_eigenvalues(values: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(values.len(), n * n);
    let mut a = values.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: [f32; 3]) -> ImageBuffer {
        ImageBuffer::from_fn(8, 8, |_, _| v)
    }

    #[test]
    fn psnr_identical_and_known_value() {
        let x = flat([0.5, 0.5, 0.5]);
        assert_eq!(psnr(&x, &x).unwrap(), Psnr::identical());

        // all-0.5 vs all-0.25: MSE = 0.0625 → 10·log10(16) ≈ 12.0412 dB
        let y = flat([0.25, 0.25, 0.25]);
        let got = psnr(&x, &y).unwrap().as_db();
        assert!((got - 10.0 * 16.0f64.log10()).abs() < 1e-9, "{got}");

        // Symmetric.
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());

        // Shape mismatch rejected.
        let z = ImageBuffer::new(4, 4);
        assert!(psnr(&x, &z).is_err());
    }

    #[test]
    fn saturation_matches_piecewise_oracle() {
        // Independent oracle: textbook piecewise HSV conversion.
        fn oracle(r: f64, g: f64, b: f64) -> f64 {
            let cmax = [r, g, b].into_iter().fold(f64::MIN, f64::max);
            let cmin = [r, g, b].into_iter().fold(f64::MAX, f64::min);
            let delta = cmax - cmin;
            if cmax == 0.0 {
                0.0
            } else {
                delta / cmax
            }
        }
        let mut rng = crate::rng::Rng::new(77);
        for _ in 0..2000 {
            let (r, g, b) = (rng.uniform(), rng.uniform(), rng.uniform());
            assert!((saturation(r, g, b) - oracle(r, g, b)).abs() <= 1e-6);
        }
        assert_eq!(saturation(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn sat_hist_distance_extremes() {
        // Grayscale (S = 0 everywhere) vs pure hue (S = 1) → mass sits in
        // the first and last bins, L1 distance 2.
        let gray = flat([0.6, 0.6, 0.6]);
        let red = flat([1.0, 0.0, 0.0]);
        let d = saturation_hist_distance(&gray, &red, 32).unwrap();
        assert_eq!(d, 2.0);
        assert_eq!(saturation_hist_distance(&gray, &gray, 32).unwrap(), 0.0);
        // Symmetric.
        let e = saturation_hist_distance(&red, &gray, 32).unwrap();
        assert_eq!(d, e);
        assert!(saturation_hist_distance(&gray, &red, 1).is_err());
    }

    #[test]
    fn style_gram_distance_zero_on_identical_inputs() {
        let backbone =
            crate::backbone::load_backbone(&crate::backbone::BackboneSource::FixedRandom {
                seed: 12,
            })
            .unwrap();
        let img = ImageBuffer::from_fn(16, 16, |y, x| [y as f32 / 16.0, x as f32 / 16.0, 0.5]);
        assert_eq!(
            style_gram_distance(&img, &img, &backbone, None).unwrap(),
            0.0
        );
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let mut eig = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);

        // A random Gram-like PSD matrix has nonnegative spectrum.
        let mut rng = crate::rng::Rng::new(5);
        let (c, p) = (6, 10);
        let f: Vec<f64> = (0..c * p).map(|_| rng.normal()).collect();
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                g[i * c + j] = (0..p).map(|k| f[i * p + k] * f[j * p + k]).sum();
            }
        }
        let eig = symmetric_eigenvalues(&g, c);
        let max = eig.iter().cloned().fold(f64::MIN, f64::max);
        assert!(eig.iter().all(|l| *l >= -1e-9 * max.max(1.0)));
    }
}
