//! Semantic region masks: ingestion, validation, per-region indicators and
//! compositing of per-region network outputs.
//!
//! Masks arrive as paletted or RGB images. Without an explicit palette,
//! distinct colors across *both* masks are enumerated jointly (sorted by
//! packed RGB) so the same color means the same label on either side.
//! Matching is by label: the correspondence set is the intersection of the
//! two maps' labels. Pixels whose label exists on only one side are folded
//! into that side's largest corresponding region, since training needs every
//! pixel to belong somewhere.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::ImageBuffer;
use crate::stylenet::{StyleTag, MAX_REGIONS};
use crate::tensor::{Scalar, Tensor};

/// Integer label per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::validation(format!(
                "label map length {} does not match {height}x{width}",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn solid(height: usize, width: usize, label: u32) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label_at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn present(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn area(&self, label: u32) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Binary indicator of `label` as an (H, W) tensor.
    pub fn indicator<S: Scalar>(&self, label: u32) -> Tensor<S> {
        Tensor::from_vec(
            &[self.height, self.width],
            self.labels
                .iter()
                .map(|l| if *l == label { S::ONE } else { S::ZERO })
                .collect(),
        )
    }

    /// Nearest-neighbor downsampling of the label map to the spatial size a
    /// feature layer with cumulative stride `factor` would have (floor
    /// semantics, sampling at cell centers). Binarize per region afterwards;
    /// hard labels keep region boundaries hard.
    pub fn downsample(&self, factor: usize) -> LabelMap {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let oh = self.height / factor;
        let ow = self.width / factor;
        let mut labels = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = (y * factor + factor / 2).min(self.height - 1);
            for x in 0..ow {
                let sx = (x * factor + factor / 2).min(self.width - 1);
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        LabelMap {
            height: oh,
            width: ow,
            labels,
        }
    }

    fn retain_labels(&mut self, keep: &BTreeSet<u32>, fallback: u32) -> usize {
        let mut moved = 0;
        for l in &mut self.labels {
            if !keep.contains(l) {
                *l = fallback;
                moved += 1;
            }
        }
        moved
    }
}

/// Validated mask pair with its correspondence set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMaskSet {
    labels_a: LabelMap,
    labels_b: LabelMap,
    correspondence: Vec<u32>,
}

impl RegionMaskSet {
    /// Whole-image single region on both sides; what "no masks" means.
    pub fn single_region(dims_a: (usize, usize), dims_b: (usize, usize)) -> Self {
        RegionMaskSet {
            labels_a: LabelMap::solid(dims_a.0, dims_a.1, 0),
            labels_b: LabelMap::solid(dims_b.0, dims_b.1, 0),
            correspondence: vec![0],
        }
    }

    /// Computes the correspondence (label intersection), folds orphan labels
    /// into the largest corresponding region, and enforces the region cap.
    pub fn from_label_maps(labels_a: LabelMap, labels_b: LabelMap) -> Result<Self> {
        let present_a = labels_a.present();
        let present_b = labels_b.present();
        let common: BTreeSet<u32> = present_a.intersection(&present_b).copied().collect();
        if common.is_empty() {
            return Err(Error::Correspondence(format!(
                "no shared region labels: side a has {present_a:?}, side b has {present_b:?}"
            )));
        }
        if common.len() > MAX_REGIONS {
            return Err(Error::Capacity(format!(
                "regions>{MAX_REGIONS}: got {}",
                common.len()
            )));
        }
        let mut labels_a = labels_a;
        let mut labels_b = labels_b;
        let fallback_a = largest_by_area(&labels_a, &common);
        let fallback_b = largest_by_area(&labels_b, &common);
        let dropped_a: Vec<u32> = present_a.difference(&common).copied().collect();
        let dropped_b: Vec<u32> = present_b.difference(&common).copied().collect();
        if !dropped_a.is_empty() {
            let n = labels_a.retain_labels(&common, fallback_a);
            log::warn!(
                "mask a: labels {dropped_a:?} have no counterpart; {n} pixels folded into region {fallback_a}"
            );
        }
        if !dropped_b.is_empty() {
            let n = labels_b.retain_labels(&common, fallback_b);
            log::warn!(
                "mask b: labels {dropped_b:?} have no counterpart; {n} pixels folded into region {fallback_b}"
            );
        }
        Ok(RegionMaskSet {
            labels_a,
            labels_b,
            correspondence: common.into_iter().collect(),
        })
    }

    pub fn correspondence(&self) -> &[u32] {
        &self.correspondence
    }

    pub fn side(&self, side: StyleTag) -> &LabelMap {
        match side {
            StyleTag::A => &self.labels_a,
            StyleTag::B => &self.labels_b,
        }
    }

    /// Indicator of a corresponding label in the chosen map.
    pub fn region_mask<S: Scalar>(&self, side: StyleTag, label: u32) -> Result<Tensor<S>> {
        if !self.correspondence.contains(&label) {
            return Err(Error::Lookup(format!(
                "label {label} not in correspondence {:?}",
                self.correspondence
            )));
        }
        Ok(self.side(side).indicator(label))
    }
}

fn largest_by_area(map: &LabelMap, candidates: &BTreeSet<u32>) -> u32 {
    let mut best = *candidates.iter().next().expect("nonempty");
    let mut best_area = 0;
    for l in candidates {
        let a = map.area(*l);
        if a > best_area {
            best_area = a;
            best = *l;
        }
    }
    best
}

/// Optional color→label assignment, JSON `{"#RRGGBB": label}`.
#[derive(Clone, Debug, Default)]
pub struct Palette {
    colors: BTreeMap<[u8; 3], u32>,
}

impl Palette {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, u32> =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("palette: {e}")))?;
        let mut colors = BTreeMap::new();
        for (hex, label) in raw {
            let h = hex.trim_start_matches('#');
            if h.len() != 6 {
                return Err(Error::Schema(format!(
                    "palette color {hex:?}: expected #RRGGBB"
                )));
            }
            let parse = |s: &str| {
                u8::from_str_radix(s, 16)
                    .map_err(|_| Error::Schema(format!("palette color {hex:?}: bad hex")))
            };
            colors.insert(
                [parse(&h[0..2])?, parse(&h[2..4])?, parse(&h[4..6])?],
                label,
            );
        }
        Ok(Palette { colors })
    }

    fn lookup(&self, rgb: [u8; 3]) -> Option<u32> {
        self.colors.get(&rgb).copied()
    }
}

fn decode_mask_colors(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut colors = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            colors.push(rgb.get_pixel(x as u32, y as u32).0);
        }
    }
    Ok((h, w, colors))
}

/// Loads and validates a mask pair against the photos' dimensions.
pub fn load_masks(
    path_a: &Path,
    path_b: &Path,
    palette: Option<&Palette>,
    photo_a: (usize, usize),
    photo_b: (usize, usize),
) -> Result<RegionMaskSet> {
    let (ha, wa, colors_a) = decode_mask_colors(path_a)?;
    let (hb, wb, colors_b) = decode_mask_colors(path_b)?;
    if (ha, wa) != photo_a {
        return Err(Error::validation(format!(
            "mask a is {ha}x{wa} but its photo is {}x{}",
            photo_a.0, photo_a.1
        )));
    }
    if (hb, wb) != photo_b {
        return Err(Error::validation(format!(
            "mask b is {hb}x{wb} but its photo is {}x{}",
            photo_b.0, photo_b.1
        )));
    }
    let (labels_a, labels_b) = match palette {
        Some(p) => (
            apply_palette(&colors_a, p, "a")?,
            apply_palette(&colors_b, p, "b")?,
        ),
        None => enumerate_colors(&colors_a, &colors_b),
    };
    RegionMaskSet::from_label_maps(
        LabelMap::new(ha, wa, labels_a)?,
        LabelMap::new(hb, wb, labels_b)?,
    )
}

fn apply_palette(colors: &[[u8; 3]], palette: &Palette, which: &str) -> Result<Vec<u32>> {
    colors
        .iter()
        .map(|c| {
            palette.lookup(*c).ok_or_else(|| {
                Error::validation(format!(
                    "mask {which}: color #{:02x}{:02x}{:02x} not in palette",
                    c[0], c[1], c[2]
                ))
            })
        })
        .collect()
}

/// Joint deterministic enumeration: distinct colors of both masks, sorted by
/// packed RGB, become labels 0..n.
fn enumerate_colors(colors_a: &[[u8; 3]], colors_b: &[[u8; 3]]) -> (Vec<u32>, Vec<u32>) {
    let mut distinct: BTreeSet<u32> = BTreeSet::new();
    for c in colors_a.iter().chain(colors_b) {
        distinct.insert(pack(*c));
    }
    let index: BTreeMap<u32, u32> = distinct
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i as u32))
        .collect();
    let map = |cs: &[[u8; 3]]| cs.iter().map(|c| index[&pack(*c)]).collect();
    (map(colors_a), map(colors_b))
}

fn pack(c: [u8; 3]) -> u32 {
    ((c[0] as u32) << 16) | ((c[1] as u32) << 8) | c[2] as u32
}

/// Per-pixel selection: out[p] = outputs[labels[p]][p]. Every pixel comes
/// from exactly one region network, preventing style mixing.
pub fn composite(outputs: &BTreeMap<u32, ImageBuffer>, labels: &LabelMap) -> Result<ImageBuffer> {
    let (h, w) = (labels.height(), labels.width());
    for (label, img) in outputs {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::validation(format!(
                "output for region {label} is {}x{} but the label map is {h}x{w}",
                img.height(),
                img.width()
            )));
        }
    }
    let mut out = ImageBuffer::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let l = labels.label_at(y, x);
            let src = outputs
                .get(&l)
                .ok_or_else(|| Error::validation(format!("no output supplied for region {l}")))?;
            for c in 0..3 {
                out.set(c, y, x, src.get(c, y, x));
            }
        }
    }
    Ok(out)
}
