//! Every loss term: perceptual content distance, masked Gram/style distance,
//! cycle-consistency, self-consistency, the joint style loss, the complete
//! training objective, and its six-way sub-loss decomposition.
//!
//! Two routes exist on purpose. The value-level functions here compute
//! losses with plain loops over extracted feature pyramids; the
//! [`LossContext`] builders record the same quantities on an autodiff graph
//! for training. Tests hold the two routes against each other.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, Backbone, FeaturePyramid};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image_io::ImageBuffer;
use crate::regions::{composite, LabelMap, RegionMaskSet};
use crate::stylenet::{
    bind_pair, forward_region, PairBinding, StyleNetworkPair, StyleTag, Trainable,
};
use crate::tensor::{Scalar, Tensor};

/// Weights of the complete objective. `lambda_l` exists for the
/// direct-optimization baseline's sake and must stay zero on the training
/// path (the photorealism regularizer it would scale is out of scope).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 1.0,
            lambda_s: 10.0,
            lambda_l: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_s >= 0.0 && self.lambda_l >= 0.0) {
            return Err(Error::validation("loss weights must be nonnegative"));
        }
        if self.lambda_l != 0.0 {
            return Err(Error::validation(
                "lambda_l must be 0: the smoothing regularizer is not implemented",
            ));
        }
        Ok(())
    }
}

/// The six gradient-step targets the trainer draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubLossId {
    /// Round trip of photo b: g_b(g_a(x_b)) ≈ x_b.
    CycleB,
    /// Round trip of photo a: g_a(g_b(x_a)) ≈ x_a.
    CycleA,
    /// g_a(x_a) ≈ x_a.
    SelfA,
    /// g_b(x_b) ≈ x_b.
    SelfB,
    /// Style of g_a(x_b) matches x_a.
    StyleBa,
    /// Style of g_b(x_a) matches x_b.
    StyleAb,
}

impl SubLossId {
    pub const ALL: [SubLossId; 6] = [
        SubLossId::CycleB,
        SubLossId::CycleA,
        SubLossId::SelfA,
        SubLossId::SelfB,
        SubLossId::StyleBa,
        SubLossId::StyleAb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubLossId::CycleB => "cycle_b",
            SubLossId::CycleA => "cycle_a",
            SubLossId::SelfA => "self_a",
            SubLossId::SelfB => "self_b",
            SubLossId::StyleBa => "style_ba",
            SubLossId::StyleAb => "style_ab",
        }
    }

    pub fn is_style(self) -> bool {
        matches!(self, SubLossId::StyleBa | SubLossId::StyleAb)
    }

    /// λ_c for the content-group terms, λ_s for the style terms.
    pub fn weight(self, w: &LossWeights) -> f64 {
        if self.is_style() {
            w.lambda_s
        } else {
            w.lambda_c
        }
    }
}

/// Channel-by-channel second-moment matrix of a feature map.
#[derive(Clone, Debug)]
pub struct GramMatrix<S: Scalar> {
    pub values: Tensor<S>,
    /// Sum of mask weights used in the normalization (H·W when unmasked).
    pub mass: f64,
}

/// G[i,j] = (1/(C·M)) Σ_p mask[p]·f[i,p]·f[j,p], straightforward loops.
pub fn gram<S: Scalar>(feature: &Tensor<S>, mask: Option<&Tensor<S>>) -> Result<GramMatrix<S>> {
    let (c, h, w) = feature.dims3();
    let p = h * w;
    if let Some(m) = mask {
        if m.shape() != [h, w] {
            return Err(Error::validation(format!(
                "mask {:?} does not match feature spatial size {h}x{w}",
                m.shape()
            )));
        }
    }
    let mass = match mask {
        Some(m) => m.data().iter().map(|v| v.to_f64()).sum::<f64>(),
        None => p as f64,
    };
    if mass <= 0.0 {
        return Err(Error::DegenerateRegion(
            "all-zero mask: no sites to correlate".into(),
        ));
    }
    let norm = 1.0 / (c as f64 * mass);
    let f = feature.data();
    let mut values = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in i..c {
            let (fi, fj) = (&f[i * p..(i + 1) * p], &f[j * p..(j + 1) * p]);
            let mut acc = 0.0f64;
            match mask {
                Some(m) => {
                    for ((a, b), mv) in fi.iter().zip(fj).zip(m.data()) {
                        acc += mv.to_f64() * a.to_f64() * b.to_f64();
                    }
                }
                None => {
                    for (a, b) in fi.iter().zip(fj) {
                        acc += a.to_f64() * b.to_f64();
                    }
                }
            }
            let v = S::from_f64(norm * acc);
            values.data_mut()[i * c + j] = v;
            values.data_mut()[j * c + i] = v;
        }
    }
    Ok(GramMatrix { values, mass })
}

/// Σ over tap layers of (1/(C·H·W))·‖f_l − g_l‖²; zero iff the pyramids are
/// elementwise equal.
pub fn content_loss<S: Scalar>(f: &FeaturePyramid<S>, g: &FeaturePyramid<S>) -> Result<f64> {
    if f.keys() != g.keys() {
        return Err(Error::validation(format!(
            "pyramids tap different layers: {:?} vs {:?}",
            f.keys(),
            g.keys()
        )));
    }
    let mut total = 0.0f64;
    for ((name, fl), (_, gl)) in f.entries().iter().zip(g.entries()) {
        if fl.shape() != gl.shape() {
            return Err(Error::validation(format!(
                "layer {name}: shape {:?} vs {:?}",
                fl.shape(),
                gl.shape()
            )));
        }
        let mut acc = 0.0f64;
        for (a, b) in fl.data().iter().zip(gl.data()) {
            let d = a.to_f64() - b.to_f64();
            acc += d * d;
        }
        total += acc / fl.len() as f64;
    }
    Ok(total)
}

/// A side of a mask set, as handed to the style loss.
#[derive(Clone, Copy)]
pub struct RegionView<'a> {
    pub set: &'a RegionMaskSet,
    pub side: StyleTag,
}

/// Σ over tap layers and corresponding regions of the squared Frobenius
/// distance between masked Grams. Absent masks treat the whole image as one
/// region. (Region, layer) pairs whose mask empties out after downsampling
/// are skipped with a warning.
pub fn style_loss<S: Scalar>(
    f: &FeaturePyramid<S>,
    style: &FeaturePyramid<S>,
    masks_f: Option<RegionView<'_>>,
    masks_style: Option<RegionView<'_>>,
) -> Result<f64> {
    if f.keys() != style.keys() {
        return Err(Error::validation(format!(
            "pyramids tap different layers: {:?} vs {:?}",
            f.keys(),
            style.keys()
        )));
    }
    let (mf, ms) = match (masks_f, masks_style) {
        (None, None) => (None, None),
        (Some(a), Some(b)) => {
            if a.set.correspondence() != b.set.correspondence() {
                return Err(Error::Correspondence(format!(
                    "mask views disagree on regions: {:?} vs {:?}",
                    a.set.correspondence(),
                    b.set.correspondence()
                )));
            }
            (Some(a), Some(b))
        }
        _ => {
            return Err(Error::validation(
                "style_loss needs masks for both pyramids or neither",
            ))
        }
    };

    let mut total = 0.0f64;
    for ((name, fl), (_, sl)) in f.entries().iter().zip(style.entries()) {
        let (_, fh, _) = fl.dims3();
        let (_, sh, _) = sl.dims3();
        let factor_f = (f.source_shape().0 / fh).max(1);
        let factor_s = (style.source_shape().0 / sh).max(1);
        match (mf, ms) {
            (None, None) => {
                let gf = gram(fl, None)?;
                let gs = gram(sl, None)?;
                total += frob_sq(&gf.values, &gs.values);
            }
            (Some(vf), Some(vs)) => {
                let labels_f = vf.set.side(vf.side).downsample(factor_f);
                let labels_s = vs.set.side(vs.side).downsample(factor_s);
                for region in vf.set.correspondence() {
                    let ind_f: Tensor<S> = labels_f.indicator(*region);
                    let ind_s: Tensor<S> = labels_s.indicator(*region);
                    let mass_f: f64 = ind_f.data().iter().map(|v| v.to_f64()).sum();
                    let mass_s: f64 = ind_s.data().iter().map(|v| v.to_f64()).sum();
                    if mass_f <= 0.0 || mass_s <= 0.0 {
                        log::warn!(
                            "region {region} vanished at layer {name}; skipping its style term"
                        );
                        continue;
                    }
                    let gf = gram(fl, Some(&ind_f))?;
                    let gs = gram(sl, Some(&ind_s))?;
                    total += frob_sq(&gf.values, &gs.values);
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(total)
}

fn frob_sq<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    acc
}

/// A stylization as the losses see it: something that maps an image to an
/// image, given which photo's region layout the content follows.
pub trait Stylizer {
    fn apply(&self, image: &ImageBuffer, content_side: StyleTag) -> Result<ImageBuffer>;
}

/// The identity map; satisfies both consistency losses exactly.
pub struct IdentityStylizer;

impl Stylizer for IdentityStylizer {
    fn apply(&self, image: &ImageBuffer, _content_side: StyleTag) -> Result<ImageBuffer> {
        Ok(image.clone())
    }
}

/// Runs every region's network view for one style and composites the
/// results by the content side's label map.
pub struct PairStylizer<'a, S: Scalar> {
    pub pair: &'a StyleNetworkPair<S>,
    pub style: StyleTag,
    pub masks: &'a RegionMaskSet,
}

impl<'a, S: Scalar> Stylizer for PairStylizer<'a, S> {
    fn apply(&self, image: &ImageBuffer, content_side: StyleTag) -> Result<ImageBuffer> {
        apply_composite(self.pair, self.style, image, self.masks.side(content_side))
    }
}

/// Forward every region network on `image` and assemble the output by label.
pub fn apply_composite<S: Scalar>(
    pair: &StyleNetworkPair<S>,
    style: StyleTag,
    image: &ImageBuffer,
    labels: &LabelMap,
) -> Result<ImageBuffer> {
    if (labels.height(), labels.width()) != (image.height(), image.width()) {
        return Err(Error::validation(format!(
            "label map {}x{} does not match image {}x{}",
            labels.height(),
            labels.width(),
            image.height(),
            image.width()
        )));
    }
    let mut outputs = BTreeMap::new();
    for label in labels.present() {
        let view = pair.view(style, label)?;
        outputs.insert(label, view.forward(image)?);
    }
    composite(&outputs, labels)
}

/// First + second round-trip content terms (both cycle directions).
pub fn cycle_loss<S: Scalar>(
    g_a: &dyn Stylizer,
    g_b: &dyn Stylizer,
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    backbone: &Backbone<S>,
) -> Result<f64> {
    Ok(
        sub_loss_value(SubLossId::CycleB, g_a, g_b, x_a, x_b, None, backbone)?
            + sub_loss_value(SubLossId::CycleA, g_a, g_b, x_a, x_b, None, backbone)?,
    )
}

/// Both self-consistency content terms.
pub fn self_loss<S: Scalar>(
    g_a: &dyn Stylizer,
    g_b: &dyn Stylizer,
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    backbone: &Backbone<S>,
) -> Result<f64> {
    Ok(
        sub_loss_value(SubLossId::SelfA, g_a, g_b, x_a, x_b, None, backbone)?
            + sub_loss_value(SubLossId::SelfB, g_a, g_b, x_a, x_b, None, backbone)?,
    )
}

/// Style loss calculated for both styles.
pub fn joint_style_loss<S: Scalar>(
    g_a: &dyn Stylizer,
    g_b: &dyn Stylizer,
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    masks: Option<&RegionMaskSet>,
    backbone: &Backbone<S>,
) -> Result<f64> {
    Ok(
        sub_loss_value(SubLossId::StyleBa, g_a, g_b, x_a, x_b, masks, backbone)?
            + sub_loss_value(SubLossId::StyleAb, g_a, g_b, x_a, x_b, masks, backbone)?,
    )
}

/// λ_c·(cycle + self) + λ_s·joint style.
pub fn total_loss<S: Scalar>(
    weights: &LossWeights,
    g_a: &dyn Stylizer,
    g_b: &dyn Stylizer,
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    masks: Option<&RegionMaskSet>,
    backbone: &Backbone<S>,
) -> Result<f64> {
    weights.validate()?;
    let mut total = 0.0f64;
    for id in SubLossId::ALL {
        total += id.weight(weights) * sub_loss_value(id, g_a, g_b, x_a, x_b, masks, backbone)?;
    }
    Ok(total)
}

/// One unweighted term of the decomposition. The λ-weighted sum over all six
/// ids reproduces [`total_loss`].
pub fn sub_loss_value<S: Scalar>(
    id: SubLossId,
    g_a: &dyn Stylizer,
    g_b: &dyn Stylizer,
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    masks: Option<&RegionMaskSet>,
    backbone: &Backbone<S>,
) -> Result<f64> {
    let content = |rendered: &ImageBuffer, original: &ImageBuffer| -> Result<f64> {
        content_loss(
            &extract_features(backbone, rendered)?,
            &extract_features(backbone, original)?,
        )
    };
    match id {
        SubLossId::CycleB => {
            let y = g_b.apply(&g_a.apply(x_b, StyleTag::B)?, StyleTag::B)?;
            content(&y, x_b)
        }
        SubLossId::CycleA => {
            let y = g_a.apply(&g_b.apply(x_a, StyleTag::A)?, StyleTag::A)?;
            content(&y, x_a)
        }
        SubLossId::SelfA => content(&g_a.apply(x_a, StyleTag::A)?, x_a),
        SubLossId::SelfB => content(&g_b.apply(x_b, StyleTag::B)?, x_b),
        SubLossId::StyleBa => {
            let y = g_a.apply(x_b, StyleTag::B)?;
            style_loss(
                &extract_features(backbone, &y)?,
                &extract_features(backbone, x_a)?,
                masks.map(|set| RegionView {
                    set,
                    side: StyleTag::B,
                }),
                masks.map(|set| RegionView {
                    set,
                    side: StyleTag::A,
                }),
            )
        }
        SubLossId::StyleAb => {
            let y = g_b.apply(x_a, StyleTag::A)?;
            style_loss(
                &extract_features(backbone, &y)?,
                &extract_features(backbone, x_b)?,
                masks.map(|set| RegionView {
                    set,
                    side: StyleTag::A,
                }),
                masks.map(|set| RegionView {
                    set,
                    side: StyleTag::B,
                }),
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Graph route: the trainer's view of the same six terms.
// ---------------------------------------------------------------------------

struct LayerTarget<S: Scalar> {
    pyr_a: Tensor<S>,
    pyr_b: Tensor<S>,
    /// Per corresponding region: downsampled masks (None once degenerate)
    /// and the constant Gram targets of the two style images.
    region_masks_a: Vec<Option<Arc<Tensor<S>>>>,
    region_masks_b: Vec<Option<Arc<Tensor<S>>>>,
    gram_a: Vec<Option<Tensor<S>>>,
    gram_b: Vec<Option<Tensor<S>>>,
}

/// Everything constant across training iterations: target pyramids, target
/// Grams, downsampled region masks, full-resolution compositing masks.
/// Deliberately does not borrow the network pair: the trainer mutates it
/// between steps and rebinds it onto a fresh graph each iteration.
pub struct LossContext<'a, S: Scalar> {
    pub backbone: &'a Backbone<S>,
    pub x_a: &'a ImageBuffer,
    pub x_b: &'a ImageBuffer,
    pub masks: &'a RegionMaskSet,
    pub weights: LossWeights,
    x_a_tensor: Tensor<S>,
    x_b_tensor: Tensor<S>,
    full_masks_a: Vec<(u32, Arc<Tensor<S>>)>,
    full_masks_b: Vec<(u32, Arc<Tensor<S>>)>,
    layers: Vec<LayerTarget<S>>,
}

impl<'a, S: Scalar> LossContext<'a, S> {
    pub fn new(
        backbone: &'a Backbone<S>,
        x_a: &'a ImageBuffer,
        x_b: &'a ImageBuffer,
        masks: &'a RegionMaskSet,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let la = masks.side(StyleTag::A);
        let lb = masks.side(StyleTag::B);
        if (la.height(), la.width()) != (x_a.height(), x_a.width()) {
            return Err(Error::validation("mask a does not match image a"));
        }
        if (lb.height(), lb.width()) != (x_b.height(), x_b.width()) {
            return Err(Error::validation("mask b does not match image b"));
        }
        let pyr_a = extract_features(backbone, x_a)?;
        let pyr_b = extract_features(backbone, x_b)?;
        let strides = backbone.tap_strides();

        let regions = masks.correspondence().to_vec();
        let mut layers = Vec::new();
        for (i, ((name, ta), (_, tb))) in pyr_a.entries().iter().zip(pyr_b.entries()).enumerate() {
            let factor = strides[i];
            let ds_a = la.downsample(factor);
            let ds_b = lb.downsample(factor);
            let mut region_masks_a = Vec::new();
            let mut region_masks_b = Vec::new();
            let mut gram_a = Vec::new();
            let mut gram_b = Vec::new();
            for region in &regions {
                let ind_a: Tensor<S> = ds_a.indicator(*region);
                let ind_b: Tensor<S> = ds_b.indicator(*region);
                let mass_a: f64 = ind_a.data().iter().map(|v| v.to_f64()).sum();
                let mass_b: f64 = ind_b.data().iter().map(|v| v.to_f64()).sum();
                if mass_a <= 0.0 || mass_b <= 0.0 {
                    log::warn!(
                        "region {region} vanished at layer {name}; its style term is skipped"
                    );
                    region_masks_a.push(None);
                    region_masks_b.push(None);
                    gram_a.push(None);
                    gram_b.push(None);
                    continue;
                }
                let ind_a = Arc::new(ind_a);
                let ind_b = Arc::new(ind_b);
                // Targets computed with the graph op so the training-time
                // difference G(rendered) − G(target) is internally consistent.
                gram_a.push(Some(graph_gram(ta, Some(ind_a.clone()))));
                gram_b.push(Some(graph_gram(tb, Some(ind_b.clone()))));
                region_masks_a.push(Some(ind_a));
                region_masks_b.push(Some(ind_b));
            }
            layers.push(LayerTarget {
                pyr_a: ta.clone(),
                pyr_b: tb.clone(),
                region_masks_a,
                region_masks_b,
                gram_a,
                gram_b,
            });
        }

        let full_masks_a = regions
            .iter()
            .map(|r| (*r, Arc::new(la.indicator::<S>(*r))))
            .collect();
        let full_masks_b = regions
            .iter()
            .map(|r| (*r, Arc::new(lb.indicator::<S>(*r))))
            .collect();

        Ok(LossContext {
            backbone,
            x_a,
            x_b,
            masks,
            weights,
            x_a_tensor: x_a.to_tensor(),
            x_b_tensor: x_b.to_tensor(),
            full_masks_a,
            full_masks_b,
            layers,
        })
    }

    /// Checks the pair covers every corresponding region of this context.
    pub fn check_pair(&self, pair: &StyleNetworkPair<S>) -> Result<()> {
        for region in self.masks.correspondence() {
            if !pair.region_labels().contains(region) {
                return Err(Error::Lookup(format!(
                    "pair was built without region {region}"
                )));
            }
        }
        Ok(())
    }

    pub fn bind(
        &self,
        g: &mut Graph<S>,
        pair: &StyleNetworkPair<S>,
        trainable: Trainable,
    ) -> PairBinding {
        bind_pair(g, pair, trainable, true)
    }

    /// Mask-weighted sum of per-region network outputs, on the graph.
    fn composite_graph(
        &self,
        g: &mut Graph<S>,
        cfg: &crate::stylenet::NetConfig,
        binding: &PairBinding,
        style: StyleTag,
        content_side: StyleTag,
        input: NodeId,
    ) -> Result<NodeId> {
        let masks = match content_side {
            StyleTag::A => &self.full_masks_a,
            StyleTag::B => &self.full_masks_b,
        };
        let mut acc: Option<NodeId> = None;
        for (region, mask) in masks {
            let y = forward_region(g, cfg, binding, style, *region, input)?;
            let masked = if masks.len() == 1 {
                y // single full-coverage region: the mask is all ones
            } else {
                g.mul_mask(y, mask.clone())
            };
            acc = Some(match acc {
                None => masked,
                Some(prev) => g.add(prev, masked),
            });
        }
        Ok(acc.expect("at least one region"))
    }

    fn content_terms(
        &self,
        g: &mut Graph<S>,
        rendered: NodeId,
        target_of: impl Fn(&LayerTarget<S>) -> &Tensor<S>,
    ) -> NodeId {
        let taps = self.backbone.features_graph(g, rendered);
        let mut terms = Vec::new();
        for (layer, (_, tap)) in self.layers.iter().zip(&taps) {
            let target = g.constant(target_of(layer).clone());
            let scale = 1.0 / g.value(*tap).len() as f64;
            terms.push((1.0, g.sq_dist(*tap, target, scale)));
        }
        g.weighted_sum(terms)
    }

    fn style_terms(
        &self,
        g: &mut Graph<S>,
        rendered: NodeId,
        content_side: StyleTag,
        style_side: StyleTag,
    ) -> NodeId {
        let taps = self.backbone.features_graph(g, rendered);
        let mut terms = Vec::new();
        for (layer, (_, tap)) in self.layers.iter().zip(&taps) {
            let (masks, targets) = match (content_side, style_side) {
                (StyleTag::B, StyleTag::A) => (&layer.region_masks_b, &layer.gram_a),
                (StyleTag::A, StyleTag::B) => (&layer.region_masks_a, &layer.gram_b),
                _ => unreachable!("style terms always cross sides"),
            };
            for (mask, target) in masks.iter().zip(targets) {
                let (Some(mask), Some(target)) = (mask, target) else {
                    continue;
                };
                let gm = if masks.len() == 1 {
                    g.gram(*tap, None)
                } else {
                    g.gram(*tap, Some(mask.clone()))
                };
                let t = g.constant(target.clone());
                terms.push((1.0, g.sq_dist(gm, t, 1.0)));
            }
        }
        g.weighted_sum(terms)
    }

    /// Records one unweighted sub-loss on the graph and returns its scalar.
    pub fn build_sub_loss(
        &self,
        g: &mut Graph<S>,
        pair: &StyleNetworkPair<S>,
        binding: &PairBinding,
        id: SubLossId,
    ) -> Result<NodeId> {
        let cfg = pair.config();
        match id {
            SubLossId::CycleB => {
                let x = g.constant(self.x_b_tensor.clone());
                let y1 = self.composite_graph(g, cfg, binding, StyleTag::A, StyleTag::B, x)?;
                let y2 = self.composite_graph(g, cfg, binding, StyleTag::B, StyleTag::B, y1)?;
                Ok(self.content_terms(g, y2, |l| &l.pyr_b))
            }
            SubLossId::CycleA => {
                let x = g.constant(self.x_a_tensor.clone());
                let y1 = self.composite_graph(g, cfg, binding, StyleTag::B, StyleTag::A, x)?;
                let y2 = self.composite_graph(g, cfg, binding, StyleTag::A, StyleTag::A, y1)?;
                Ok(self.content_terms(g, y2, |l| &l.pyr_a))
            }
            SubLossId::SelfA => {
                let x = g.constant(self.x_a_tensor.clone());
                let y = self.composite_graph(g, cfg, binding, StyleTag::A, StyleTag::A, x)?;
                Ok(self.content_terms(g, y, |l| &l.pyr_a))
            }
            SubLossId::SelfB => {
                let x = g.constant(self.x_b_tensor.clone());
                let y = self.composite_graph(g, cfg, binding, StyleTag::B, StyleTag::B, x)?;
                Ok(self.content_terms(g, y, |l| &l.pyr_b))
            }
            SubLossId::StyleBa => {
                let x = g.constant(self.x_b_tensor.clone());
                let y = self.composite_graph(g, cfg, binding, StyleTag::A, StyleTag::B, x)?;
                Ok(self.style_terms(g, y, StyleTag::B, StyleTag::A))
            }
            SubLossId::StyleAb => {
                let x = g.constant(self.x_a_tensor.clone());
                let y = self.composite_graph(g, cfg, binding, StyleTag::B, StyleTag::A, x)?;
                Ok(self.style_terms(g, y, StyleTag::A, StyleTag::B))
            }
        }
    }

    /// λ-weighted sum of all six sub-losses on one graph.
    pub fn build_total_loss(
        &self,
        g: &mut Graph<S>,
        pair: &StyleNetworkPair<S>,
        binding: &PairBinding,
    ) -> Result<NodeId> {
        let mut terms = Vec::new();
        for id in SubLossId::ALL {
            let s = self.build_sub_loss(g, pair, binding, id)?;
            terms.push((id.weight(&self.weights), s));
        }
        Ok(g.weighted_sum(terms))
    }

    /// Forward-only evaluation of the complete loss at the pair's current
    /// parameters.
    pub fn eval_total_loss(&self, pair: &StyleNetworkPair<S>) -> Result<f64> {
        let mut g = Graph::new();
        let binding = bind_pair(&mut g, pair, Trainable::All, false);
        let node = self.build_total_loss(&mut g, pair, &binding)?;
        Ok(g.value(node).item().to_f64())
    }
}

/// Gram of a constant tensor through the graph op (keeps the training-time
/// target numerically identical to what the graph computes for features).
fn graph_gram<S: Scalar>(feature: &Tensor<S>, mask: Option<Arc<Tensor<S>>>) -> Tensor<S> {
    let mut g = Graph::new();
    let f = g.constant(feature.clone());
    let gm = g.gram(f, mask);
    g.value(gm).clone()
}

// ---------------------------------------------------------------------------
// Direct-optimization baseline: gradient descent over pixels.
// ---------------------------------------------------------------------------

/// One step record of the baseline optimizer.
#[derive(Clone, Copy, Debug)]
pub struct BaselineStep {
    pub step: usize,
    pub objective: f64,
    pub step_size: f64,
}

/// Stylizes `x_b` toward the style of `x_a` by descending the weighted
/// content+style objective over pixel values, starting from `x_b`.
/// Backtracking halves the step until the objective does not increase, so
/// the trace is non-increasing by construction.
pub fn baseline_direct_transfer<S: Scalar>(
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    weights: &LossWeights,
    backbone: &Backbone<S>,
    steps: usize,
) -> Result<ImageBuffer> {
    baseline_direct_transfer_traced(x_a, x_b, weights, backbone, steps).map(|(img, _)| img)
}

pub fn baseline_direct_transfer_traced<S: Scalar>(
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    weights: &LossWeights,
    backbone: &Backbone<S>,
    steps: usize,
) -> Result<(ImageBuffer, Vec<BaselineStep>)> {
    weights.validate()?;
    if steps == 0 {
        return Err(Error::validation("steps must be >= 1"));
    }
    x_a.validate()?;
    x_b.validate()?;

    let pyr_a = extract_features(backbone, x_a)?;
    let pyr_b = extract_features(backbone, x_b)?;
    let gram_a: Vec<Tensor<S>> = pyr_a
        .entries()
        .iter()
        .map(|(_, t)| graph_gram(t, None))
        .collect();

    let objective = |x: &Tensor<S>, want_grad: bool| -> Result<(f64, Option<Tensor<S>>)> {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), want_grad);
        let taps = backbone.features_graph(&mut g, xid);
        let mut terms = Vec::new();
        for (i, (_, tap)) in taps.iter().enumerate() {
            // Content against x_b.
            let target = g.constant(pyr_b.entries()[i].1.clone());
            let scale = 1.0 / g.value(*tap).len() as f64;
            let c = g.sq_dist(*tap, target, scale);
            terms.push((weights.lambda_c, c));
            // Style against x_a.
            let gm = g.gram(*tap, None);
            let t = g.constant(gram_a[i].clone());
            let s = g.sq_dist(gm, t, 1.0);
            terms.push((weights.lambda_s, s));
        }
        let loss = g.weighted_sum(terms);
        let value = g.value(loss).item().to_f64();
        if want_grad {
            let grads = g.backward(loss);
            Ok((value, grads.get(xid).cloned()))
        } else {
            Ok((value, None))
        }
    };

    let mut x = x_b.to_tensor::<S>();
    let mut trace = Vec::with_capacity(steps + 1);
    let (mut current, _) = objective(&x, false)?;
    if !current.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: format!("objective {current}"),
        });
    }
    trace.push(BaselineStep {
        step: 0,
        objective: current,
        step_size: 0.0,
    });

    let mut step_size = 0.1f64;
    'outer: for step in 1..=steps {
        let (value, grad) = objective(&x, true)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("objective {value}"),
            });
        }
        let grad = grad.expect("pixel gradient");
        let mut t = step_size;
        for _attempt in 0..40 {
            let mut candidate = x.clone();
            for (c, gv) in candidate.data_mut().iter_mut().zip(grad.data()) {
                let moved = c.to_f64() - t * gv.to_f64();
                *c = S::from_f64(moved.clamp(0.0, 1.0));
            }
            let (cand_val, _) = objective(&candidate, false)?;
            if !cand_val.is_finite() {
                t *= 0.5;
                continue;
            }
            if cand_val <= current {
                x = candidate;
                current = cand_val;
                step_size = (t * 1.5).min(10.0);
                trace.push(BaselineStep {
                    step,
                    objective: current,
                    step_size: t,
                });
                continue 'outer;
            }
            t *= 0.5;
        }
        // No usable step: the iterate is (numerically) stationary. The
        // remaining steps would not move, so stop and pad the trace.
        for s in step..=steps {
            trace.push(BaselineStep {
                step: s,
                objective: current,
                step_size: 0.0,
            });
        }
        break;
    }
    Ok((ImageBuffer::from_tensor(&x)?, trace))
}
