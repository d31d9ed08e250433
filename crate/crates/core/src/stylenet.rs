//! The transformation network pair and its parameter-sharing scheme.
//!
//! One convolutional trunk is shared by every (style, region) combination;
//! what distinguishes them is the instance-normalization scale/shift set
//! selected at forward time. The trunk is an encoder (9×9, then two strided
//! 3×3), five residual blocks of paired 1×1 convolutions, and a mirrored
//! decoder, with two skip connections carrying encoder activations over the
//! residual stack into the decoder. 16 convolutions in total, 10 of them in
//! the residual blocks, instance norm after every layer except the last,
//! sigmoid output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PadMode};
use crate::image_io::ImageBuffer;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub in_epsilon: f64,
    pub output_activation: OutputActivation,
    /// Escape hatch: give every region its own trunk instead of sharing one.
    pub per_region_trunks: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            residual_blocks: 5,
            in_epsilon: 1e-5,
            output_activation: OutputActivation::Sigmoid,
            per_region_trunks: false,
        }
    }
}

impl NetConfig {
    pub fn conv_count(&self) -> usize {
        6 + 2 * self.residual_blocks
    }

    pub fn normalized_count(&self) -> usize {
        self.conv_count() - 1
    }
}

/// Static description of one convolution layer, used by audits and init.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// 1-based position in the network.
    pub index: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub normalized: bool,
    pub in_residual_block: bool,
    /// Whether a ×2 nearest-neighbor upsample precedes this conv.
    pub upsample_before: bool,
}

/// A skip connection: the activation of `from_conv`'s block is added to the
/// tensor entering `to_conv`'s block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipSpec {
    pub from_conv: usize,
    pub to_conv: usize,
}

pub fn conv_specs(cfg: &NetConfig) -> Vec<ConvSpec> {
    let b = cfg.base_channels;
    let mut specs = vec![
        ConvSpec {
            index: 1,
            kernel: 9,
            stride: 1,
            in_channels: 3,
            out_channels: b,
            normalized: true,
            in_residual_block: false,
            upsample_before: false,
        },
        ConvSpec {
            index: 2,
            kernel: 3,
            stride: 2,
            in_channels: b,
            out_channels: 2 * b,
            normalized: true,
            in_residual_block: false,
            upsample_before: false,
        },
        ConvSpec {
            index: 3,
            kernel: 3,
            stride: 2,
            in_channels: 2 * b,
            out_channels: 4 * b,
            normalized: true,
            in_residual_block: false,
            upsample_before: false,
        },
    ];
    for i in 0..2 * cfg.residual_blocks {
        specs.push(ConvSpec {
            index: 4 + i,
            kernel: 1,
            stride: 1,
            in_channels: 4 * b,
            out_channels: 4 * b,
            normalized: true,
            in_residual_block: true,
            upsample_before: false,
        });
    }
    let n = specs.len();
    specs.push(ConvSpec {
        index: n + 1,
        kernel: 3,
        stride: 1,
        in_channels: 4 * b,
        out_channels: 2 * b,
        normalized: true,
        in_residual_block: false,
        upsample_before: true,
    });
    specs.push(ConvSpec {
        index: n + 2,
        kernel: 3,
        stride: 1,
        in_channels: 2 * b,
        out_channels: b,
        normalized: true,
        in_residual_block: false,
        upsample_before: true,
    });
    specs.push(ConvSpec {
        index: n + 3,
        kernel: 9,
        stride: 1,
        in_channels: b,
        out_channels: 3,
        normalized: false,
        in_residual_block: false,
        upsample_before: false,
    });
    specs
}

/// The two skips jump the residual stack: encoder conv3 feeds the
/// ante-penultimate block's input, encoder conv2 the penultimate's.
pub fn skip_specs(cfg: &NetConfig) -> [SkipSpec; 2] {
    let count = cfg.conv_count();
    [
        SkipSpec {
            from_conv: 3,
            to_conv: count - 2,
        },
        SkipSpec {
            from_conv: 2,
            to_conv: count - 1,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StyleTag {
    A,
    B,
}

impl StyleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleTag::A => "a",
            StyleTag::B => "b",
        }
    }

    pub fn other(self) -> StyleTag {
        match self {
            StyleTag::A => StyleTag::B,
            StyleTag::B => StyleTag::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvTensors<S: Scalar> {
    kernel: Tensor<S>,
    bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
struct InTensors<S: Scalar> {
    scale: Tensor<S>,
    shift: Tensor<S>,
}

/// Identifies a single parameter tensor inside a [`StyleNetworkPair`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    TrunkKernel {
        trunk: usize,
        conv: usize,
    },
    TrunkBias {
        trunk: usize,
        conv: usize,
    },
    InScale {
        style: StyleTag,
        region: u32,
        layer: usize,
    },
    InShift {
        style: StyleTag,
        region: u32,
        layer: usize,
    },
}

impl ParamKey {
    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            ParamKey::TrunkKernel { .. } | ParamKey::TrunkBias { .. }
        )
    }
}

/// Which parameters an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trainable {
    All,
    InstanceNormOnly,
}

/// Shared trunk plus one instance-norm set per (style, region).
#[derive(Clone, Debug)]
pub struct StyleNetworkPair<S: Scalar> {
    config: NetConfig,
    trunks: Vec<Vec<ConvTensors<S>>>,
    trunk_of_region: BTreeMap<u32, usize>,
    in_params: BTreeMap<(StyleTag, u32), Vec<InTensors<S>>>,
}

pub const MAX_REGIONS: usize = 8;

fn init_trunk<S: Scalar>(cfg: &NetConfig, rng: &mut Rng) -> Vec<ConvTensors<S>> {
    conv_specs(cfg)
        .iter()
        .map(|spec| {
            let mut layer_rng = rng.fork(spec.index as u64);
            let fan_in = spec.in_channels * spec.kernel * spec.kernel;
            // He scaling for the ReLU layers; plain fan-in for the sigmoid head.
            let gain = if spec.normalized { 2.0 } else { 1.0 };
            let std = (gain / fan_in as f64).sqrt();
            let mut kernel = Tensor::<S>::zeros(&[
                spec.out_channels,
                spec.in_channels,
                spec.kernel,
                spec.kernel,
            ]);
            kernel.fill_normal(&mut layer_rng, std);
            ConvTensors {
                kernel,
                bias: Tensor::zeros(&[spec.out_channels]),
            }
        })
        .collect()
}

fn fresh_in_set<S: Scalar>(cfg: &NetConfig) -> Vec<InTensors<S>> {
    conv_specs(cfg)
        .iter()
        .filter(|s| s.normalized)
        .map(|s| InTensors {
            scale: Tensor::full(&[s.out_channels], S::ONE),
            shift: Tensor::zeros(&[s.out_channels]),
        })
        .collect()
}

/// Builds a freshly initialized pair for the given semantic regions.
pub fn build_pair<S: Scalar>(
    config: &NetConfig,
    region_labels: &[u32],
    seed: u64,
) -> Result<StyleNetworkPair<S>> {
    let mut labels: Vec<u32> = region_labels.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return Err(Error::validation("at least one region label required"));
    }
    if labels.len() > MAX_REGIONS {
        return Err(Error::Capacity(format!(
            "regions>{MAX_REGIONS}: got {}",
            labels.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let trunk_count = if config.per_region_trunks {
        labels.len()
    } else {
        1
    };
    let trunks: Vec<_> = (0..trunk_count)
        .map(|t| {
            let mut trng = rng.fork(0x7000 + t as u64);
            init_trunk(config, &mut trng)
        })
        .collect();
    let trunk_of_region = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (*l, if config.per_region_trunks { i } else { 0 }))
        .collect();
    let mut in_params = BTreeMap::new();
    for style in [StyleTag::A, StyleTag::B] {
        for label in &labels {
            in_params.insert((style, *label), fresh_in_set(config));
        }
    }
    Ok(StyleNetworkPair {
        config: config.clone(),
        trunks,
        trunk_of_region,
        in_params,
    })
}

impl<S: Scalar> StyleNetworkPair<S> {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn region_labels(&self) -> Vec<u32> {
        self.trunk_of_region.keys().copied().collect()
    }

    pub fn trunk_count(&self) -> usize {
        self.trunks.len()
    }

    pub fn view(&self, style: StyleTag, region: u32) -> Result<NetView<'_, S>> {
        if !self.trunk_of_region.contains_key(&region) {
            return Err(Error::Lookup(format!(
                "region {region} not in this pair (has {:?})",
                self.region_labels()
            )));
        }
        Ok(NetView {
            pair: self,
            style,
            region,
        })
    }

    /// The exact set of tensors an optimizer may update in the given mode.
    pub fn trainable_keys(&self, mode: Trainable) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        if mode == Trainable::All {
            for (t, trunk) in self.trunks.iter().enumerate() {
                for conv in 0..trunk.len() {
                    keys.push(ParamKey::TrunkKernel { trunk: t, conv });
                    keys.push(ParamKey::TrunkBias { trunk: t, conv });
                }
            }
        }
        for ((style, region), set) in &self.in_params {
            for layer in 0..set.len() {
                keys.push(ParamKey::InScale {
                    style: *style,
                    region: *region,
                    layer,
                });
                keys.push(ParamKey::InShift {
                    style: *style,
                    region: *region,
                    layer,
                });
            }
        }
        keys
    }

    pub fn param(&self, key: ParamKey) -> &Tensor<S> {
        match key {
            ParamKey::TrunkKernel { trunk, conv } => &self.trunks[trunk][conv].kernel,
            ParamKey::TrunkBias { trunk, conv } => &self.trunks[trunk][conv].bias,
            ParamKey::InScale {
                style,
                region,
                layer,
            } => &self.in_params[&(style, region)][layer].scale,
            ParamKey::InShift {
                style,
                region,
                layer,
            } => &self.in_params[&(style, region)][layer].shift,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor<S> {
        match key {
            ParamKey::TrunkKernel { trunk, conv } => &mut self.trunks[trunk][conv].kernel,
            ParamKey::TrunkBias { trunk, conv } => &mut self.trunks[trunk][conv].bias,
            ParamKey::InScale {
                style,
                region,
                layer,
            } => {
                &mut self
                    .in_params
                    .get_mut(&(style, region))
                    .expect("in_params key")[layer]
                    .scale
            }
            ParamKey::InShift {
                style,
                region,
                layer,
            } => {
                &mut self
                    .in_params
                    .get_mut(&(style, region))
                    .expect("in_params key")[layer]
                    .shift
            }
        }
    }

    /// Every parameter key, conv trunk included.
    pub fn all_keys(&self) -> Vec<ParamKey> {
        self.trainable_keys(Trainable::All)
    }

    /// Throws away the instance-norm sets and installs fresh ones (scale 1,
    /// shift 0) for `labels`; the trunk is untouched. Used when adapting a
    /// trained trunk to a new image pair.
    pub fn reset_in_params(&mut self, labels: &[u32]) -> Result<()> {
        let mut sorted: Vec<u32> = labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::validation("at least one region label required"));
        }
        if sorted.len() > MAX_REGIONS {
            return Err(Error::Capacity(format!(
                "regions>{MAX_REGIONS}: got {}",
                sorted.len()
            )));
        }
        if self.config.per_region_trunks && sorted.len() > self.trunks.len() {
            return Err(Error::Capacity(format!(
                "pair has {} per-region trunks but {} regions requested; retrain from scratch",
                self.trunks.len(),
                sorted.len()
            )));
        }
        self.trunk_of_region = sorted
            .iter()
            .enumerate()
            .map(|(i, l)| (*l, if self.config.per_region_trunks { i } else { 0 }))
            .collect();
        self.in_params.clear();
        for style in [StyleTag::A, StyleTag::B] {
            for label in &sorted {
                self.in_params
                    .insert((style, *label), fresh_in_set(&self.config));
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> StyleNetworkPair<T> {
        StyleNetworkPair {
            config: self.config.clone(),
            trunks: self
                .trunks
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|c| ConvTensors {
                            kernel: c.kernel.cast(),
                            bias: c.bias.cast(),
                        })
                        .collect()
                })
                .collect(),
            trunk_of_region: self.trunk_of_region.clone(),
            in_params: self
                .in_params
                .iter()
                .map(|(k, v)| {
                    (
                        *k,
                        v.iter()
                            .map(|p| InTensors {
                                scale: p.scale.cast(),
                                shift: p.shift.cast(),
                            })
                            .collect(),
                    )
                })
                .collect(),
        }
    }
}

/// A (style, region) slice of the pair: what `g_a` or `g_b` means for one
/// semantic region.
#[derive(Clone, Copy)]
pub struct NetView<'a, S: Scalar> {
    pair: &'a StyleNetworkPair<S>,
    style: StyleTag,
    region: u32,
}

impl<'a, S: Scalar> NetView<'a, S> {
    pub fn style(&self) -> StyleTag {
        self.style
    }

    pub fn region(&self) -> u32 {
        self.region
    }

    /// Runs the network on an image. Forward-only; no gradients are kept.
    pub fn forward(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        image.validate()?;
        if image.height() < 8 || image.width() < 8 {
            return Err(Error::validation(format!(
                "input {}x{} below the 8px minimum",
                image.height(),
                image.width()
            )));
        }
        let mut g = Graph::new();
        let binding = bind_pair(&mut g, self.pair, Trainable::All, false);
        let input = g.constant(image.to_tensor::<S>());
        let out = forward_region(
            &mut g,
            self.pair.config(),
            &binding,
            self.style,
            self.region,
            input,
        )?;
        ImageBuffer::from_tensor(g.value(out))
    }
}

/// Graph-resident parameter leaves for one pair, shared by every forward
/// application recorded on the same graph.
pub struct PairBinding {
    trunk_nodes: Vec<Vec<(NodeId, NodeId)>>,
    in_nodes: BTreeMap<(StyleTag, u32), Vec<(NodeId, NodeId)>>,
    trunk_of_region: BTreeMap<u32, usize>,
    keys: Vec<(ParamKey, NodeId)>,
}

impl PairBinding {
    /// (key, node) pairs for every parameter that entered the graph as
    /// trainable, for pulling gradients after a backward pass.
    pub fn trainable_nodes(&self) -> &[(ParamKey, NodeId)] {
        &self.keys
    }
}

/// Inserts every parameter of `pair` into the graph as leaves. `trainable`
/// selects which leaves require gradients; `requires_grad` can disable
/// gradients entirely (inference).
pub fn bind_pair<S: Scalar>(
    g: &mut Graph<S>,
    pair: &StyleNetworkPair<S>,
    trainable: Trainable,
    requires_grad: bool,
) -> PairBinding {
    let conv_grad = requires_grad && trainable == Trainable::All;
    let mut keys = Vec::new();
    let trunk_nodes: Vec<Vec<(NodeId, NodeId)>> = pair
        .trunks
        .iter()
        .enumerate()
        .map(|(t, trunk)| {
            trunk
                .iter()
                .enumerate()
                .map(|(ci, conv)| {
                    let k = g.leaf(conv.kernel.clone(), conv_grad);
                    let b = g.leaf(conv.bias.clone(), conv_grad);
                    if conv_grad {
                        keys.push((ParamKey::TrunkKernel { trunk: t, conv: ci }, k));
                        keys.push((ParamKey::TrunkBias { trunk: t, conv: ci }, b));
                    }
                    (k, b)
                })
                .collect()
        })
        .collect();
    let mut in_nodes = BTreeMap::new();
    for ((style, region), set) in &pair.in_params {
        let nodes: Vec<(NodeId, NodeId)> = set
            .iter()
            .enumerate()
            .map(|(li, p)| {
                let s = g.leaf(p.scale.clone(), requires_grad);
                let h = g.leaf(p.shift.clone(), requires_grad);
                if requires_grad {
                    keys.push((
                        ParamKey::InScale {
                            style: *style,
                            region: *region,
                            layer: li,
                        },
                        s,
                    ));
                    keys.push((
                        ParamKey::InShift {
                            style: *style,
                            region: *region,
                            layer: li,
                        },
                        h,
                    ));
                }
                (s, h)
            })
            .collect();
        in_nodes.insert((*style, *region), nodes);
    }
    PairBinding {
        trunk_nodes,
        in_nodes,
        trunk_of_region: pair.trunk_of_region.clone(),
        keys,
    }
}

/// Records one network application on the graph: pad to a multiple of 4,
/// encoder, residual stack, decoder with the two skips, sigmoid, crop back.
pub fn forward_region<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &NetConfig,
    binding: &PairBinding,
    style: StyleTag,
    region: u32,
    input: NodeId,
) -> Result<NodeId> {
    let trunk_idx = *binding
        .trunk_of_region
        .get(&region)
        .ok_or_else(|| Error::Lookup(format!("region {region} not bound")))?;
    let trunk = &binding.trunk_nodes[trunk_idx];
    let norms = binding
        .in_nodes
        .get(&(style, region))
        .ok_or_else(|| Error::Lookup(format!("no norm set for ({style:?}, {region})")))?;

    let (_, h, w) = g.value(input).dims3();
    let pad_h = (4 - h % 4) % 4;
    let pad_w = (4 - w % 4) % 4;
    let mut x = if pad_h > 0 || pad_w > 0 {
        g.pad(input, (0, pad_h, 0, pad_w), PadMode::Reflect)
    } else {
        input
    };

    let eps = cfg.in_epsilon;
    let specs = conv_specs(cfg);
    let mut norm_idx = 0usize;

    fn check<S: Scalar>(g: &Graph<S>, id: NodeId, layer: usize) -> Result<NodeId> {
        if !g.value(id).all_finite() {
            return Err(Error::NonFinite { layer });
        }
        Ok(id)
    }

    // A conv block: optional upsample, reflect same-pad, conv, optional
    // instance norm, optional relu.
    let block = |g: &mut Graph<S>,
                 x: NodeId,
                 spec: &ConvSpec,
                 norm_idx: &mut usize,
                 relu: bool|
     -> Result<NodeId> {
        let mut x = x;
        if spec.upsample_before {
            x = g.upsample2(x);
        }
        if spec.kernel > 1 {
            let p = spec.kernel / 2;
            x = g.pad(x, (p, p, p, p), PadMode::Reflect);
        }
        let (k, b) = trunk[spec.index - 1];
        let mut y = g.conv(x, k, b, spec.stride);
        if spec.normalized {
            let (s, sh) = norms[*norm_idx];
            *norm_idx += 1;
            y = g.instance_norm(y, s, sh, eps);
        }
        if relu {
            y = g.relu(y);
        }
        check(g, y, spec.index)
    };

    let e1 = block(g, x, &specs[0], &mut norm_idx, true)?;
    let e2 = block(g, e1, &specs[1], &mut norm_idx, true)?;
    let e3 = block(g, e2, &specs[2], &mut norm_idx, true)?;

    let mut r = e3;
    for blk in 0..cfg.residual_blocks {
        let s1 = &specs[3 + 2 * blk];
        let s2 = &specs[4 + 2 * blk];
        let t = block(g, r, s1, &mut norm_idx, true)?;
        let t = block(g, t, s2, &mut norm_idx, false)?;
        r = g.add(r, t);
    }

    let n = specs.len();
    let d1_in = g.add(r, e3);
    let d1 = block(g, d1_in, &specs[n - 3], &mut norm_idx, true)?;
    let d2_in = g.add(d1, e2);
    let d2 = block(g, d2_in, &specs[n - 2], &mut norm_idx, true)?;

    // Final conv: no norm, sigmoid to land pixels in (0,1).
    let spec = &specs[n - 1];
    let p = spec.kernel / 2;
    x = g.pad(d2, (p, p, p, p), PadMode::Reflect);
    let (k, b) = trunk[spec.index - 1];
    let pre = g.conv(x, k, b, spec.stride);
    let out = g.sigmoid(pre);
    let out = check(g, out, spec.index)?;

    if pad_h > 0 || pad_w > 0 {
        Ok(g.crop(out, h, w))
    } else {
        Ok(out)
    }
}
