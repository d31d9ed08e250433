//! Fixed perceptual feature extractor with a VGG-19 layer layout.
//!
//! Weights come either from a tensor-archive file holding pretrained VGG-19
//! parameters or from a seeded random initialization with the identical
//! topology. The random mode exists so tests and CI run without a large
//! weight asset; random deep features still define usable perceptual
//! distances. Parameters are frozen; nothing in this crate ever updates
//! them.
//!
//! Only the prefix up to `conv3_1` is materialized: deeper layers are never
//! used. Activations are tapped after the ReLU of the named convolutions,
//! and pooling is 2×2 averaging.

use std::path::Path;

use crate::archive::{self, TensorArchive};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PadMode};
use crate::image_io::ImageBuffer;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Default tap set; the perceptual losses read exactly these.
pub const DEFAULT_TAPS: [&str; 3] = ["conv1_1", "conv2_1", "conv3_1"];

/// (name, out_channels, in_channels) of every convolution in the prefix,
/// with `None` entries marking the 2×2 pools between blocks.
const PREFIX: [PrefixLayer; 7] = [
    PrefixLayer::Conv("conv1_1", 64, 3),
    PrefixLayer::Conv("conv1_2", 64, 64),
    PrefixLayer::Pool,
    PrefixLayer::Conv("conv2_1", 128, 64),
    PrefixLayer::Conv("conv2_2", 128, 128),
    PrefixLayer::Pool,
    PrefixLayer::Conv("conv3_1", 256, 128),
];

enum PrefixLayer {
    Conv(&'static str, usize, usize),
    Pool,
}

/// Imagenet-style channel statistics applied after mapping pixels to [0,1].
pub const DEFAULT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const DEFAULT_SCALE: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
    Activation,
}

/// One entry of the ordered layer list, for introspection and audits.
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Clone, Debug)]
struct ConvParams<S: Scalar> {
    name: String,
    weight: Tensor<S>,
    bias: Tensor<S>,
}

/// The frozen feature extractor. Immutable after construction; safe to share
/// across threads.
#[derive(Clone, Debug)]
pub struct Backbone<S: Scalar> {
    convs: Vec<ConvParams<S>>,
    /// Pool positions: number of convs that precede each pool.
    pools_after: Vec<usize>,
    mean: [f64; 3],
    scale: [f64; 3],
    taps: Vec<String>,
    fingerprint: String,
}

/// Where backbone weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackboneSource {
    WeightFile(std::path::PathBuf),
    FixedRandom { seed: u64 },
}

impl BackboneSource {
    /// Parses a CLI-style spec: `random:SEED` or a file path.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(seed) = s.strip_prefix("random:") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::validation(format!("bad backbone seed in {s:?}")))?;
            Ok(BackboneSource::FixedRandom { seed })
        } else {
            Ok(BackboneSource::WeightFile(s.into()))
        }
    }
}

pub fn load_backbone(source: &BackboneSource) -> Result<Backbone<f32>> {
    match source {
        BackboneSource::FixedRandom { seed } => Ok(random_backbone(*seed)),
        BackboneSource::WeightFile(path) => backbone_from_file(path),
    }
}

fn random_backbone(seed: u64) -> Backbone<f32> {
    let mut rng = Rng::new(seed ^ 0xbacb0e);
    let mut convs = Vec::new();
    let mut pools_after = Vec::new();
    for layer in &PREFIX {
        match layer {
            PrefixLayer::Conv(name, cout, cin) => {
                let mut layer_rng = rng.fork(convs.len() as u64 + 1);
                let fan_in = cin * 9;
                let std = (2.0 / fan_in as f64).sqrt();
                let mut weight = Tensor::<f32>::zeros(&[*cout, *cin, 3, 3]);
                weight.fill_normal(&mut layer_rng, std);
                convs.push(ConvParams {
                    name: name.to_string(),
                    weight,
                    bias: Tensor::zeros(&[*cout]),
                });
            }
            PrefixLayer::Pool => pools_after.push(convs.len()),
        }
    }
    let fp = fingerprint_convs(&convs);
    Backbone {
        convs,
        pools_after,
        mean: DEFAULT_MEAN,
        scale: DEFAULT_SCALE,
        taps: DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
        fingerprint: fp,
    }
}

fn backbone_from_file(path: &Path) -> Result<Backbone<f32>> {
    let archive = TensorArchive::load(path)?;
    let layer_map = archive.meta.get("layers").cloned().unwrap_or_default();
    let mut convs = Vec::new();
    let mut pools_after = Vec::new();
    for layer in &PREFIX {
        match layer {
            PrefixLayer::Conv(name, cout, cin) => {
                let default_kernel = format!("vgg19/{name}/kernel");
                let default_bias = format!("vgg19/{name}/bias");
                let entry = layer_map.get(*name);
                let kname = entry
                    .and_then(|e| e.get("kernel"))
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
                    .unwrap_or(default_kernel);
                let bname = entry
                    .and_then(|e| e.get("bias"))
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
                    .unwrap_or(default_bias);
                let weight = archive.require(&kname)?;
                let bias = archive.require(&bname)?;
                let expected = [*cout, *cin, 3usize, 3usize];
                if weight.shape() != expected {
                    return Err(Error::Schema(format!(
                        "{name}: expected kernel shape {:?}, found {:?}",
                        expected,
                        weight.shape()
                    )));
                }
                if bias.shape() != [*cout] {
                    return Err(Error::Schema(format!(
                        "{name}: expected bias shape [{cout}], found {:?}",
                        bias.shape()
                    )));
                }
                convs.push(ConvParams {
                    name: name.to_string(),
                    weight: weight.clone(),
                    bias: bias.clone(),
                });
            }
            PrefixLayer::Pool => pools_after.push(convs.len()),
        }
    }
    let mean = read_triple(&archive.meta, "normalization", "mean").unwrap_or(DEFAULT_MEAN);
    let scale = read_triple(&archive.meta, "normalization", "scale").unwrap_or(DEFAULT_SCALE);
    let fp = fingerprint_convs(&convs);
    Ok(Backbone {
        convs,
        pools_after,
        mean,
        scale,
        taps: DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
        fingerprint: fp,
    })
}

fn read_triple(meta: &serde_json::Value, section: &str, key: &str) -> Option<[f64; 3]> {
    let arr = meta.get(section)?.get(key)?.as_array()?;
    if arr.len() != 3 {
        return None;
    }
    let mut out = [0.0; 3];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = v.as_f64()?;
    }
    Some(out)
}

fn fingerprint_convs<S: Scalar>(convs: &[ConvParams<S>]) -> String {
    archive::fingerprint(convs.iter().flat_map(|c| {
        let kernel_bytes: Vec<u8> = c
            .weight
            .data()
            .iter()
            .flat_map(|v| (v.to_f64() as f32).to_le_bytes())
            .collect();
        let bias_bytes: Vec<u8> = c
            .bias
            .data()
            .iter()
            .flat_map(|v| (v.to_f64() as f32).to_le_bytes())
            .collect();
        [
            (format!("{}/kernel", c.name), kernel_bytes),
            (format!("{}/bias", c.name), bias_bytes),
        ]
    }))
}

/// Named multi-resolution feature maps extracted at the tap points.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
    source_shape: (usize, usize),
}

impl<S: Scalar> FeaturePyramid<S> {
    pub fn from_entries(entries: Vec<(String, Tensor<S>)>, source_shape: (usize, usize)) -> Self {
        FeaturePyramid {
            entries,
            source_shape,
        }
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    pub fn keys(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

impl<S: Scalar> Backbone<S> {
    pub fn tap_points(&self) -> &[String] {
        &self.taps
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// The ordered (name, kind) layer list, relus and pools included.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut pool_no = 0;
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(LayerInfo {
                name: conv.name.clone(),
                kind: LayerKind::Conv,
            });
            out.push(LayerInfo {
                name: format!("relu{}", conv.name.trim_start_matches("conv")),
                kind: LayerKind::Activation,
            });
            if self.pools_after.contains(&(i + 1)) {
                pool_no += 1;
                out.push(LayerInfo {
                    name: format!("pool{pool_no}"),
                    kind: LayerKind::Pool,
                });
            }
        }
        out
    }

    /// Cumulative stride at each tap point, in tap order.
    pub fn tap_strides(&self) -> Vec<usize> {
        let mut strides = Vec::new();
        let mut current = 1;
        for (i, conv) in self.convs.iter().enumerate() {
            if self.taps.iter().any(|t| t == &conv.name) {
                strides.push(current);
            }
            if self.pools_after.contains(&(i + 1)) {
                current *= 2;
            }
        }
        strides
    }

    pub fn cast<T: Scalar>(&self) -> Backbone<T> {
        Backbone {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    name: c.name.clone(),
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            pools_after: self.pools_after.clone(),
            mean: self.mean,
            scale: self.scale,
            taps: self.taps.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// Snapshot of every parameter tensor, for frozenness checks.
    pub fn parameter_snapshot(&self) -> Vec<(String, Tensor<S>)> {
        self.convs
            .iter()
            .flat_map(|c| {
                [
                    (format!("{}/kernel", c.name), c.weight.clone()),
                    (format!("{}/bias", c.name), c.bias.clone()),
                ]
            })
            .collect()
    }

    /// Records the extractor on an autodiff graph. Weights enter as
    /// constants, so gradients flow to `input` only. Returns (tap name,
    /// node) pairs in tap order.
    pub fn features_graph(&self, g: &mut Graph<S>, input: NodeId) -> Vec<(String, NodeId)> {
        let mean: Vec<S> = self.mean.iter().map(|v| S::from_f64(*v)).collect();
        let inv_scale: Vec<S> = self.scale.iter().map(|v| S::from_f64(1.0 / *v)).collect();
        let mut x = g.channel_affine(input, mean, inv_scale);
        let mut taps = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let w = g.constant(conv.weight.clone());
            let b = g.constant(conv.bias.clone());
            let padded = g.pad(x, (1, 1, 1, 1), PadMode::Zero);
            let pre = g.conv(padded, w, b, 1);
            x = g.relu(pre);
            if self.taps.iter().any(|t| t == &conv.name) {
                taps.push((conv.name.clone(), x));
            }
            if self.pools_after.contains(&(i + 1)) {
                x = g.avg_pool2(x);
            }
        }
        taps
    }
}

/// Runs the extractor on an image and returns plain feature tensors.
/// Deterministic and side-effect free.
pub fn extract_features<S: Scalar>(
    backbone: &Backbone<S>,
    image: &ImageBuffer,
) -> Result<FeaturePyramid<S>> {
    image.validate()?;
    if image.height() < 16 || image.width() < 16 {
        return Err(Error::validation(format!(
            "image {}x{} below the 16px minimum",
            image.height(),
            image.width()
        )));
    }
    let mut g = Graph::new();
    let input = g.constant(image.to_tensor::<S>());
    let taps = backbone.features_graph(&mut g, input);
    Ok(FeaturePyramid {
        entries: taps
            .into_iter()
            .map(|(name, id)| (name, g.value(id).clone()))
            .collect(),
        source_shape: (image.height(), image.width()),
    })
}
