//! Applies a trained checkpoint to images, the training pair itself or
//! unseen ones, in either direction. Forward-only: no backbone, no
//! gradients, no parameter mutation.

use crate::error::{Error, Result};
use crate::image_io::ImageBuffer;
use crate::losses::apply_composite;
use crate::regions::LabelMap;
use crate::stylenet::StyleTag;
use crate::trainer::Checkpoint;

/// Which style to render toward: `ToA` applies the networks that carry
/// photo A's style.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToA,
    ToB,
}

impl Direction {
    pub fn style(self) -> StyleTag {
        match self {
            Direction::ToA => StyleTag::A,
            Direction::ToB => StyleTag::B,
        }
    }
}

pub struct StylizeRequest<'a> {
    pub checkpoint: &'a Checkpoint,
    pub input: &'a ImageBuffer,
    pub direction: Direction,
    /// Label map for the input, using the checkpoint's label vocabulary.
    /// Required when the checkpoint was trained with more than one region.
    pub masks: Option<&'a LabelMap>,
}

/// Runs each region's network for the requested direction and composites.
/// Output shape equals input shape; any valid input size is accepted.
pub fn stylize(req: &StylizeRequest<'_>) -> Result<ImageBuffer> {
    req.input.validate()?;
    let known = req.checkpoint.pair.region_labels();
    let labels_owned;
    let labels: &LabelMap = match req.masks {
        Some(m) => {
            if (m.height(), m.width()) != (req.input.height(), req.input.width()) {
                return Err(Error::validation(format!(
                    "mask {}x{} does not match input {}x{}",
                    m.height(),
                    m.width(),
                    req.input.height(),
                    req.input.width()
                )));
            }
            for label in m.present() {
                if !known.contains(&label) {
                    return Err(Error::Lookup(format!(
                        "mask label {label} unknown to the checkpoint (has {known:?})"
                    )));
                }
            }
            m
        }
        None => {
            if known.len() > 1 {
                return Err(Error::validation(format!(
                    "checkpoint was trained with regions {known:?}; supply a mask for the input"
                )));
            }
            labels_owned = LabelMap::solid(req.input.height(), req.input.width(), known[0]);
            &labels_owned
        }
    };
    apply_composite(
        &req.checkpoint.pair,
        req.direction.style(),
        req.input,
        labels,
    )
}

/// g_a applied to the training photo x_a (or g_b to x_b): the
/// self-consistency rendering used by evaluation.
pub fn self_apply(ckpt: &Checkpoint, side: StyleTag) -> Result<ImageBuffer> {
    let image = match side {
        StyleTag::A => &ckpt.image_a,
        StyleTag::B => &ckpt.image_b,
    };
    apply_composite(&ckpt.pair, side, image, ckpt.masks.side(side))
}

/// The cycle rendering of one training photo: a round trip through both
/// networks, which a well-trained pair maps close to the input.
pub fn cycle_apply(ckpt: &Checkpoint, side: StyleTag) -> Result<ImageBuffer> {
    let image = match side {
        StyleTag::A => &ckpt.image_a,
        StyleTag::B => &ckpt.image_b,
    };
    let labels = ckpt.masks.side(side);
    let there = apply_composite(&ckpt.pair, side.other(), image, labels)?;
    apply_composite(&ckpt.pair, side, &there, labels)
}
