//! Networks: generator (encoder, auxiliary encoder, decoder), PatchGAN
//! discriminator and contrastive projection heads, all built on the
//! [`autodiff`](crate::autodiff) tape.
//!
//! Tensors flowing through the networks are `[N, C, H, W]`. Inputs are
//! normalized depth/reflectance pairs; the auxiliary encoder takes integer
//! class ids.

mod checkpoint;
mod discriminator;
mod generator;
mod heads;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{AuxEncoderSpec, EncodeOutput, GenerateOutput, Generator, GeneratorSpec, RaydropMode};
pub use heads::{sample_locations, FeatureStack, HeadSpec, ProjectionHeads};
pub use params::ParamStore;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rangeview::{ChannelRole, RangeImage};

/// Packs the depth and reflectance channels of normalized images into `[N, 2, H, W]`.
pub fn images_to_tensor<T: Scalar>(images: &[RangeImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::Empty("image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 2 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                h,
                w,
                img.height(),
                img.width()
            )));
        }
        for role in [ChannelRole::Depth, ChannelRole::Reflectance] {
            data.extend(img.plane(role)?.into_iter().map(T::from_f64_lossy));
        }
    }
    Ok(Tensor::new(vec![images.len(), 2, h, w], data))
}

/// Class ids of every cell, `[N, H, W]` flattened. Ids at or beyond
/// `num_classes`, negative or non-integral values map to 0 (unlabeled).
pub fn images_to_class_ids(images: &[RangeImage], num_classes: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for img in images {
        let plane = img.plane(ChannelRole::Semantic)?;
        ids.extend(plane.iter().zip(img.valid()).map(|(&v, &ok)| {
            if ok && v >= 0.0 && v.fract() == 0.0 && (v as usize) < num_classes {
                v as usize
            } else {
                0
            }
        }));
    }
    Ok(ids)
}

/// Unpacks `[N, C, H, W]` planes into images with the given roles; cells are
/// valid where `valid` is true (or everywhere when `None`).
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>, roles: &[ChannelRole], valid: Option<&[bool]>) -> Result<Vec<RangeImage>> {
    let (n, c, h, w) = t.dims4();
    if roles.len() != c {
        return Err(Error::Shape(format!("{c} tensor channels for {} roles", roles.len())));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let planes: Vec<Vec<f64>> = (0..c)
            .map(|ch| t.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().map(|v| v.to_f64_lossy()).collect())
            .collect();
        let v = match valid {
            Some(m) => m[s * hw..(s + 1) * hw].to_vec(),
            None => vec![true; hw],
        };
        out.push(RangeImage::from_planes(h, w, roles, &planes, v)?);
    }
    Ok(out)
}
