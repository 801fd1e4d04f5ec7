//! Everything that feeds or persists the network: synthetic data, image
//! files, tiling, dataset manifests and checkpoints.

pub mod checkpoint;
pub mod image_io;
pub mod manifest;
pub mod synth;
pub mod tile;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use image_io::{load_image_pair, save_image_png, save_mask_png};
pub use manifest::{Dataset, ManifestEntry, MANIFEST_FILE};
pub use synth::{synth_sample, SynthConfig};
pub use tile::{tile, tile_origins};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Fixed 80/10/10 assignment by index.
    pub fn of_index(index: u64) -> Self {
        match index % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// An RGB tile in `[0, 1]` (`[3, H, W]`) with its road mask (`[H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, split: Split, image: Tensor<f32>, mask: BinaryMask) -> Result<Self> {
        match (image.shape(), mask.shape()) {
            ([3, h, w], [mh, mw]) if h == mh && w == mw => Ok(Self {
                id: id.into(),
                split,
                image,
                mask,
            }),
            (i, m) => shape_err(format!("image {i:?} and mask {m:?} do not pair")),
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}
