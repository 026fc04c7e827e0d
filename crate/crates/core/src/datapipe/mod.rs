//! Sample loading and offline augmentation.
//!
//! [`expand`] turns one source into `plan.factor()` samples: each width half
//! contributes its center crop, one crop per rotation angle and one crop per
//! gamma, and every one of those is emitted under each flip state.

mod augment;
mod io;

pub use augment::{expand, expand_all, flip, gamma_correct, rotate_center_crop, split_halves};
pub use io::{
    load_dataset, read_manifest, read_png_gray, read_png_rgb, write_gray_png, write_rgb_png,
    write_samples,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 3×H×W in [0, 1].
    pub image: Tensor,
    /// 1×H×W with values in {0, 1}.
    pub gt: Tensor,
    /// Source name followed by the augmentation chain.
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, gt: Tensor, id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::Data(format!("image must have 3 channels, got {c}")));
        }
        if gt.shape() != [1, h, w] {
            return Err(Error::Data(format!(
                "gt shape {:?} does not match image {h}×{w}",
                gt.shape()
            )));
        }
        Ok(Self {
            image,
            gt,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
}

impl Flip {
    pub const ALL: [Flip; 3] = [Flip::Identity, Flip::Horizontal, Flip::Vertical];

    pub fn tag(self) -> char {
        match self {
            Flip::Identity => 'i',
            Flip::Horizontal => 'h',
            Flip::Vertical => 'v',
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "i" => Ok(Flip::Identity),
            "h" => Ok(Flip::Horizontal),
            "v" => Ok(Flip::Vertical),
            _ => Err(Error::Config(format!(
                "unknown flip {tag:?}; expected i, h or v"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Degrees, counterclockwise.
    pub rotations: Vec<f64>,
    pub crop_size: usize,
    pub gammas: Vec<f64>,
    pub flips: Vec<Flip>,
    /// Split each source into left and right halves first.
    pub split: bool,
}

impl Default for AugmentPlan {
    /// Desk-scale plan: 256 crops.
    fn default() -> Self {
        Self {
            rotations: (0..15).map(|i| i as f64 * 24.0).collect(),
            crop_size: 256,
            gammas: vec![0.3030, 0.6060],
            flips: Flip::ALL.to_vec(),
            split: true,
        }
    }
}

impl AugmentPlan {
    /// Full-resolution plan with 700 crops.
    pub fn paper_scale() -> Self {
        Self {
            crop_size: 700,
            ..Self::default()
        }
    }

    pub fn factor(&self) -> usize {
        let halves = if self.split { 2 } else { 1 };
        halves * (1 + self.rotations.len() + self.gammas.len()) * self.flips.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if self.flips.is_empty() {
            return Err(Error::Config("at least one flip state is required".into()));
        }
        if let Some(g) = self.gammas.iter().find(|&&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("gamma must be positive, got {g}")));
        }
        if let Some(a) = self.rotations.iter().find(|a| !a.is_finite()) {
            return Err(Error::Config(format!(
                "rotation angle must be finite, got {a}"
            )));
        }
        let mut seen = Vec::new();
        for f in &self.flips {
            if seen.contains(f) {
                return Err(Error::Config(format!("flip {} listed twice", f.tag())));
            }
            seen.push(*f);
        }
        Ok(())
    }
}
