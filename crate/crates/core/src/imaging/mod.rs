//! Images, filters, comparison-based baseline maps and the synthetic
//! spliced-image generator.
//!
//! Images are `H×W×3` with values in `[0, 1]`, stored channels-last. Single
//! channel maps (manipulation maps, masks) are plain [`Mat`]s with `H` rows
//! and `W` columns.

mod filters;
mod ssim;
mod synth;

pub use filters::{bilinear_matrix, pixel_diff_map, resize_bilinear, sobel_map};
pub use ssim::{gaussian_window, ssim_map, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use synth::{synth_pair, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::{Error, Result};

/// An `H×W×3` image, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "image data has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The image as an `(H·W) × 3` matrix.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.height * self.width, 3, self.data.clone())
    }

    /// Rec. 601 luma as an `H × W` map.
    pub fn luminance(&self) -> Mat {
        Mat::from_fn(self.height, self.width, |y, x| {
            0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
        })
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Image-level class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// An image with its label and, for synthetic fakes, the ground-truth mask
/// (`H × W`, 1 = manipulated pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub gt_mask: Option<Mat>,
}
