use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::manifest::ImageRecord;
use crate::error::{Error, Result};

/// Side length every image is resized to before training.
pub const DEFAULT_INPUT_SIZE: u32 = 512;

/// Planar RGB image, values scaled to [0, 1], shape 3 × size × size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub size: usize,
    pub data: Vec<f32>,
    /// Colour type of the source when it was not 8-bit RGB.
    pub converted_from: Option<String>,
}

impl ImageTensor {
    pub fn shape(&self) -> [usize; 3] {
        [3, self.size, self.size]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.size + y) * self.size + x]
    }

    /// Luma (ITU-R 601) plane in [0, 1], row-major.
    pub fn grayscale(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter().zip(g).zip(b).map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        assert_eq!(img.width(), img.height(), "tensor images are square");
        let size = img.width() as usize;
        let n = size * size;
        let mut data = vec![0.0f32; 3 * n];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f32 / 255.0;
            }
        }
        ImageTensor { size, data, converted_from: None }
    }
}

/// Bilinear resize to `size`×`size` with no aspect-ratio preservation.
pub fn resize_rgb(img: &RgbImage, size: u32) -> RgbImage {
    if img.width() == size && img.height() == size {
        return img.clone();
    }
    image::imageops::resize(img, size, size, FilterType::Triangle)
}

pub fn standardise_image(img: DynamicImage, size: u32) -> ImageTensor {
    let converted_from = match &img {
        DynamicImage::ImageRgb8(_) => None,
        other => Some(format!("{:?}", other.color())),
    };
    if let Some(kind) = &converted_from {
        log::warn!("converting {kind} image to RGB");
    }
    let rgb = img.to_rgb8();
    let mut tensor = ImageTensor::from_rgb(&resize_rgb(&rgb, size));
    tensor.converted_from = converted_from;
    tensor
}

pub fn standardise_bytes(bytes: &[u8], size: u32) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(standardise_image(img, size))
}

pub fn standardise_path(path: &Path, size: u32) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(standardise_image(img, size))
}

/// Loads a manifest record and resizes it to the network input size.
pub fn standardise(record: &ImageRecord, size: u32) -> Result<ImageTensor> {
    standardise_path(&record.path, size)
}
