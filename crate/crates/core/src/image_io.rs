use std::path::Path;

use image::RgbImage;
use tips_tensor::Tensor;

use crate::error::{Error, Result};

/// 3-channel image in planar `C × H × W` layout, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!("image {width}x{height} needs {} values, got {}", 3 * width * height, data.len())));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
            }
        }
        Image { width: w, height: h, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb(std::array::from_fn(|c| ((self.data[c * w * h + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e))?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::format(path, e))
    }

    /// `1 × 3 × H × W`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, 3, self.height, self.width])
    }

    /// Splits an `N × 3 × H × W` tensor into images.
    pub fn from_batch(t: &Tensor) -> Vec<Image> {
        let (n, c, h, w) = t.dims4();
        assert_eq!(c, 3, "expected RGB batch");
        t.data().chunks(3 * h * w).take(n).map(|d| Image { width: w, height: h, data: d.to_vec() }).collect()
    }

    /// ITU-R BT.601 luma in `[-1, 1]`, row-major `H × W`.
    pub fn luma(&self) -> Vec<f64> {
        let n = self.width * self.height;
        (0..n).map(|i| 0.299 * self.data[i] as f64 + 0.587 * self.data[n + i] as f64 + 0.114 * self.data[2 * n + i] as f64).collect()
    }
}

/// Stacks equally sized images into `N × 3 × H × W`.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyBatch)?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        if (im.width, im.height) != (first.width, first.height) {
            return Err(Error::shape("images in a batch must share a size"));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, &[images.len(), 3, first.height, first.width]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let img = RgbImage::from_fn(5, 4, |x, y| image::Rgb([(x * 50) as u8, (y * 60) as u8, 255]));
        let back = Image::from_rgb8(&img).to_rgb8();
        assert_eq!(img, back);
        let im = Image::from_rgb8(&img);
        assert_eq!(im.data[2 * 20], 1.0);
        assert_eq!(im.data[0], -1.0);
    }
}
