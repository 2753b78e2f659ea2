use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Mask pixels strictly above this value are foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

/// `H×W×C` image with values in `[0, 1]`, stored `(y, x, c)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "empty raster {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} raster given {} values",
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Zeroes every pixel whose mask value is not above [`MASK_THRESHOLD`].
pub fn apply_mask(image: &Raster, mask: &Raster) -> Result<Raster> {
    if mask.channels != 1 {
        return Err(Error::Shape(format!(
            "mask must have one channel, has {}",
            mask.channels
        )));
    }
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "image is {}x{}, mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let c = image.channels;
    let mut data = image.data.clone();
    for (p, &m) in mask.data.iter().enumerate() {
        if !(m > MASK_THRESHOLD) {
            data[p * c..(p + 1) * c].fill(0.0);
        }
    }
    Ok(Raster { data, ..*image })
}

/// Reads a binary or ASCII PGM/PPM file, scaling samples to `[0, 1]`.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Raster::new(
            h,
            w,
            1,
            g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        DynamicImage::ImageLuma16(g) => Raster::new(
            h,
            w,
            1,
            g.into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        ),
        other => {
            let rgb = other.to_rgb8();
            Raster::new(
                h,
                w,
                3,
                rgb.into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 255.0)
                    .collect(),
            )
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1-channel raster as binary PGM, a 3-channel one as binary PPM.
pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    let (w, h) = (raster.width as u32, raster.height as u32);
    let bytes: Vec<u8> = raster.data.iter().map(|&v| quantize(v)).collect();
    let img = match raster.channels {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("gray buffer")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("rgb buffer")),
        c => {
            return Err(Error::data(
                path,
                format!("cannot store {c}-channel raster as PNM"),
            ));
        }
    };
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| Error::data(path, e.to_string()))
}
