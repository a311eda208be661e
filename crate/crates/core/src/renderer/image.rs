//! Float images and PNG/PPM/PFM IO.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::ndtensor::{Result as TensorResult, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] image::ImageError),
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("cannot encode {0}-channel image")]
    Channels(usize),
}

/// Row-major `height x width x channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Image {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Image {
        Image {
            width,
            height,
            channels: value.len(),
            data: value.repeat(width * height),
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn to_tensor(&self) -> TensorResult<Tensor> {
        Tensor::new(self.data.clone(), &self.shape())
    }

    /// Gathers the listed pixels into a `[P, channels]` buffer.
    pub fn gather(&self, pixels: &[(usize, usize)]) -> Vec<f64> {
        pixels.iter().flat_map(|&(r, c)| self.pixel(r, c).iter().copied()).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).expect("size").save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes).expect("size").save(path)?,
            c => return Err(ImageError::Channels(c)),
        }
        Ok(())
    }

    /// Loads any supported 8-bit format as RGB in `[0, 1]`.
    pub fn load_rgb(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }

    /// Single-channel little-endian PFM (`Pf`), bottom row first.
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        if self.channels != 1 && self.channels != 3 {
            return Err(ImageError::Channels(self.channels));
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let tag = if self.channels == 1 { "Pf" } else { "PF" };
        write!(f, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row_len = self.width * self.channels;
        for row in (0..self.height).rev() {
            for v in &self.data[row * row_len..(row + 1) * row_len] {
                f.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(ImageError::Pfm("truncated header".into()));
            }
            header.extend(line.split_whitespace().map(str::to_string));
        }
        let channels = match header[0].as_str() {
            "Pf" => 1,
            "PF" => 3,
            t => return Err(ImageError::Pfm(format!("unknown tag {t:?}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Pfm(format!("bad size {s:?}")));
        let (width, height) = (parse(&header[1])?, parse(&header[2])?);
        let scale: f64 = header[3].parse().map_err(|_| ImageError::Pfm("bad scale".into()))?;
        let mut raw = vec![0u8; width * height * channels * 4];
        r.read_exact(&mut raw).map_err(|_| ImageError::Pfm("truncated payload".into()))?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| {
                let b = [b[0], b[1], b[2], b[3]];
                (if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
            })
            .collect();
        let row_len = width * channels;
        let mut data = Vec::with_capacity(vals.len());
        for row in (0..height).rev() {
            data.extend_from_slice(&vals[row * row_len..(row + 1) * row_len]);
        }
        Ok(Image { width, height, channels, data })
    }
}
