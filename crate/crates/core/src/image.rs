//! RGB images in planar `[3, H, W]` layout with values in [0, 1], and their
//! binary PPM encoding (P6, maxval 255, no comments).

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed PPM: {0}")]
    Format(String),
    #[error("image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    Size {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("expected a [3, H, W] tensor, got {0:?}")]
    Shape(Vec<usize>),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(ImageError::Format(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_size(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(ImageError::Size {
                want_w: width,
                want_h: height,
                got_w: self.width,
                got_h: self.height,
            });
        }
        Ok(())
    }

    /// From a model-space tensor `[3, H, W]` in [−1, 1], clamping.
    pub fn from_model(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [3, h, w] => {
                let data = t.data().iter().map(|&v| ((v as f32 + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
                Ok(Self { width: w, height: h, data })
            }
            _ => Err(ImageError::Shape(t.shape().to_vec())),
        }
    }

    /// To a model-space tensor `[3, H, W]` in [−1, 1].
    pub fn to_model(&self) -> Tensor {
        let data = self.data.iter().map(|&v| (v * 2.0 - 1.0) as Real).collect();
        Tensor::new(&[3, self.height, self.width], data).expect("consistent size")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.width * self.height;
        out.reserve(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(quantize(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Format("truncated header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| ImageError::Format("non-ASCII header".into()))?);
        }
        if fields[0] != "P6" {
            return Err(ImageError::Format(format!("magic {:?}, expected P6", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Format(format!("bad number {s:?}")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(ImageError::Format(format!("maxval {maxval}, only 255 is supported")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let plane = width * height;
        let raster = bytes
            .get(pos..pos + 3 * plane)
            .ok_or_else(|| ImageError::Format("truncated raster".into()))?;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in raster.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_ppm())?)
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&fs::read(path)?)
    }
}

/// `round(clamp(v, 0, 1) · 255)`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
