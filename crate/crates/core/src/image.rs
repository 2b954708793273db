//! Dense row-major float images.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f64) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Domain(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(ImageBuf {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn same_shape(&self, o: &ImageBuf) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    pub fn check_shape(&self, o: &ImageBuf) -> Result<()> {
        if self.same_shape(o) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, o.width, o.height, o.channels
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    /// Channel-averaged single-channel copy.
    pub fn to_gray(&self) -> ImageBuf {
        let mut out = ImageBuf::new(self.width, self.height, 1);
        for i in 0..self.pixels() {
            out.data[i] = self.pixel(i).iter().sum::<f64>() / self.channels as f64;
        }
        out
    }

    /// Places two images of equal height side by side.
    pub fn hconcat(&self, o: &ImageBuf) -> Result<ImageBuf> {
        if self.height != o.height || self.channels != o.channels {
            return Err(Error::Domain("hconcat needs equal height and channels".into()));
        }
        let w = self.width + o.width;
        let mut out = ImageBuf::new(w, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..w {
                for c in 0..self.channels {
                    let v = if x < self.width { self.at(x, y, c) } else { o.at(x - self.width, y, c) };
                    out.set(x, y, c, v);
                }
            }
        }
        Ok(out)
    }
}
