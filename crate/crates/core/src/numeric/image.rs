use serde::{Deserialize, Serialize};

use super::NumericError;

/// `height × width × channels` image stored channel-last, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(NumericError::InvalidInput("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(NumericError::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::InvalidInput("non-finite pixel".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| value)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// The `side × side` square whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, side: usize) -> Result<Image, NumericError> {
        if y + side > self.height || x + side > self.width || side == 0 {
            return Err(NumericError::InvalidInput(format!(
                "crop {side}x{side} at ({y},{x}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(side, side, self.channels, |dy, dx, c| self.get(y + dy, x + dx, c)))
    }

    fn halve(&self) -> Image {
        Image::from_fn(self.height / 2, self.width / 2, self.channels, |y, x, c| {
            let (y0, x0) = (2 * y, 2 * x);
            (self.get(y0, x0, c) + self.get(y0, x0 + 1, c) + self.get(y0 + 1, x0, c) + self.get(y0 + 1, x0 + 1, c))
                / 4.0
        })
    }
}

/// Downsamples by a power-of-two `factor` through repeated corner-aligned
/// halvings; each halving replaces a 2×2 block with its mean.
pub fn bilinear_downsample(image: &Image, factor: usize) -> Result<Image, NumericError> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(NumericError::InvalidInput(format!("factor {factor} is not a power of two")));
    }
    if !image.height.is_multiple_of(factor) || !image.width.is_multiple_of(factor) {
        return Err(NumericError::InvalidInput(format!(
            "{}x{} not divisible by {factor}",
            image.height, image.width
        )));
    }
    let mut out = image.clone();
    let mut f = factor;
    while f > 1 {
        out = out.halve();
        f /= 2;
    }
    Ok(out)
}
