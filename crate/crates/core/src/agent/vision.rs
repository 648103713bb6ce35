use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::numeric::{Image, Matrix};
use crate::seed;

/// Encoded sequence length at granularity `level`: `max(1, 2^(g - 2·level + 1))`.
pub fn granularity_len(g: usize, level: usize) -> usize {
    let e = g as isize + 1 - 2 * level as isize;
    if e < 0 {
        1
    } else {
        1usize << e
    }
}

/// Patch-pooling vision encoder.
///
/// A block at `level` is tiled into an `a × b` grid with `a·b = l_level`;
/// each tile is pooled to per-channel mean/std plus its grid position and
/// mapped through a fixed random projection followed by `tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    granularity: usize,
    patch_size: usize,
    channels: usize,
    projection: Matrix,
}

impl VisionEncoder {
    pub fn new(granularity: usize, patch_size: usize, channels: usize, d_v: usize, seed: u64) -> Result<Self, AgentError> {
        if granularity == 0 || patch_size == 0 || channels == 0 || d_v == 0 {
            return Err(AgentError::InvalidSpec("vision encoder sizes must be positive".into()));
        }
        let feat = 2 * channels + 4;
        let mut rng = seed::rng(seed);
        let projection = seed::gaussian_matrix(&mut rng, feat, d_v, 1.0 / (feat as f64).sqrt());
        Ok(Self { granularity, patch_size, channels, projection })
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn d_v(&self) -> usize {
        self.projection.cols()
    }

    /// Side of a full-resolution patch block.
    pub fn block_side(&self) -> usize {
        self.patch_size << self.granularity
    }

    /// Encodes a block already downsampled to granularity `level`.
    pub fn encode(&self, block: &Image, level: usize) -> Result<Matrix, AgentError> {
        let side = self.block_side() >> level;
        if level >= self.granularity || block.height() != side || block.width() != side || block.channels() != self.channels {
            return Err(AgentError::InvalidInput(format!(
                "block {}x{}x{} at level {level}, expected {side}x{side}x{}",
                block.height(),
                block.width(),
                block.channels(),
                self.channels
            )));
        }
        let e = (self.granularity as isize + 1 - 2 * level as isize).max(0) as u32;
        let (a, b) = (1usize << e.div_ceil(2), 1usize << (e / 2));
        let (th, tw) = (side / a, side / b);
        if th == 0 || tw == 0 {
            return Err(AgentError::InvalidInput(format!("block side {side} too small for a {a}x{b} grid")));
        }
        let c = self.channels;
        let count = (th * tw) as f64;
        let mut rows = Vec::with_capacity(a * b);
        for gy in 0..a {
            for gx in 0..b {
                let mut feat = vec![0.0; 2 * c + 4];
                for ch in 0..c {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for y in gy * th..(gy + 1) * th {
                        for x in gx * tw..(gx + 1) * tw {
                            let v = block.get(y, x, ch);
                            sum += v;
                            sq += v * v;
                        }
                    }
                    let mean = sum / count;
                    feat[ch] = mean;
                    feat[c + ch] = (sq / count - mean * mean).max(0.0).sqrt();
                }
                feat[2 * c] = (gy as f64 + 0.5) / a as f64;
                feat[2 * c + 1] = (gx as f64 + 0.5) / b as f64;
                feat[2 * c + 2] = level as f64 / self.granularity as f64;
                feat[2 * c + 3] = 1.0;
                rows.push(feat);
            }
        }
        let pooled = Matrix::from_rows(&rows).expect("uniform feature width");
        let out = pooled.matmul(&self.projection).expect("feature width matches projection");
        Ok(out.map(f64::tanh))
    }
}

/// Frozen affine map from the vision space into the language space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    /// `d_l × d_v`.
    pub w_p: Matrix,
    pub b_p: Vec<f64>,
}

impl ProjectorParams {
    pub fn init(d_v: usize, d_l: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let w_p = seed::gaussian_matrix(&mut rng, d_l, d_v, 1.0 / (d_v as f64).sqrt());
        let b_p = seed::gaussian_vec(&mut rng, d_l, 0.02);
        Self { w_p, b_p }
    }

    pub fn identity(d: usize) -> Self {
        Self { w_p: Matrix::identity(d), b_p: vec![0.0; d] }
    }

    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>, AgentError> {
        if h.len() != self.w_p.cols() {
            return Err(AgentError::InvalidInput(format!("vector of dim {} for projector input {}", h.len(), self.w_p.cols())));
        }
        Ok(self.w_p.row_iter().zip(&self.b_p).map(|(w, b)| crate::numeric::dot(w, h) + b).collect())
    }

    /// Projects every row of `h` (`l × d_v` → `l × d_l`).
    pub fn project_rows(&self, h: &Matrix) -> Result<Matrix, AgentError> {
        let mut out = h
            .matmul_transposed(&self.w_p)
            .map_err(|e| AgentError::InvalidInput(e.to_string()))?;
        out.add_row_vector(&self.b_p).map_err(|e| AgentError::InvalidInput(e.to_string()))?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::bilinear_downsample;

    fn image(side: usize, salt: u64) -> Image {
        Image::from_fn(side, side, 3, |y, x, c| seed::unit_f64(seed::mix(salt, (y * 1000 + x * 10 + c) as u64)))
    }

    #[test]
    fn lengths_follow_granularity_rule() {
        assert_eq!((0..3).map(|i| granularity_len(3, i)).collect::<Vec<_>>(), vec![16, 4, 1]);
        assert_eq!(granularity_len(4, 3), 1);
        assert_eq!(granularity_len(4, 0), 32);
    }

    #[test]
    fn encoder_emits_expected_rows_deterministically() {
        let enc = VisionEncoder::new(3, 4, 3, 16, 11).unwrap();
        let block = image(32, 1);
        for level in 0..3 {
            let down = bilinear_downsample(&block, 1 << level).unwrap();
            let a = enc.encode(&down, level).unwrap();
            assert_eq!(a.shape(), (granularity_len(3, level), 16));
            assert_eq!(a, enc.encode(&down.clone(), level).unwrap());
        }
        assert_ne!(enc.encode(&image(32, 2), 0).unwrap(), enc.encode(&block, 0).unwrap());
        assert!(enc.encode(&image(16, 1), 0).is_err());
    }

    #[test]
    fn clamped_level_has_one_row() {
        let enc = VisionEncoder::new(4, 1, 3, 8, 3).unwrap();
        let down = bilinear_downsample(&image(16, 5), 8).unwrap();
        assert_eq!(enc.encode(&down, 3).unwrap().rows(), 1);
    }

    #[test]
    fn projector_is_affine() {
        let p = ProjectorParams::init(6, 4, 9);
        assert_eq!(p.project(&[0.0; 6]).unwrap(), p.b_p);
        let h1 = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5];
        let h2 = [1.0, 0.2, -0.7, 0.1, 0.9, -2.0];
        let d: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a - b).collect();
        let lhs: Vec<f64> = p.project(&h1).unwrap().iter().zip(p.project(&h2).unwrap()).map(|(a, b)| a - b).collect();
        let rhs: Vec<f64> = p.w_p.row_iter().map(|w| crate::numeric::dot(w, &d)).collect();
        assert!(lhs.iter().zip(&rhs).all(|(a, b)| (a - b).abs() < 1e-12));
        let id = ProjectorParams::identity(6);
        assert_eq!(id.project(&h1).unwrap(), h1.to_vec());
        assert!(p.project(&[1.0; 5]).is_err());
        let rows = Matrix::from_rows(&[h1.to_vec(), h2.to_vec()]).unwrap();
        let pr = p.project_rows(&rows).unwrap();
        assert!(pr.row(0).iter().zip(p.project(&h1).unwrap()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
