//! Linear corruption channels `y = A x + ε`, `ε ~ N(0, σ_Y² I)`.

use std::f64::consts::PI;

use bitvec::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::rng::{normal_vec, Stream};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("log-likelihood needs sigma_y > 0")]
    ZeroNoise,
}

/// Which family of corruption matrices a channel draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChannelKind {
    /// One explicit matrix shared by every observation.
    Fixed { rows: usize, cols: usize, data: Vec<f64> },
    /// Diagonal 0/1 mask; each coordinate is dropped with probability `rho`.
    RandomMask { rho: f64, dim: usize },
    /// 2-D Gaussian blur on a `height × width` image.
    GaussianBlur { sigma: f64, height: usize, width: usize },
    /// `rows × dim` matrix with rows uniform on the unit sphere.
    Sphere { rows: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionChannel {
    pub kind: ChannelKind,
    pub sigma_y: f64,
}

/// The matrix `A` used for one observation, in compact form.
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixDescriptor {
    Dense(Tensor),
    Mask(BitVec<u8, Lsb0>),
    Blur { sigma: f64, height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub y: Vec<f64>,
    pub a: MatrixDescriptor,
}

impl CorruptionChannel {
    pub fn new(kind: ChannelKind, sigma_y: f64) -> Result<Self, ChannelError> {
        let bad = |m: String| Err(ChannelError::InvalidParameter(m));
        if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
            return bad(format!("sigma_y = {sigma_y}"));
        }
        match &kind {
            ChannelKind::Fixed { rows, cols, data } => {
                if *rows == 0 || *cols == 0 || rows * cols != data.len() {
                    return bad(format!("fixed matrix {rows}x{cols} with {} entries", data.len()));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return bad("fixed matrix has non-finite entries".into());
                }
            }
            ChannelKind::RandomMask { rho, dim } => {
                if !(0.0..=1.0).contains(rho) || *dim == 0 {
                    return bad(format!("mask rho = {rho}, dim = {dim}"));
                }
            }
            ChannelKind::GaussianBlur { sigma, height, width } => {
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return bad(format!("blur sigma = {sigma}"));
                }
                if *height == 0 || *width == 0 {
                    return bad(format!("blur image {height}x{width}"));
                }
            }
            ChannelKind::Sphere { rows, dim } => {
                if *rows == 0 || rows > dim {
                    return bad(format!("sphere rows = {rows}, dim = {dim}"));
                }
            }
        }
        Ok(Self { kind, sigma_y })
    }

    /// Ambient dimension of the clean signal.
    pub fn dim_x(&self) -> usize {
        match &self.kind {
            ChannelKind::Fixed { cols, .. } => *cols,
            ChannelKind::RandomMask { dim, .. } | ChannelKind::Sphere { dim, .. } => *dim,
            ChannelKind::GaussianBlur { height, width, .. } => height * width,
        }
    }

    /// Length of `y`.
    pub fn dim_y(&self) -> usize {
        match &self.kind {
            ChannelKind::Fixed { rows, .. } | ChannelKind::Sphere { rows, .. } => *rows,
            _ => self.dim_x(),
        }
    }

    /// Width of the descriptor features fed to the denoiser alongside `y`.
    pub fn descriptor_width(&self) -> usize {
        match &self.kind {
            ChannelKind::Fixed { .. } | ChannelKind::GaussianBlur { .. } => 0,
            ChannelKind::RandomMask { dim, .. } => *dim,
            ChannelKind::Sphere { rows, dim } => rows * dim,
        }
    }

    /// Conditioning features for the denoiser: the flattened matrix for
    /// sphere projections, mask bits for masks, nothing for channels whose
    /// matrix never changes.
    pub fn features(&self, a: &MatrixDescriptor) -> Vec<f64> {
        match (&self.kind, a) {
            (ChannelKind::Sphere { .. }, MatrixDescriptor::Dense(t)) => t.data().to_vec(),
            (ChannelKind::RandomMask { .. }, MatrixDescriptor::Mask(bits)) => {
                bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn sample_matrix(&self, rng: &mut Stream) -> MatrixDescriptor {
        match &self.kind {
            ChannelKind::Fixed { rows, cols, data } => MatrixDescriptor::Dense(
                Tensor::new(vec![*rows, *cols], data.clone()).expect("validated at construction"),
            ),
            ChannelKind::RandomMask { rho, dim } => {
                let keep = 1.0 - rho;
                MatrixDescriptor::Mask((0..*dim).map(|_| rng.random::<f64>() < keep).collect())
            }
            ChannelKind::GaussianBlur { sigma, height, width } => MatrixDescriptor::Blur {
                sigma: *sigma,
                height: *height,
                width: *width,
            },
            ChannelKind::Sphere { rows, dim } => {
                let mut data = Vec::with_capacity(rows * dim);
                for _ in 0..*rows {
                    let mut v = normal_vec(rng, *dim);
                    let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    while norm == 0.0 {
                        v = normal_vec(rng, *dim);
                        norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    }
                    data.extend(v.iter().map(|x| x / norm));
                }
                MatrixDescriptor::Dense(Tensor::new(vec![*rows, *dim], data).expect("sized above"))
            }
        }
    }

    /// Draws `y = A x + ε` for a given matrix.
    pub fn corrupt(
        &self,
        x: &[f64],
        a: MatrixDescriptor,
        rng: &mut Stream,
    ) -> Result<Observation, ChannelError> {
        if x.len() != self.dim_x() {
            return Err(ChannelError::Dimension {
                expected: self.dim_x(),
                got: x.len(),
            });
        }
        let mut y = a.apply(x)?;
        if self.sigma_y > 0.0 {
            let eps = normal_vec(rng, y.len());
            for (v, e) in y.iter_mut().zip(eps) {
                *v += self.sigma_y * e;
            }
        }
        Ok(Observation { y, a })
    }

    /// Samples a matrix and corrupts `x` with it, both from `rng`.
    pub fn observe(&self, x: &[f64], rng: &mut Stream) -> Result<Observation, ChannelError> {
        let a = self.sample_matrix(rng);
        self.corrupt(x, a, rng)
    }
}

impl MatrixDescriptor {
    /// Number of rows of `A`.
    pub fn rows(&self) -> usize {
        match self {
            Self::Dense(t) => t.shape()[0],
            Self::Mask(bits) => bits.len(),
            Self::Blur { height, width, .. } => height * width,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Self::Dense(t) => t.shape()[1],
            _ => self.rows(),
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, ChannelError> {
        if x.len() != self.cols() {
            return Err(ChannelError::Dimension {
                expected: self.cols(),
                got: x.len(),
            });
        }
        Ok(match self {
            Self::Dense(t) => {
                let c = t.shape()[1];
                (0..t.shape()[0])
                    .map(|i| t.data()[i * c..(i + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect()
            }
            Self::Mask(bits) => x
                .iter()
                .zip(bits.iter())
                .map(|(v, b)| if *b { *v } else { 0.0 })
                .collect(),
            Self::Blur { sigma, height, width } => blur_apply(*sigma, *height, *width, x),
        })
    }

    /// `Aᵀ v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>, ChannelError> {
        if v.len() != self.rows() {
            return Err(ChannelError::Dimension {
                expected: self.rows(),
                got: v.len(),
            });
        }
        Ok(match self {
            Self::Dense(t) => {
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += t.data()[i * c + j] * v[i];
                    }
                }
                out
            }
            Self::Mask(_) => self.apply(v)?,
            Self::Blur { sigma, height, width } => {
                let k = blur_matrix(*sigma, *height, *width)?.transpose().expect("rank 2");
                Self::Dense(k).apply(v)?
            }
        })
    }

    /// Materializes `A` as a dense `rows × cols` matrix.
    pub fn to_dense(&self) -> Tensor {
        match self {
            Self::Dense(t) => t.clone(),
            Self::Mask(bits) => {
                let n = bits.len();
                let mut t = Tensor::zeros(&[n, n]);
                for (i, b) in bits.iter().enumerate() {
                    if *b {
                        t.data_mut()[i * n + i] = 1.0;
                    }
                }
                t
            }
            Self::Blur { sigma, height, width } => {
                blur_matrix(*sigma, *height, *width).expect("descriptor came from a valid channel")
            }
        }
    }

    /// Packs a mask into LSB-first bytes.
    pub fn mask_to_bytes(bits: &BitVec<u8, Lsb0>) -> Vec<u8> {
        bits.as_raw_slice().to_vec()
    }

    pub fn mask_from_bytes(bytes: &[u8], len: usize) -> Result<BitVec<u8, Lsb0>, ChannelError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(ChannelError::Dimension {
                expected: len.div_ceil(8),
                got: bytes.len(),
            });
        }
        let mut bits = BitVec::<u8, Lsb0>::from_slice(bytes);
        bits.truncate(len);
        Ok(bits)
    }
}

/// Square support half-width of the truncated kernel.
pub fn blur_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

fn blur_weights(sigma: f64) -> Vec<f64> {
    let r = blur_radius(sigma) as i64;
    (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

fn blur_apply(sigma: f64, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let r = blur_radius(sigma) as i64;
    let g = blur_weights(sigma);
    let mut out = vec![0.0; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let (mut acc, mut norm) = (0.0, 0.0);
            for di in -r..=r {
                let ii = i + di;
                if ii < 0 || ii >= h as i64 {
                    continue;
                }
                for dj in -r..=r {
                    let jj = j + dj;
                    if jj < 0 || jj >= w as i64 {
                        continue;
                    }
                    let k = g[(di + r) as usize] * g[(dj + r) as usize];
                    acc += k * x[ii as usize * w + jj as usize];
                    norm += k;
                }
            }
            out[i as usize * w + j as usize] = acc / norm;
        }
    }
    out
}

/// Dense `(H·W) × (H·W)` Gaussian blur with border renormalization.
///
/// Row `p` holds the weights producing output pixel `p`; every row sums to 1.
pub fn blur_matrix(sigma: f64, height: usize, width: usize) -> Result<Tensor, ChannelError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ChannelError::InvalidParameter(format!("blur sigma = {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(ChannelError::InvalidParameter(format!(
            "blur image {height}x{width} has no pixels"
        )));
    }
    let n = height * width;
    let mut m = Tensor::zeros(&[n, n]);
    let mut e = vec![0.0; n];
    for q in 0..n {
        e[q] = 1.0;
        let col = blur_apply(sigma, height, width, &e);
        e[q] = 0.0;
        for (p, v) in col.into_iter().enumerate() {
            m.data_mut()[p * n + q] = v;
        }
    }
    Ok(m)
}

/// `log N(y; A x, σ_Y² I)`.
pub fn channel_log_likelihood(
    y: &[f64],
    x: &[f64],
    a: &MatrixDescriptor,
    sigma_y: f64,
) -> Result<f64, ChannelError> {
    if !(sigma_y > 0.0) {
        return Err(ChannelError::ZeroNoise);
    }
    let ax = a.apply(x)?;
    if ax.len() != y.len() {
        return Err(ChannelError::Dimension {
            expected: ax.len(),
            got: y.len(),
        });
    }
    let sq: f64 = y.iter().zip(&ax).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = y.len() as f64;
    Ok(-0.5 * sq / (sigma_y * sigma_y) - n * sigma_y.ln() - 0.5 * n * (2.0 * PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mask_bytes_round_trip() {
        let ch = CorruptionChannel::new(ChannelKind::RandomMask { rho: 0.4, dim: 13 }, 0.0).unwrap();
        let MatrixDescriptor::Mask(bits) = ch.sample_matrix(&mut stream(1, "t", &[])) else {
            panic!("mask channel must give a mask");
        };
        let bytes = MatrixDescriptor::mask_to_bytes(&bits);
        assert_eq!(bytes.len(), 2);
        assert_eq!(MatrixDescriptor::mask_from_bytes(&bytes, 13).unwrap(), bits);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CorruptionChannel::new(ChannelKind::RandomMask { rho: 1.5, dim: 3 }, 0.0).is_err());
        assert!(CorruptionChannel::new(ChannelKind::Sphere { rows: 6, dim: 5 }, 0.1).is_err());
        assert!(CorruptionChannel::new(
            ChannelKind::GaussianBlur { sigma: 0.0, height: 4, width: 4 },
            0.1
        )
        .is_err());
        assert!(CorruptionChannel::new(ChannelKind::Sphere { rows: 2, dim: 5 }, -1.0).is_err());
    }

    #[test]
    fn transpose_matches_dense() {
        let d = MatrixDescriptor::Blur { sigma: 1.0, height: 3, width: 4 };
        let v: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let via = d.apply_transpose(&v).unwrap();
        let dense = d.to_dense().transpose().unwrap();
        let direct = MatrixDescriptor::Dense(dense).apply(&v).unwrap();
        for (a, b) in via.iter().zip(direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
