//! Frame-wise pixel/latent codec.
//!
//! A fixed orthonormal transform stands in for a learned autoencoder: each
//! non-overlapping `p x p` patch is projected onto the 2-D DCT-II basis and
//! the lowest-frequency coefficients are kept as latent channels. Decode is
//! the adjoint, so decode∘encode is an orthogonal projection and gradients
//! pass through both directions exactly. Identity mode is available so
//! diffusion tests can run with zero codec error.

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    Identity,
    PatchOrtho,
}

#[derive(Debug, Clone)]
pub struct CodecSpec {
    pub mode: CodecMode,
    /// Patch edge length.
    pub patch: usize,
    /// Latent channels kept per patch (lowest frequencies first).
    pub kept: usize,
    /// Pixel-space frame dims.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl CodecSpec {
    pub fn identity(height: usize, width: usize, channels: usize) -> Self {
        CodecSpec {
            mode: CodecMode::Identity,
            patch: 1,
            kept: channels,
            height,
            width,
            channels,
        }
    }

    pub fn patch_ortho(height: usize, width: usize, channels: usize, patch: usize, kept: usize) -> Self {
        CodecSpec {
            mode: CodecMode::PatchOrtho,
            patch,
            kept,
            height,
            width,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CodecMode::Identity => Ok(()),
            CodecMode::PatchOrtho => {
                if self.patch == 0 {
                    return Err(Error::contract("patch must be >= 1"));
                }
                if self.height % self.patch != 0 || self.width % self.patch != 0 {
                    return Err(Error::contract(format!(
                        "frame {}x{} not divisible by patch {}",
                        self.height, self.width, self.patch
                    )));
                }
                let max_kept = self.patch * self.patch * self.channels;
                if self.kept == 0 || self.kept > max_kept {
                    return Err(Error::contract(format!(
                        "kept must be in 1..={max_kept}, got {}",
                        self.kept
                    )));
                }
                Ok(())
            }
        }
    }

    /// Latent frame dims `(H_z, W_z, C_z)`.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        match self.mode {
            CodecMode::Identity => (self.height, self.width, self.channels),
            CodecMode::PatchOrtho => (
                self.height / self.patch,
                self.width / self.patch,
                self.kept,
            ),
        }
    }
}

/// Orthonormal DCT-II basis row: `B[u][i] = s(u) cos(pi (2i+1) u / 2p)`.
fn dct_basis(p: usize) -> Vec<f64> {
    let mut basis = vec![0.0f64; p * p];
    for u in 0..p {
        let scale = if u == 0 {
            (1.0 / p as f64).sqrt()
        } else {
            (2.0 / p as f64).sqrt()
        };
        for i in 0..p {
            basis[u * p + i] =
                scale * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * p) as f64).cos();
        }
    }
    basis
}

/// Frequency pairs `(u, v)` in zigzag order (ascending `u+v`, then `u`).
fn zigzag(p: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|u| (0..p).map(move |v| (u, v)))
        .collect();
    pairs.sort_by_key(|&(u, v)| (u + v, u));
    pairs
}

fn check_frame(frame: &TensorF32, dims: (usize, usize, usize)) -> Result<()> {
    let want = [dims.0, dims.1, dims.2];
    if frame.shape() != want {
        return Err(Error::ShapeMismatch {
            expected: want.to_vec(),
            got: frame.shape().to_vec(),
        });
    }
    Ok(())
}

/// Encodes a `[H, W, C]` frame to its `[H_z, W_z, C_z]` latent.
pub fn encode_frame(frame: &TensorF32, spec: &CodecSpec) -> Result<TensorF32> {
    spec.validate()?;
    check_frame(frame, (spec.height, spec.width, spec.channels))?;
    if spec.mode == CodecMode::Identity {
        return Ok(frame.clone());
    }
    let p = spec.patch;
    let basis = dct_basis(p);
    let order = zigzag(p);
    let (hz, wz, cz) = spec.latent_dims();
    let c = spec.channels;
    let w = spec.width;
    let mut latent = vec![0.0f32; hz * wz * cz];
    for by in 0..hz {
        for bx in 0..wz {
            for k in 0..cz {
                let (u, v) = order[k / c];
                let ch = k % c;
                let mut acc = 0.0f64;
                for i in 0..p {
                    let bu = basis[u * p + i];
                    for j in 0..p {
                        let pix = frame.data()[((by * p + i) * w + bx * p + j) * c + ch] as f64;
                        acc += bu * basis[v * p + j] * pix;
                    }
                }
                latent[(by * wz + bx) * cz + k] = acc as f32;
            }
        }
    }
    Ok(TensorF32::from_parts(vec![hz, wz, cz], latent))
}

/// Decodes a `[H_z, W_z, C_z]` latent back to a `[H, W, C]` frame. Adjoint
/// of `encode_frame`; truncated coefficients are treated as zero.
pub fn decode_frame(latent: &TensorF32, spec: &CodecSpec) -> Result<TensorF32> {
    spec.validate()?;
    let (hz, wz, cz) = spec.latent_dims();
    check_frame(latent, (hz, wz, cz))?;
    if spec.mode == CodecMode::Identity {
        return Ok(latent.clone());
    }
    let p = spec.patch;
    let basis = dct_basis(p);
    let order = zigzag(p);
    let c = spec.channels;
    let w = spec.width;
    let mut frame = vec![0.0f32; spec.height * spec.width * c];
    for by in 0..hz {
        for bx in 0..wz {
            for i in 0..p {
                for j in 0..p {
                    for ch in 0..c {
                        let mut acc = 0.0f64;
                        for k in (ch..cz).step_by(c.max(1)) {
                            let (u, v) = order[k / c];
                            acc += basis[u * p + i]
                                * basis[v * p + j]
                                * latent.data()[(by * wz + bx) * cz + k] as f64;
                        }
                        frame[((by * p + i) * w + bx * p + j) * c + ch] = acc as f32;
                    }
                }
            }
        }
    }
    Ok(TensorF32::from_parts(vec![spec.height, spec.width, c], frame))
}

/// Frame-wise map of `encode_frame` over an `[L, H, W, C]` sequence.
/// `L = 0` is allowed and yields an empty latent sequence.
pub fn encode_seq(seq: &TensorF32, spec: &CodecSpec) -> Result<TensorF32> {
    map_seq(seq, spec, (spec.height, spec.width, spec.channels), spec.latent_dims(), encode_frame)
}

/// Frame-wise map of `decode_frame` over an `[L, H_z, W_z, C_z]` sequence.
pub fn decode_seq(seq: &TensorF32, spec: &CodecSpec) -> Result<TensorF32> {
    map_seq(seq, spec, spec.latent_dims(), (spec.height, spec.width, spec.channels), decode_frame)
}

fn map_seq(
    seq: &TensorF32,
    spec: &CodecSpec,
    in_dims: (usize, usize, usize),
    out_dims: (usize, usize, usize),
    f: fn(&TensorF32, &CodecSpec) -> Result<TensorF32>,
) -> Result<TensorF32> {
    spec.validate()?;
    if seq.shape().len() != 4 || seq.shape()[1..] != [in_dims.0, in_dims.1, in_dims.2] {
        return Err(Error::ShapeMismatch {
            expected: vec![seq.shape().first().copied().unwrap_or(0), in_dims.0, in_dims.1, in_dims.2],
            got: seq.shape().to_vec(),
        });
    }
    let l = seq.shape()[0];
    let in_len = in_dims.0 * in_dims.1 * in_dims.2;
    let out_len = out_dims.0 * out_dims.1 * out_dims.2;
    let mut out = Vec::with_capacity(l * out_len);
    for li in 0..l {
        let frame = TensorF32::from_parts(
            vec![in_dims.0, in_dims.1, in_dims.2],
            seq.data()[li * in_len..(li + 1) * in_len].to_vec(),
        );
        out.extend_from_slice(f(&frame, spec)?.data());
    }
    Ok(TensorF32::from_parts(vec![l, out_dims.0, out_dims.1, out_dims.2], out))
}

/// Empty `[0, ...]`-style sequences cannot be represented by `TensorF32`
/// (dims must be positive); callers model L = 0 with `None`. This helper
/// encodes an optional sequence accordingly.
pub fn encode_seq_opt(seq: Option<&TensorF32>, spec: &CodecSpec) -> Result<Option<TensorF32>> {
    seq.map(|s| encode_seq(s, spec)).transpose()
}
