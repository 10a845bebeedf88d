//! Zero-dependency 8-bit PGM export plus optional PNG, for eyeballing
//! frames without any tooling.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use gnwd_core::TensorF32;

fn to_bytes(plane: &[f32]) -> Vec<u8> {
    plane
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes a single `[H, W]` plane as binary PGM.
pub fn write_pgm(path: &Path, plane: &[f32], h: usize, w: usize) -> Result<()> {
    let mut file = std::fs::File::create(path).with_context(|| format!("create {path:?}"))?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(&to_bytes(plane))?;
    Ok(())
}

pub fn write_png(path: &Path, plane: &[f32], h: usize, w: usize) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("create {path:?}"))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&to_bytes(plane))?;
    Ok(())
}

/// Lays an `[L, H, W, 1]` sequence out as one `[H, L*W]` film-strip plane.
pub fn film_strip(seq: &TensorF32) -> Result<(Vec<f32>, usize, usize)> {
    let shape = seq.shape();
    anyhow::ensure!(
        shape.len() == 4 && shape[3] == 1,
        "film strip needs [L, H, W, 1], got {shape:?}"
    );
    let (l, h, w) = (shape[0], shape[1], shape[2]);
    let mut strip = vec![0.0f32; h * l * w];
    for f in 0..l {
        for y in 0..h {
            for x in 0..w {
                strip[y * (l * w) + f * w + x] = seq.data()[((f * h) + y) * w + x];
            }
        }
    }
    Ok((strip, h, l * w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &[0.0, 0.5, 1.0, 2.0], 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 255]);
    }

    #[test]
    fn film_strip_tiles_frames_horizontally() {
        let seq = TensorF32::new(
            vec![2, 1, 2, 1],
            vec![0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let (strip, h, w) = film_strip(&seq).unwrap();
        assert_eq!((h, w), (1, 4));
        assert_eq!(strip, vec![0.1, 0.2, 0.3, 0.4]);
    }
}
