//! IDX reader for MNIST-style image and label files.
//!
//! Layout: a big-endian `u32` magic (`0x0000_08TT` with `TT` the number of
//! dimensions), one big-endian `u32` per dimension, then `u8` cells.

use std::path::Path;

use thiserror::Error;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("wrong IDX magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("IDX dimensions overflow or are zero: {0:?}")]
    BadDimensions(Vec<u32>),
}

fn read_header(bytes: &[u8], magic: u32, ndim: usize) -> Result<(Vec<usize>, &[u8]), IdxError> {
    let header_len = 4 + 4 * ndim;
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(IdxError::WrongMagic { expected: magic, found });
    }
    if bytes.len() < header_len {
        return Err(IdxError::Truncated {
            needed: header_len,
            available: bytes.len(),
        });
    }
    let raw: Vec<u32> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    let dims: Vec<usize> = raw.iter().map(|&d| d as usize).collect();
    // The count dimension may be zero only for label files; image cells
    // must be non-empty.
    if dims[1..].contains(&0) {
        return Err(IdxError::BadDimensions(raw));
    }
    let cells = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| IdxError::BadDimensions(raw.clone()))?;
    let body = &bytes[header_len..];
    if body.len() < cells {
        return Err(IdxError::Truncated {
            needed: header_len.saturating_add(cells),
            available: bytes.len(),
        });
    }
    if body.len() > cells {
        return Err(IdxError::TrailingBytes(body.len() - cells));
    }
    Ok((dims, body))
}

/// Parses a 3-D `u8` image file into `[n, rows·cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, IdxError> {
    let (dims, body) = read_header(bytes, IMAGES_MAGIC, 3)?;
    if dims[0] == 0 {
        return Err(IdxError::BadDimensions(dims.iter().map(|&d| d as u32).collect()));
    }
    let data = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::from_parts(vec![dims[0], dims[1] * dims[2]], data))
}

/// Parses a 1-D `u8` label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let (_, body) = read_header(bytes, LABELS_MAGIC, 1)?;
    Ok(body.to_vec())
}

/// Loads an image file and, optionally, its label file. Labels define
/// `n_classes` as one more than the largest label seen.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = parse_idx_images(&read(images_path)?)?;
    let mut provenance = format!("idx:{}", images_path.display());
    let (labels, n_classes) = match labels_path {
        None => (None, None),
        Some(lp) => {
            let raw = parse_idx_labels(&read(lp)?)?;
            if raw.len() != images.rows() {
                return Err(IdxError::CountMismatch {
                    images: images.rows(),
                    labels: raw.len(),
                }
                .into());
            }
            provenance.push_str(&format!("+{}", lp.display()));
            let k = raw.iter().copied().max().map_or(0, |m| m as usize + 1);
            (Some(raw.into_iter().map(usize::from).collect()), Some(k))
        }
    };
    Dataset::new(images, labels, n_classes, provenance)
}

/// Encodes an image tensor (values in `[0, 1]`, rounded to bytes) as an
/// IDX image file with the given per-image `rows × cols` shape.
pub fn encode_idx_images(images: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let (n, d) = images.expect_matrix("encode_idx_images")?;
    if rows * cols != d {
        return Err(Error::Shape {
            op: "encode_idx_images",
            lhs: vec![n, d],
            rhs: vec![n, rows * cols],
        });
    }
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for dim in [n, rows, cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // Two 2×2 images written out byte by byte.
    const IMAGES: [u8; 24] = [
        0x00, 0x00, 0x08, 0x03, // magic
        0x00, 0x00, 0x00, 0x02, // count
        0x00, 0x00, 0x00, 0x02, // rows
        0x00, 0x00, 0x00, 0x02, // cols
        0, 51, 102, 255, //
        255, 0, 204, 153,
    ];
    const LABELS: [u8; 10] = [0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3];

    #[test]
    fn fixture_parses_and_scales() {
        let t = parse_idx_images(&IMAGES).unwrap();
        assert_eq!(t.shape(), &[2, 4]);
        assert_eq!(t.row(0), &[0.0, 0.2, 0.4, 1.0]);
        assert_eq!(t.row(1), &[1.0, 0.0, 0.8, 0.6]);
        assert_eq!(parse_idx_labels(&LABELS).unwrap(), vec![7, 3]);
    }

    #[test]
    fn wrong_magic_is_distinct() {
        let mut bad = LABELS;
        bad[3] = 0x03;
        assert_eq!(
            parse_idx_labels(&bad),
            Err(IdxError::WrongMagic {
                expected: LABELS_MAGIC,
                found: IMAGES_MAGIC
            })
        );
    }

    #[test]
    fn truncation_detected_at_every_length() {
        for len in 0..IMAGES.len() {
            assert!(
                matches!(parse_idx_images(&IMAGES[..len]), Err(IdxError::Truncated { .. })),
                "len {len}"
            );
        }
        let mut long = IMAGES.to_vec();
        long.push(0);
        assert_eq!(parse_idx_images(&long), Err(IdxError::TrailingBytes(1)));
    }

    #[test]
    fn huge_dimensions_do_not_allocate() {
        let mut b = IMAGES[..16].to_vec();
        b[4..8].copy_from_slice(&u32::MAX.to_be_bytes());
        b[8..12].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(parse_idx_images(&b).is_err());
    }

    #[test]
    fn encode_round_trip() {
        let t = parse_idx_images(&IMAGES).unwrap();
        assert_eq!(encode_idx_images(&t, 2, 2).unwrap(), IMAGES.to_vec());
        assert_eq!(encode_idx_labels(&[7, 3]), LABELS.to_vec());
    }

    #[test]
    fn count_mismatch_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, IMAGES).unwrap();
        std::fs::write(&lp, encode_idx_labels(&[1, 2, 3])).unwrap();
        let err = load_idx(&ip, Some(&lp)).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::CountMismatch { images: 2, labels: 3 })));
        std::fs::write(&lp, LABELS).unwrap();
        let d = load_idx(&ip, Some(&lp)).unwrap();
        assert_eq!(d.labels().unwrap(), &[7, 3]);
        assert_eq!(d.n_classes(), Some(8));
    }
}
