//! IDX ubyte files as used by MNIST and its drop-in relatives.
//!
//! Layout: a big-endian magic `0x0000TTDD` (TT = 0x08 for unsigned bytes,
//! DD = number of dimensions), DD big-endian u32 sizes, then the payload.

use std::path::Path;

use thiserror::Error;

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parse an IDX file with the given magic; returns dims and payload.
pub fn parse<'a>(
    bytes: &'a [u8],
    magic: u32,
    what: &'static str,
) -> Result<(Vec<usize>, &'a [u8]), IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            what,
            expected: 4,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::BadMagic {
            what,
            expected: magic,
            found,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            what,
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(IdxError::Truncated {
            what,
            expected: header + payload,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..header + payload]))
}

/// Encode dims and payload with the given magic.
pub fn encode(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    assert_eq!(dims.len(), (magic & 0xff) as usize);
    assert_eq!(dims.iter().product::<usize>(), payload.len());
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Build a dataset from raw image and label file contents. Pixels are scaled
/// from `0..=255` to `[-1, 1]`.
pub fn decode_dataset(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset, IdxError> {
    let (idims, pixels) = parse(images, IMAGES_MAGIC, "images")?;
    let (ldims, label_bytes) = parse(labels, LABELS_MAGIC, "labels")?;
    if idims[0] != ldims[0] {
        return Err(IdxError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let features = pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    Ok(Dataset {
        sample_shape: vec![1, idims[1], idims[2]],
        features,
        labels: label_bytes.iter().map(|&l| l as usize).collect(),
        classes,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|e| IdxError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset, IdxError> {
    decode_dataset(&read(images)?, &read(labels)?, classes)
}

/// Inverse of [`decode_dataset`] for `[1, H, W]` datasets.
pub fn encode_dataset(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let n = ds.len();
    let (h, w) = (ds.sample_shape[1], ds.sample_shape[2]);
    let pixels: Vec<u8> = ds
        .features
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    (
        encode(IMAGES_MAGIC, &[n, h, w], &pixels),
        encode(LABELS_MAGIC, &[n], &labels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..2 * 2 * 3).map(|v| (v * 20) as u8).collect();
        (
            encode(IMAGES_MAGIC, &[2, 2, 3], &pixels),
            encode(LABELS_MAGIC, &[2], &[7, 1]),
        )
    }

    #[test]
    fn byte_round_trip() {
        let (img, lab) = tiny();
        let ds = decode_dataset(&img, &lab, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape, vec![1, 2, 3]);
        assert_eq!(ds.labels, vec![7, 1]);
        assert_eq!(ds.features[0], -1.0);
        let (img2, lab2) = encode_dataset(&ds);
        assert_eq!(img, img2);
        assert_eq!(lab, lab2);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let img = encode(IMAGES_MAGIC, &[0, 28, 28], &[]);
        let lab = encode(LABELS_MAGIC, &[0], &[]);
        let ds = decode_dataset(&img, &lab, 10).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn distinct_errors() {
        let (img, lab) = tiny();
        assert!(matches!(
            decode_dataset(&lab, &lab, 10),
            Err(IdxError::BadMagic { .. })
        ));
        assert!(matches!(
            decode_dataset(&img[..img.len() - 1], &lab, 10),
            Err(IdxError::Truncated { .. })
        ));
        let lab3 = encode(LABELS_MAGIC, &[3], &[1, 2, 3]);
        assert!(matches!(
            decode_dataset(&img, &lab3, 10),
            Err(IdxError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn mnist_sized_header() {
        let pixels = vec![0u8; 60000 * 28 * 28];
        let img = encode(IMAGES_MAGIC, &[60000, 28, 28], &pixels);
        let (dims, payload) = parse(&img, IMAGES_MAGIC, "images").unwrap();
        assert_eq!(dims, vec![60000, 28, 28]);
        assert_eq!(payload.len(), 47_040_000);
    }
}
