//! Parsers for two external binary layouts: IDX (big-endian magic plus
//! dimension table) and the CIFAR-10 batch format (flat 3073-byte
//! records). Byte values scale to [0, 1].

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Buffer;
use std::path::Path;

fn parse_err(what: &str, offset: usize, detail: String) -> Error {
    Error::Parse {
        what: what.to_string(),
        offset: offset as u64,
        detail,
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(parse_err(what, offset, "truncated 32-bit field".into()));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// IDX image file: magic 0x00000803, then count, rows, cols, then one
/// unsigned byte per pixel. Returns `[N, 1, H, W]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Buffer> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != 0x0000_0803 {
        return Err(parse_err(
            "idx images",
            0,
            format!("magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let h = be_u32(bytes, 8, "idx images")? as usize;
    let w = be_u32(bytes, 12, "idx images")? as usize;
    let need = 16 + n * h * w;
    if bytes.len() != need {
        return Err(parse_err(
            "idx images",
            bytes.len().min(need),
            format!("{} bytes for {n}x{h}x{w} pixels, expected {need}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Buffer::new(data, vec![n, 1, h, w])
}

/// IDX label file: magic 0x00000801, then count, then one byte per label.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != 0x0000_0801 {
        return Err(parse_err(
            "idx labels",
            0,
            format!("magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let need = 8 + n;
    if bytes.len() != need {
        return Err(parse_err(
            "idx labels",
            bytes.len().min(need),
            format!("{} bytes for {n} labels, expected {need}", bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads a paired IDX image and label file into one dataset.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    n_classes: usize,
    name: &str,
) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    Dataset::new(images, labels, n_classes, name)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 batch bytes: records of one label byte then 3072 pixel bytes
/// in channel-major order. Returns `[N, 3, 32, 32]` with 10 classes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(parse_err(
            "cifar10",
            bytes.len(),
            format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        if rec[0] > 9 {
            return Err(parse_err(
                "cifar10",
                i * CIFAR_RECORD,
                format!("label byte {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Buffer::new(data, vec![n, 3, 32, 32])?, labels, 10, "cifar10")
}

/// Concatenates several CIFAR-10 batch files into one dataset.
pub fn load_cifar10(paths: &[std::path::PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Data("no cifar10 batch files given".into()));
    }
    let mut all = Vec::new();
    for p in paths {
        all.extend(std::fs::read(p)?);
    }
    parse_cifar10(&all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(0x0000_0803u32.to_be_bytes());
        b.extend((n as u32).to_be_bytes());
        b.extend((h as u32).to_be_bytes());
        b.extend((w as u32).to_be_bytes());
        b.extend(pixels);
        b
    }

    #[test]
    fn idx_images_round_trip_values_and_shape() {
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 10) as u8).collect();
        let buf = parse_idx_images(&idx_image_bytes(2, 3, 3, &pixels)).unwrap();
        assert_eq!(buf.shape(), &[2, 1, 3, 3]);
        assert_eq!(buf.data()[4], 40.0 / 255.0);
        assert_eq!(buf.data()[17], 170.0 / 255.0);
    }

    #[test]
    fn idx_rejects_wrong_magic_and_truncation() {
        let pixels: Vec<u8> = vec![0; 18];
        let mut bytes = idx_image_bytes(2, 3, 3, &pixels);
        bytes[2] = 0x09;
        match parse_idx_images(&bytes) {
            Err(Error::Parse { what, offset, .. }) => {
                assert_eq!(what, "idx images");
                assert_eq!(offset, 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let bytes = idx_image_bytes(2, 3, 3, &pixels[..17]);
        match parse_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 33),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn idx_labels_parse_and_validate_length() {
        let mut b = Vec::new();
        b.extend(0x0000_0801u32.to_be_bytes());
        b.extend(3u32.to_be_bytes());
        b.extend([7u8, 0, 2]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 0, 2]);
        b.push(9);
        assert!(matches!(parse_idx_labels(&b), Err(Error::Parse { .. })));
    }

    #[test]
    fn cifar_records_split_label_and_planes() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255; // first red pixel of record 0
        bytes[CIFAR_RECORD] = 9;
        bytes[CIFAR_RECORD + 1 + 1024] = 51; // first green pixel of record 1
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.images.sample(0)[0], 1.0);
        assert_eq!(ds.images.sample(1)[1024], 0.2);
    }

    #[test]
    fn cifar_rejects_ragged_files_and_bad_labels() {
        assert!(matches!(
            parse_cifar10(&vec![0u8; CIFAR_RECORD + 1]),
            Err(Error::Parse { .. })
        ));
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        match parse_cifar10(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected label error, got {other:?}"),
        }
    }
}
