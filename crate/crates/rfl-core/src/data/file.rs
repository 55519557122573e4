//! On-disk dataset format: a small tagged header, labels, then the image
//! tensor. Derived datasets record how they were made (`mode`) and what
//! they were made from (`source`), so provenance survives a round trip.

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::io::{read_buffer, write_buffer};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RFLD";
const VERSION: u8 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("non-utf8 string in dataset file: {e}")))
}

pub fn save_dataset(path: &Path, ds: &Dataset, mode: &str, source: &str) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    write_str(&mut w, &ds.name)?;
    write_str(&mut w, mode)?;
    write_str(&mut w, source)?;
    w.write_all(&(ds.n_classes as u32).to_le_bytes())?;
    w.write_all(&(ds.labels.len() as u64).to_le_bytes())?;
    for &l in &ds.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    write_buffer(&mut w, &ds.images)?;
    w.flush()?;
    Ok(())
}

/// Returns the dataset along with its `mode` and `source` tags.
pub fn load_dataset(path: &Path) -> Result<(Dataset, String, String)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            what: format!("dataset file {}", path.display()),
            offset: 0,
            detail: format!("magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Parse {
            what: format!("dataset file {}", path.display()),
            offset: 4,
            detail: format!("version {} not supported", version[0]),
        });
    }
    let name = read_str(&mut r)?;
    let mode = read_str(&mut r)?;
    let source = read_str(&mut r)?;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let n_classes = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32buf)?;
        labels.push(u32::from_le_bytes(u32buf) as usize);
    }
    let images = read_buffer(&mut r)?;
    Ok((Dataset::new(images, labels, n_classes, &name)?, mode, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    #[test]
    fn dataset_file_round_trip_is_bit_identical() {
        let ds = generate(&SyntheticSpec {
            n_per_class: 3,
            test_per_class: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .train;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.rfld");
        save_dataset(&path, &ds, "plain", "spec:default").unwrap();
        let (back, mode, source) = load_dataset(&path).unwrap();
        assert_eq!(mode, "plain");
        assert_eq!(source, "spec:default");
        assert_eq!(back.name, ds.name);
        assert_eq!(back.n_classes, ds.n_classes);
        assert_eq!(back.labels, ds.labels);
        let bits = |b: &crate::tensor::Buffer| -> Vec<u64> {
            b.data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&back.images), bits(&ds.images));
    }

    #[test]
    fn corrupt_magic_is_reported_with_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rfld");
        std::fs::write(&path, b"NOPE....").unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { what, .. }) => assert!(what.contains("bad.rfld")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_surfaces_an_io_error() {
        let ds = generate(&SyntheticSpec {
            n_per_class: 2,
            test_per_class: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .train;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.rfld");
        save_dataset(&path, &ds, "", "").unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
