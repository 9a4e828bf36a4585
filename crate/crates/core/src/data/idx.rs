//! IDX binary files (the MNIST family): a big-endian magic word whose low
//! byte is the number of dimensions, one u32 per dimension, then u8 data.

use std::path::Path;

use super::Dataset;
use crate::error::{input_err, FedError, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FedError::Format {
                offset: self.bytes.len() as u64,
                message: format!(
                    "{} file truncated: needed {} bytes from offset {}, file has {}",
                    self.what,
                    n,
                    self.at,
                    self.bytes.len()
                ),
            });
        };
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn expect_magic(&mut self, magic: u32) -> Result<()> {
        let found = self.u32()?;
        if found != magic {
            return Err(FedError::Format {
                offset: 0,
                message: format!(
                    "{} file has magic {found:#010x}, expected {magic:#010x}",
                    self.what
                ),
            });
        }
        Ok(())
    }
}

/// Load an image/label IDX pair. Pixels are scaled to [0, 1] and shaped
/// `(n, 1, rows, cols)`; the class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    parse_idx(&image_bytes, &label_bytes)
}

pub(crate) fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let mut img = Cursor {
        bytes: image_bytes,
        at: 0,
        what: "image",
    };
    img.expect_magic(IMAGES_MAGIC)?;
    let n = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = img.take(n * rows * cols)?;

    let mut lab = Cursor {
        bytes: label_bytes,
        at: 0,
        what: "label",
    };
    lab.expect_magic(LABELS_MAGIC)?;
    let m = lab.u32()? as usize;
    if m != n {
        return Err(FedError::Format {
            offset: 4,
            message: format!("label file holds {m} items, image file {n}"),
        });
    }
    let labels: Vec<usize> = lab.take(m)?.iter().map(|&l| l as usize).collect();
    if n == 0 {
        return Err(input_err("IDX files contain no samples"));
    }
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, classes)
}

/// Write a dataset of `(n, 1, rows, cols)` images in [0, 1] as an IDX pair,
/// quantising pixels to u8.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [1, rows, cols] = dataset.sample_shape() else {
        return Err(input_err(format!(
            "IDX export needs single-channel images, got {:?}",
            dataset.sample_shape()
        )));
    };
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    for v in [IMAGES_MAGIC, n as u32, *rows as u32, *cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .inputs()
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in dataset.labels() {
        let byte = u8::try_from(l).map_err(|_| input_err(format!("label {l} does not fit in a byte")))?;
        lab.push(byte);
    }
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn all_zero_images_load_as_zeros() {
        let mut img = header(IMAGES_MAGIC, &[2, 28, 28]);
        img.extend(std::iter::repeat_n(0u8, 2 * 28 * 28));
        let mut lab = header(LABELS_MAGIC, &[2]);
        lab.extend([3, 7]);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.inputs().shape(), &[2, 1, 28, 28]);
        assert!(ds.inputs().data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.classes(), 8);
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let mut img = header(IMAGES_MAGIC, &[1, 1, 2]);
        img.extend([0, 255]);
        let mut lab = header(LABELS_MAGIC, &[1]);
        lab.push(0);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.inputs().data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let mut img = header(IMAGES_MAGIC, &[2, 28, 28]);
        img.extend(std::iter::repeat_n(0u8, 100));
        let lab = header(LABELS_MAGIC, &[2]);
        match parse_idx(&img, &lab) {
            Err(FedError::Format { offset, .. }) => assert_eq!(offset, 116),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_header_is_an_error() {
        assert!(matches!(
            parse_idx(&[0, 0, 8], &[]),
            Err(FedError::Format { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let img = header(LABELS_MAGIC, &[0]);
        let err = parse_idx(&img, &header(LABELS_MAGIC, &[0])).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let mut img = header(IMAGES_MAGIC, &[1, 1, 1]);
        img.push(9);
        let mut lab = header(LABELS_MAGIC, &[2]);
        lab.extend([0, 1]);
        assert!(parse_idx(&img, &lab).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        let data: Vec<f64> = (0..8).map(|v| v as f64 / 255.0).collect();
        let ds = Dataset::new(Tensor::new(vec![2, 1, 2, 2], data).unwrap(), vec![1, 0], 2).unwrap();
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.inputs().data().iter().zip(ds.inputs().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
