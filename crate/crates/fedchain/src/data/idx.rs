//! IDX binary format, as distributed with MNIST/EMNIST: big-endian headers,
//! unsigned-byte payloads. Images use magic 0x00000803 with dims
//! [n, 28, 28]; labels use magic 0x00000801 with dims [n].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, IMAGE_SIDE};
use crate::nn::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| DataError::Format(format!("{field}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load a dataset from an IDX image file plus an IDX label file. Pixels are
/// scaled to [0, 1] by dividing by 255.
pub fn load_idx<P: AsRef<Path>, Q: AsRef<Path>>(
    images_path: P,
    labels_path: Q,
) -> Result<Dataset, DataError> {
    let mut images = BufReader::new(File::open(&images_path)?);
    let magic = read_u32(&mut images, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::Format(format!(
            "images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(&mut images, "images count")? as usize;
    let rows = read_u32(&mut images, "images rows")? as usize;
    let cols = read_u32(&mut images, "images cols")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::Format(format!(
            "images dims {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }
    let mut pixels = vec![0u8; count * rows * cols];
    images
        .read_exact(&mut pixels)
        .map_err(|e| DataError::Format(format!("images payload: {e}")))?;
    let mut trailing = [0u8; 1];
    if images.read(&mut trailing)? != 0 {
        return Err(DataError::Format("images payload has trailing bytes".into()));
    }

    let mut labels_file = BufReader::new(File::open(&labels_path)?);
    let magic = read_u32(&mut labels_file, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::Format(format!(
            "labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32(&mut labels_file, "labels count")? as usize;
    if label_count != count {
        return Err(DataError::Format(format!(
            "labels count {label_count} differs from images count {count}"
        )));
    }
    let mut labels_raw = vec![0u8; label_count];
    labels_file
        .read_exact(&mut labels_raw)
        .map_err(|e| DataError::Format(format!("labels payload: {e}")))?;
    if labels_file.read(&mut trailing)? != 0 {
        return Err(DataError::Format("labels payload has trailing bytes".into()));
    }

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let tensor = Tensor::from_vec(&[count, IMAGE_SIDE, IMAGE_SIDE], data)
        .map_err(|e| DataError::Format(e.to_string()))?;
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    Dataset::new(tensor, labels)
}

/// Write a dataset as a pair of IDX files. Pixels are quantized back to
/// bytes by rounding value * 255, the exact inverse of `load_idx` scaling.
pub fn save_idx<P: AsRef<Path>, Q: AsRef<Path>>(
    dataset: &Dataset,
    images_path: P,
    labels_path: Q,
) -> Result<(), DataError> {
    let n = dataset.len() as u32;

    let mut images = BufWriter::new(File::create(&images_path)?);
    images.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    images.write_all(&n.to_be_bytes())?;
    images.write_all(&(IMAGE_SIDE as u32).to_be_bytes())?;
    images.write_all(&(IMAGE_SIDE as u32).to_be_bytes())?;
    let bytes: Vec<u8> = dataset
        .images()
        .data()
        .iter()
        .map(|&p| (p * 255.0).round() as u8)
        .collect();
    images.write_all(&bytes)?;
    images.flush()?;

    let mut labels = BufWriter::new(File::create(&labels_path)?);
    labels.write_all(&LABELS_MAGIC.to_be_bytes())?;
    labels.write_all(&n.to_be_bytes())?;
    let label_bytes: Vec<u8> = dataset.labels().iter().map(|&l| l as u8).collect();
    labels.write_all(&label_bytes)?;
    labels.flush()?;
    Ok(())
}
