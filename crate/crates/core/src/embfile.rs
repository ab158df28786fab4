//! Embedding table file format, the ingestion/export path for encoder
//! outputs.
//!
//! Layout: magic "UEMB", version u32, count u32, width u32, then
//! count*width little-endian f32 values row-major. Speaker labels live
//! in a text sidecar (same stem, `.labels` extension), one integer id
//! per line in row order.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UEMB";
pub const VERSION: u32 = 1;

pub struct EmbeddingTable {
    /// [N x W] rows, one embedding per row.
    pub rows: Tensor,
    /// Speaker id per row.
    pub labels: Vec<usize>,
}

fn labels_path(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

/// Writes the table and its labels sidecar.
pub fn save_embeddings(path: &Path, rows: &Tensor, labels: &[usize]) -> Result<()> {
    if rows.shape().len() != 2 {
        return Err(CoreError::Contract(format!(
            "embedding table must be a matrix, got shape {:?}",
            rows.shape()
        )));
    }
    let (n, w) = (rows.rows(), rows.cols());
    if labels.len() != n {
        return Err(CoreError::Contract(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + n * w * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in rows.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &buf)?;
    let mut text = String::new();
    for &l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(labels_path(path), text)?;
    Ok(())
}

/// Reads a table, checking magic, version, payload length, and the
/// optional expected width.
pub fn load_embeddings(path: &Path, expected_width: Option<usize>) -> Result<EmbeddingTable> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|_| CoreError::Format(
        "embedding file shorter than its 16-byte header".into(),
    ))?;
    if &header[0..4] != MAGIC {
        return Err(CoreError::Format(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            &header[0..4]
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if let Some(ew) = expected_width {
        if w != ew {
            return Err(CoreError::Format(format!(
                "embedding width {w} does not match expected {ew}"
            )));
        }
    }
    if n == 0 || w == 0 {
        return Err(CoreError::Format(format!(
            "embedding table is empty ({n} rows, width {w})"
        )));
    }
    let expected = n * w * 4;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(CoreError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(n * w);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let rows = Tensor::from_vec(vec![n, w], data)?;

    let ltext = fs::read_to_string(labels_path(path))?;
    let mut labels = Vec::with_capacity(n);
    for (i, line) in ltext.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<usize>().map_err(|_| {
            CoreError::Format(format!("label line {} is not an integer: {line:?}", i + 1))
        })?);
    }
    if labels.len() != n {
        return Err(CoreError::Format(format!(
            "label sidecar has {} entries for {n} rows",
            labels.len()
        )));
    }
    Ok(EmbeddingTable { rows, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = roundtrip_dir();
        let path = dir.path().join("emb.bin");
        let rows = Tensor::from_vec(vec![2, 3], vec![1.5, -2.25, 0.0, 4.0, 0.125, -8.0]).unwrap();
        save_embeddings(&path, &rows, &[7, 9]).unwrap();
        let table = load_embeddings(&path, Some(3)).unwrap();
        assert_eq!(table.rows.data(), rows.data());
        assert_eq!(table.labels, vec![7, 9]);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let dir = roundtrip_dir();
        let path = dir.path().join("emb.bin");
        let rows = Tensor::from_vec(vec![2, 3], vec![0.0; 6]).unwrap();
        save_embeddings(&path, &rows, &[0, 1]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_embeddings(&path, None) {
            Err(CoreError::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (24, 20));
            }
            Err(other) => panic!("expected truncation error, got {other}"),
            Ok(_) => panic!("expected truncation error, got a table"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = roundtrip_dir();
        let path = dir.path().join("emb.bin");
        let rows = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        save_embeddings(&path, &rows, &[0]).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_embeddings(&path, None),
            Err(CoreError::Format(_))
        ));

        save_embeddings(&path, &rows, &[0]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_embeddings(&path, None),
            Err(CoreError::UnsupportedVersion {
                found: 99,
                supported: 1
            })
        ));
    }

    #[test]
    fn width_mismatch_is_a_format_error() {
        let dir = roundtrip_dir();
        let path = dir.path().join("emb.bin");
        let rows = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        save_embeddings(&path, &rows, &[3]).unwrap();
        assert!(matches!(
            load_embeddings(&path, Some(5)),
            Err(CoreError::Format(_))
        ));
    }
}
