//! Model checkpoints: a single binary file carrying a JSON header (format
//! version, model shape, parameter block table) followed by the raw f32
//! parameter values, plus a `loss.csv` training-curve sidecar.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::model::{DualEncoder, ModelConfig};
use crate::clip::train::TrainLog;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MMCK";
const FORMAT_VERSION: u32 = 1;
/// File name used when saving into (or loading from) a directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    blocks: Vec<BlockEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write `checkpoint.bin` (and `loss.csv` when a log is given) into
/// `dir`, creating it if needed. Returns the checkpoint path.
pub fn save(dir: &Path, model: &DualEncoder<f32>, log: Option<&TrainLog>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.cfg.clone(),
        blocks: model
            .params
            .blocks()
            .iter()
            .map(|m| BlockEntry {
                name: m.name.clone(),
                rows: m.handle.rows,
                cols: m.handle.cols,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidArgument(format!("unserializable header: {e}")))?;

    let path = dir.join(CHECKPOINT_FILE);
    let mut buf = Vec::with_capacity(16 + header_json.len() + model.params.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for v in &model.params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, buf).map_err(io_err(&path))?;

    if let Some(log) = log {
        let csv_path = dir.join("loss.csv");
        let mut csv = String::from("epoch,loss\n");
        for (epoch, loss) in log.epoch_loss.iter().enumerate() {
            csv.push_str(&format!("{epoch},{loss}\n"));
        }
        fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    }
    Ok(path)
}

/// Load a checkpoint from a `checkpoint.bin` path or from a directory
/// containing one. The parameter block table must match the model built
/// from the stored configuration exactly.
pub fn load(path: &Path) -> Result<DualEncoder<f32>> {
    let file = if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    };
    let mut reader = fs::File::open(&file).map_err(io_err(&file))?;
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(io_err(&file))?;
    if &magic != MAGIC {
        return Err(format_err(&file, "bad magic; not a model checkpoint"));
    }
    let mut len_bytes = [0u8; 8];
    reader.read_exact(&mut len_bytes).map_err(io_err(&file))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(format_err(&file, "implausible header length"));
    }
    let mut header_json = vec![0u8; header_len];
    reader.read_exact(&mut header_json).map_err(io_err(&file))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| format_err(&file, format!("malformed header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(
            &file,
            format!(
                "format version {} not supported (expected {FORMAT_VERSION})",
                header.format_version
            ),
        ));
    }

    let mut model = DualEncoder::<f32>::new(header.model)?;
    let metas = model.params.blocks();
    if metas.len() != header.blocks.len() {
        return Err(format_err(
            &file,
            format!(
                "parameter table holds {} blocks, model needs {}",
                header.blocks.len(),
                metas.len()
            ),
        ));
    }
    for (meta, entry) in metas.iter().zip(&header.blocks) {
        if meta.name != entry.name
            || meta.handle.rows != entry.rows
            || meta.handle.cols != entry.cols
        {
            return Err(format_err(
                &file,
                format!(
                    "block mismatch: file has {} ({}x{}), model expects {} ({}x{})",
                    entry.name, entry.rows, entry.cols, meta.name, meta.handle.rows, meta.handle.cols
                ),
            ));
        }
    }

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io_err(&file))?;
    let expected = model.params.len() * 4;
    if payload.len() != expected {
        return Err(format_err(
            &file,
            format!("payload size mismatch: {} bytes, expected {expected}", payload.len()),
        ));
    }
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(format_err(&file, format!("non-finite parameter at index {i}")));
        }
        model.params.values[i] = v;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::gradcheck::micro_config;

    fn tiny_model(seed: u64) -> DualEncoder<f32> {
        let mut m = DualEncoder::new(micro_config()).unwrap();
        m.init(seed);
        m
    }

    #[test]
    fn roundtrips_parameters_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(5);
        let log = TrainLog {
            epoch_loss: vec![2.1, 1.4, 0.9],
        };
        let path = save(dir.path(), &model, Some(&log)).unwrap();

        // Load via the file and via the directory.
        for target in [path.as_path(), dir.path()] {
            let loaded = load(target).unwrap();
            assert_eq!(loaded.cfg, model.cfg);
            assert_eq!(loaded.params.values, model.params.values);
        }
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv, "epoch,loss\n0,2.1\n1,1.4\n2,0.9\n");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(1);
        let path = save(dir.path(), &model, None).unwrap();
        let good = fs::read(&path).unwrap();

        // Truncated payload.
        fs::write(&path, &good[..good.len() - 5]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");

        // Wrong magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("magic"));

        // Unsupported version.
        let mut header_end = 12 + u64::from_le_bytes(good[4..12].try_into().unwrap()) as usize;
        let json = String::from_utf8(good[12..header_end].to_vec()).unwrap();
        let bumped = json.replace("\"format_version\":1", "\"format_version\":99");
        assert_ne!(json, bumped);
        let mut rewritten = Vec::new();
        rewritten.extend_from_slice(MAGIC);
        rewritten.extend_from_slice(&(bumped.len() as u64).to_le_bytes());
        rewritten.extend_from_slice(bumped.as_bytes());
        header_end = good.len();
        let _ = header_end;
        rewritten.extend_from_slice(&good[12 + json.len()..]);
        fs::write(&path, rewritten).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        // Non-finite parameter.
        let mut nan = good.clone();
        let tail = nan.len() - 4;
        nan[tail..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, nan).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");

        // Missing file.
        assert!(load(&dir.path().join("nope.bin")).is_err());
    }
}
