//! On-disk formats.
//!
//! * Model checkpoint: one line of JSON header (`arch`, `seed`, `dim`), a
//!   newline, then `dim` little-endian `f64` parameters.
//! * Synthetic set: `synthetic.json` metadata next to `synthetic.bin`, a
//!   row-major block of little-endian `f32` features.
//! * Dataset export: CSV with columns `x0..x{d-1}, label, weight`.

use std::fs;
use std::path::{Path, PathBuf};

use iwd_core::ad::Mat;
use iwd_core::data::{idx, SyntheticSet, WeightedDataset};
use iwd_core::models::{ArchDescriptor, ModelState};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Artifact {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Writes a CSV file from a header and rows of already formatted fields.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchDescriptor,
    pub seed: u64,
    pub dim: usize,
}

pub fn encode_checkpoint(model: &ModelState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        seed: model.seed,
        dim: model.theta.dim(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for v in model.theta.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let bad = |message: String| CliError::Artifact {
        path: path.into(),
        message,
    };
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    if header.arch.num_params() != header.dim {
        return Err(bad(format!(
            "header dim {} does not match the architecture ({} parameters)",
            header.dim,
            header.arch.num_params()
        )));
    }
    let body = &bytes[split + 1..];
    if body.len() != header.dim * 8 {
        return Err(bad(format!(
            "parameter block has {} bytes, expected {}",
            body.len(),
            header.dim * 8
        )));
    }
    let theta: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ModelState {
        arch: header.arch,
        theta: theta.into(),
        seed: header.seed,
    })
}

pub fn write_checkpoint(path: &Path, model: &ModelState) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&read_bytes(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    /// Feature block file, relative to the metadata file.
    pub features: String,
    pub dtype: String,
    pub rows: usize,
    pub dim: usize,
    pub ipc: usize,
    pub class_count: usize,
    pub labels: Vec<usize>,
    pub lr: f64,
}

const F32_LE: &str = "f32-le";

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns both paths.
pub fn write_synthetic(dir: &Path, stem: &str, s: &SyntheticSet) -> Result<(PathBuf, PathBuf)> {
    let bin = dir.join(format!("{stem}.bin"));
    let meta_path = dir.join(format!("{stem}.json"));
    let mut block = Vec::with_capacity(s.x.data.len() * 4);
    for &v in &s.x.data {
        block.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(&bin, &block)?;
    let meta = SyntheticMeta {
        features: format!("{stem}.bin"),
        dtype: F32_LE.into(),
        rows: s.x.rows,
        dim: s.x.cols,
        ipc: s.ipc,
        class_count: s.class_count,
        labels: s.y.clone(),
        lr: s.lr,
    };
    write_json(&meta_path, &meta)?;
    Ok((meta_path, bin))
}

/// Reads a synthetic set from its metadata file.
pub fn read_synthetic(meta_path: &Path) -> Result<SyntheticSet> {
    let meta: SyntheticMeta = read_json(meta_path)?;
    let bad = |message: String| CliError::Artifact {
        path: meta_path.into(),
        message,
    };
    if meta.dtype != F32_LE {
        return Err(bad(format!("unsupported dtype {:?}", meta.dtype)));
    }
    let bin = meta_path.parent().unwrap_or(Path::new(".")).join(&meta.features);
    let bytes = read_bytes(&bin)?;
    if bytes.len() != meta.rows * meta.dim * 4 {
        return Err(bad(format!(
            "feature block has {} bytes, expected {}",
            bytes.len(),
            meta.rows * meta.dim * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let s = SyntheticSet::from_rows(Mat::new(meta.rows, meta.dim, data), meta.ipc, meta.class_count, meta.lr)?;
    if s.y != meta.labels {
        return Err(bad("labels are not in class-major order".into()));
    }
    Ok(s)
}

/// CSV export of a weighted dataset.
pub fn write_dataset_csv(path: &Path, ds: &WeightedDataset) -> Result<()> {
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    header.push("weight".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..ds.len()).map(|i| {
        let mut r: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        r.push(ds.y[i].to_string());
        r.push(ds.w[i].to_string());
        r
    });
    write_csv(path, &header_refs, rows)
}

/// Loads an IDX image/label file pair: pixels scaled to `[0, 1]`, then
/// standardized when `normalize` is set; uniform weights.
pub fn load_idx_pair(images: &Path, labels: &Path, normalize: bool) -> Result<WeightedDataset> {
    let img = idx::parse_images(&read_bytes(images)?).map_err(|e| CliError::Artifact {
        path: images.into(),
        message: e.to_string(),
    })?;
    let lab = idx::parse_labels(&read_bytes(labels)?).map_err(|e| CliError::Artifact {
        path: labels.into(),
        message: e.to_string(),
    })?;
    idx::to_dataset(&img, &lab, normalize, &images.display().to_string()).map_err(|e| CliError::Artifact {
        path: labels.into(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use iwd_core::models::{init_model, InitDistribution};

    #[test]
    fn checkpoint_round_trips_exactly() {
        let arch = ArchDescriptor::mlp(3, &[5], 2);
        let model = init_model(&arch, InitDistribution::KaimingUniform, 9);
        let bytes = encode_checkpoint(&model).unwrap();
        assert_eq!(decode_checkpoint(&bytes, Path::new("m")).unwrap(), model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
    }

    #[test]
    fn synthetic_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let x = Mat::new(4, 2, vec![0.5, -1.25, 3.0, 0.125, 2.0, -0.75, 1.5, 4.0]);
        let s = SyntheticSet::from_rows(x, 2, 2, 0.05).unwrap();
        let (meta, _) = write_synthetic(dir.path(), "synthetic", &s).unwrap();
        assert_eq!(read_synthetic(&meta).unwrap(), s);
    }

    #[test]
    fn dataset_csv_has_feature_label_weight_columns() {
        let dir = tempfile::tempdir().unwrap();
        let ds = WeightedDataset::new(Mat::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]), vec![0, 1], 2, "t").unwrap();
        let path = dir.path().join("d.csv");
        write_dataset_csv(&path, &ds).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "x0,x1,label,weight\n1,2,0,0.5\n3,4,1,0.5\n");
    }

    #[test]
    fn idx_files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let x = Mat::new(2, 4, vec![0.0, 1.0, 51.0 / 255.0, 1.0, 0.2, 0.4, 0.6, 0.8]);
        let ds = WeightedDataset::new(x, vec![1, 0], 2, "t").unwrap();
        let (img, lab) = idx::encode(&ds, 2, 2).unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        let back = load_idx_pair(&ip, &lp, false).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }
}
