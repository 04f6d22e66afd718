//! On-disk task datasets.
//!
//! Each task is one `VASF` file (little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `b"VASF"`                           |
//! | 2            | version `u16` = 1                         |
//! | 2 + 2        | `rows: u16`, `cols: u16`                  |
//! | 4            | feature dimension `d: u32`                |
//! | 4·N·d        | features as `f32`, cell-major             |
//! | N            | labels as `u8` (0 or 1)                   |
//!
//! A dataset is a UTF-8 JSON manifest listing task files relative to the
//! manifest's directory: `{"tasks": [{"id": …, "file": …}], "split": …}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VasError};
use crate::task::Task;

pub const TASK_MAGIC: &[u8; 4] = b"VASF";
pub const TASK_VERSION: u16 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
const HEADER_LEN: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Ingested,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub tasks: Vec<Task>,
    pub split: Split,
    pub provenance: Provenance,
    pub config_hash: String,
}

impl TaskDataset {
    pub fn new(
        tasks: Vec<Task>,
        split: Split,
        provenance: Provenance,
        config_hash: String,
    ) -> Result<Self> {
        if let Some(first) = tasks.first() {
            for t in &tasks[1..] {
                if t.grid_shape() != first.grid_shape() || t.feature_dim() != first.feature_dim() {
                    return Err(VasError::InvalidTask(format!(
                        "task {} has grid {:?} / d={} but task {} has grid {:?} / d={}",
                        t.id(),
                        t.grid_shape(),
                        t.feature_dim(),
                        first.id(),
                        first.grid_shape(),
                        first.feature_dim()
                    )));
                }
            }
        }
        Ok(Self {
            tasks,
            split,
            provenance,
            config_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.tasks.first().map(Task::grid_shape)
    }

    pub fn n_cells(&self) -> Option<usize> {
        self.tasks.first().map(Task::n_cells)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.tasks.first().map(Task::feature_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tasks: Vec<ManifestEntry>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Serialises one task to `VASF` bytes. Features are narrowed to `f32`.
pub fn encode_task(task: &Task) -> Result<Vec<u8>> {
    let (rows, cols) = task.grid_shape();
    let rows = u16::try_from(rows)
        .map_err(|_| VasError::InvalidTask(format!("{rows} rows exceed u16")))?;
    let cols = u16::try_from(cols)
        .map_err(|_| VasError::InvalidTask(format!("{cols} cols exceed u16")))?;
    let d = u32::try_from(task.feature_dim())
        .map_err(|_| VasError::InvalidTask("feature dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + task.features().len() * 4 + task.n_cells());
    out.extend_from_slice(TASK_MAGIC);
    out.extend_from_slice(&TASK_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for &x in task.features() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.extend_from_slice(task.labels());
    Ok(out)
}

/// Parses `VASF` bytes; `path` is only used in error messages.
pub fn decode_task(bytes: &[u8], id: &str, path: &Path) -> Result<Task> {
    let fail = |offset: usize, reason: String| VasError::format(path, offset as u64, reason);
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != TASK_MAGIC {
        return Err(fail(
            0,
            format!("bad magic {:?}, expected \"VASF\"", &bytes[..4]),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TASK_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let rows = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let cols = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let d = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    let n = rows * cols;
    if n == 0 || d == 0 {
        return Err(fail(
            6,
            format!("degenerate dimensions rows={rows} cols={cols} d={d}"),
        ));
    }
    let features_end = HEADER_LEN + 4 * n * d;
    if bytes.len() < features_end {
        let have = (bytes.len() - HEADER_LEN) / 4;
        return Err(fail(
            bytes.len(),
            format!("truncated features: {have} of {} f32 values", n * d),
        ));
    }
    let labels_end = features_end + n;
    if bytes.len() < labels_end {
        return Err(fail(
            bytes.len(),
            format!("truncated labels: {} of {n}", bytes.len() - features_end),
        ));
    }
    if bytes.len() > labels_end {
        return Err(fail(
            labels_end,
            format!("{} unexpected trailing bytes", bytes.len() - labels_end),
        ));
    }
    let features: Vec<f64> = bytes[HEADER_LEN..features_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = features.iter().position(|x| !x.is_finite()) {
        return Err(fail(HEADER_LEN + 4 * i, "non-finite feature value".into()));
    }
    let labels = bytes[features_end..labels_end].to_vec();
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(fail(
            features_end + i,
            format!("label {} is not 0 or 1", labels[i]),
        ));
    }
    Task::new(id, (rows, cols), d, features, labels)
}

pub fn write_task(task: &Task, path: &Path) -> Result<()> {
    fs::write(path, encode_task(task)?).map_err(VasError::io(path))
}

pub fn read_task(path: &Path, id: &str) -> Result<Task> {
    let bytes = fs::read(path).map_err(VasError::io(path))?;
    decode_task(&bytes, id, path)
}

/// File name used for a task id when writing a dataset.
fn task_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.vasf")
}

/// Writes every task plus `manifest.json` into directory `dir`.
pub fn write_dataset(ds: &TaskDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(VasError::io(dir))?;
    let mut entries = Vec::with_capacity(ds.tasks.len());
    for task in &ds.tasks {
        let file = task_file_name(task.id());
        write_task(task, &dir.join(&file))?;
        entries.push(ManifestEntry {
            id: task.id().to_string(),
            file,
        });
    }
    let manifest = Manifest {
        tasks: entries,
        split: ds.split,
        provenance: Some(ds.provenance),
        config_hash: Some(ds.config_hash.clone()),
    };
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(VasError::io(&path))?;
    Ok(path)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn load(path: &Path) -> Result<(Manifest, Vec<Task>)> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(VasError::io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        VasError::format(
            &path,
            0,
            format!("invalid manifest JSON at line {}: {e}", e.line()),
        )
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let file = base.join(&entry.file);
        let task = read_task(&file, &entry.id)?;
        if let Some(first) = tasks.first() {
            let first: &Task = first;
            if task.feature_dim() != first.feature_dim() || task.grid_shape() != first.grid_shape()
            {
                return Err(VasError::format(
                    &file,
                    6,
                    format!(
                        "grid {:?} with d={} differs from the dataset's grid {:?} with d={}",
                        task.grid_shape(),
                        task.feature_dim(),
                        first.grid_shape(),
                        first.feature_dim()
                    ),
                ));
            }
        }
        tasks.push(task);
    }
    Ok((manifest, tasks))
}

/// Reads a dataset from a manifest file or a directory containing `manifest.json`.
pub fn read_dataset(path: &Path) -> Result<TaskDataset> {
    let (manifest, tasks) = load(path)?;
    TaskDataset::new(
        tasks,
        manifest.split,
        manifest.provenance.unwrap_or(Provenance::Ingested),
        manifest.config_hash.unwrap_or_default(),
    )
}

/// Reads externally produced per-task features listed in a manifest.
pub fn ingest_features(manifest: &Path) -> Result<TaskDataset> {
    let (manifest, tasks) = load(manifest)?;
    TaskDataset::new(
        tasks,
        manifest.split,
        Provenance::Ingested,
        manifest.config_hash.unwrap_or_default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_task(id: &str, d: usize) -> Task {
        let n = 6;
        let features = (0..n * d).map(|i| (i as f32 * 0.37 - 1.0) as f64).collect();
        Task::new(id, (2, 3), d, features, vec![0, 1, 0, 0, 1, 1]).unwrap()
    }

    #[test]
    fn header_is_bit_exact() {
        let bytes = encode_task(&sample_task("a", 2)).unwrap();
        assert_eq!(
            &bytes[..14],
            &[b'V', b'A', b'S', b'F', 1, 0, 2, 0, 3, 0, 2, 0, 0, 0]
        );
        assert_eq!(bytes.len(), 14 + 6 * 2 * 4 + 6);
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn decode_inverts_encode() {
        let t = sample_task("a", 3);
        let back = decode_task(&encode_task(&t).unwrap(), "a", Path::new("a.vasf")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_task(&sample_task("a", 1)).unwrap();
        bytes[0] = b'X';
        let err = decode_task(&bytes, "a", Path::new("bad.vasf")).unwrap_err();
        assert!(matches!(err, VasError::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_features_report_offset() {
        let t = sample_task("a", 2);
        let mut bytes = encode_task(&t).unwrap();
        // drop the labels and one f32 value
        bytes.truncate(14 + (6 * 2 - 1) * 4);
        let err = decode_task(&bytes, "a", Path::new("cut.vasf")).unwrap_err();
        match err {
            VasError::Format {
                path,
                offset,
                reason,
            } => {
                assert_eq!(path, Path::new("cut.vasf"));
                assert_eq!(offset, bytes.len() as u64);
                assert!(reason.contains("11 of 12"), "{reason}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_label_and_trailing_bytes() {
        let mut bytes = encode_task(&sample_task("a", 1)).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(decode_task(&bytes, "a", Path::new("x")).is_err());
        let mut bytes = encode_task(&sample_task("a", 1)).unwrap();
        bytes.push(0);
        assert!(decode_task(&bytes, "a", Path::new("x")).is_err());
    }

    #[test]
    fn dataset_round_trip_and_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = TaskDataset::new(
            vec![sample_task("t0", 2), sample_task("t1", 2)],
            Split::Test,
            Provenance::Synthetic,
            "abc".into(),
        )
        .unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        let ingested = ingest_features(&manifest).unwrap();
        assert_eq!(ingested.tasks, ds.tasks);
        assert_eq!(ingested.provenance, Provenance::Ingested);
    }

    #[test]
    fn missing_file_and_mixed_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        write_task(&sample_task("a", 2), &dir.path().join("a.vasf")).unwrap();
        write_task(&sample_task("b", 3), &dir.path().join("b.vasf")).unwrap();
        let manifest = dir.path().join("m.json");

        fs::write(&manifest, r#"{"tasks":[{"id":"a","file":"a.vasf"},{"id":"z","file":"missing.vasf"}],"split":"test"}"#).unwrap();
        let err = ingest_features(&manifest).unwrap_err();
        assert!(err.is_data_error());
        assert!(err.to_string().contains("missing.vasf"), "{err}");

        fs::write(
            &manifest,
            r#"{"tasks":[{"id":"a","file":"a.vasf"},{"id":"b","file":"b.vasf"}],"split":"test"}"#,
        )
        .unwrap();
        let err = ingest_features(&manifest).unwrap_err();
        assert!(matches!(err, VasError::Format { .. }), "{err}");
        assert!(err.to_string().contains("b.vasf"), "{err}");
    }
}
