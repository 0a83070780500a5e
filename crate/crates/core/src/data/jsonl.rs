use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BiasSpec, Dataset, Example, TaskSpec};
use crate::error::{Error, Result};

/// Written next to every split as `<name>.manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub size: usize,
    pub label_counts: Vec<usize>,
    pub tag_counts: BTreeMap<String, usize>,
    pub seed: u64,
    pub task: TaskSpec,
    pub biases: Vec<BiasSpec>,
    /// How the split was produced, e.g. `gen_dataset` or `challenge:PI_ST`.
    pub source: String,
}

impl DatasetManifest {
    pub fn describe(dataset: &Dataset, task: &TaskSpec, biases: &[BiasSpec], seed: u64, source: impl Into<String>) -> Self {
        let tag_counts = dataset
            .tag_counts()
            .into_iter()
            .map(|(t, n)| {
                let name = serde_json::to_value(t)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                (name, n)
            })
            .collect();
        DatasetManifest {
            name: dataset.name.clone(),
            size: dataset.len(),
            label_counts: dataset.label_counts(task.n_classes()),
            tag_counts,
            seed,
            task: task.clone(),
            biases: biases.to_vec(),
            source: source.into(),
        }
    }
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &dataset.examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset; its name is the file stem.
pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line).map_err(|err| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: err.to_string(),
        })?;
        examples.push(e);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset::new(name, examples))
}

/// Writes `<dir>/<name>.jsonl` and `<dir>/<name>.manifest.json`; returns the
/// JSONL path.
pub fn write_split(dataset: &Dataset, dir: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.jsonl", dataset.name));
    write_jsonl(dataset, &path)?;
    let mpath = dir.join(format!("{}.manifest.json", dataset.name));
    std::fs::write(mpath, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(path)
}
