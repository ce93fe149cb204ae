use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Modality, Task};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "hctmg-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub modality: Modality,
    pub seq_len: usize,
    pub dim: usize,
    pub file: String,
    /// True per-sample lengths; absent means every sample is full length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsEntry {
    pub file: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub n_samples: usize,
    pub task: Task,
    pub endianness: String,
    /// Exactly three entries, in text/audio/vision order.
    pub modalities: Vec<ModalityEntry>,
    pub labels: LabelsEntry,
}

impl DatasetManifest {
    pub fn new(name: &str, n_samples: usize, task: Task, shapes: [(usize, usize); 3]) -> Self {
        DatasetManifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            name: name.into(),
            n_samples,
            task,
            endianness: "little".into(),
            modalities: Modality::ALL
                .iter()
                .zip(shapes)
                .map(|(&m, (seq_len, dim))| ModalityEntry {
                    modality: m,
                    seq_len,
                    dim,
                    file: format!("{}.f32", m.name()),
                    lengths: None,
                })
                .collect(),
            labels: LabelsEntry {
                file: "labels.f32".into(),
                dim: task.outputs(),
            },
        }
    }

    pub fn entry(&self, m: Modality) -> &ModalityEntry {
        &self.modalities[m.index()]
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail,
        };
        if self.format != FORMAT_NAME {
            return Err(bad(format!("format tag {:?}, expected {FORMAT_NAME:?}", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        if self.endianness != "little" {
            return Err(bad(format!("unsupported endianness {:?}", self.endianness)));
        }
        if self.modalities.len() != 3 {
            return Err(bad(format!("expected 3 modalities, found {}", self.modalities.len())));
        }
        for (entry, m) in self.modalities.iter().zip(Modality::ALL) {
            if entry.modality != m {
                return Err(bad(format!("modality entries must be ordered text, audio, vision; found {:?}", entry.modality)));
            }
            if entry.seq_len == 0 || entry.dim == 0 {
                return Err(bad(format!("{m}: sequence length and dim must be positive")));
            }
            if let Some(lengths) = &entry.lengths {
                if lengths.len() != self.n_samples {
                    return Err(bad(format!("{m}: {} lengths for {} samples", lengths.len(), self.n_samples)));
                }
                if let Some(i) = lengths.iter().position(|&l| l == 0 || l > entry.seq_len) {
                    return Err(bad(format!("{m}: sample {i} has length {} outside 1..={}", lengths[i], entry.seq_len)));
                }
            }
        }
        if self.labels.dim != self.task.outputs() {
            return Err(bad(format!("label dim {} does not match task {:?}", self.labels.dim, self.task)));
        }
        Ok(())
    }
}

/// In-memory dataset. Features are `[sample][timestep][feature]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: [Vec<f32>; 3],
    pub labels: Vec<f32>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, features: [Vec<f32>; 3], labels: Vec<f32>) -> Result<Self> {
        manifest.validate(Path::new("<memory>"))?;
        let n = manifest.n_samples;
        for (entry, f) in manifest.modalities.iter().zip(&features) {
            if f.len() != n * entry.seq_len * entry.dim {
                return Err(Error::Data(format!(
                    "{}: {} values, expected {}",
                    entry.modality,
                    f.len(),
                    n * entry.seq_len * entry.dim
                )));
            }
        }
        if labels.len() != n * manifest.labels.dim {
            return Err(Error::Data(format!("{} labels, expected {}", labels.len(), n * manifest.labels.dim)));
        }
        Ok(Dataset { manifest, features, labels })
    }

    pub fn len(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.n_samples == 0
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }

    /// True length of sample `i` in modality `m`.
    pub fn length(&self, m: Modality, i: usize) -> usize {
        let e = self.manifest.entry(m);
        e.lengths.as_ref().map_or(e.seq_len, |l| l[i])
    }

    pub fn sample_features(&self, m: Modality, i: usize) -> &[f32] {
        let e = self.manifest.entry(m);
        let stride = e.seq_len * e.dim;
        &self.features[m.index()][i * stride..(i + 1) * stride]
    }

    pub fn sample_labels(&self, i: usize) -> &[f32] {
        let k = self.manifest.labels.dim;
        &self.labels[i * k..(i + 1) * k]
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.name = name.into();
        manifest.n_samples = indices.len();
        for entry in &mut manifest.modalities {
            if let Some(l) = &entry.lengths {
                entry.lengths = Some(indices.iter().map(|&i| l[i]).collect());
            }
        }
        let features = Modality::ALL.map(|m| indices.iter().flat_map(|&i| self.sample_features(m, i).iter().copied()).collect());
        let labels = indices.iter().flat_map(|&i| self.sample_labels(i).iter().copied()).collect();
        Dataset { manifest, features, labels }
    }

    /// Contiguous split into train/validation/test by fractions of the
    /// current order.
    pub fn split(&self, train: f64, val: f64) -> (Dataset, Dataset, Dataset) {
        let n = self.len();
        let n_train = ((n as f64) * train).round() as usize;
        let n_val = (((n as f64) * val).round() as usize).min(n - n_train);
        let idx: Vec<usize> = (0..n).collect();
        (
            self.subset(&idx[..n_train], &format!("{}-train", self.manifest.name)),
            self.subset(&idx[n_train..n_train + n_val], &format!("{}-val", self.manifest.name)),
            self.subset(&idx[n_train + n_val..], &format!("{}-test", self.manifest.name)),
        )
    }
}

fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    let want = expected as u64 * 4;
    if bytes.len() as u64 != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(want as usize) as u64,
            detail: format!("expected {want} bytes, found {}", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write `manifest.json`, one `.f32` blob per modality and `labels.f32`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&dataset.manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    for (entry, values) in dataset.manifest.modalities.iter().zip(&dataset.features) {
        let path = dir.join(&entry.file);
        fs::write(&path, encode_f32(values)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(&dataset.manifest.labels.file);
    fs::write(&path, encode_f32(&dataset.labels)).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        offset: 0,
        detail: e.to_string(),
    })?;
    manifest.validate(&manifest_path)?;
    let read_blob = |file: &str, count: usize| -> Result<Vec<f32>> {
        let path: PathBuf = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_f32(&path, &bytes, count)
    };
    let n = manifest.n_samples;
    let mut features: [Vec<f32>; 3] = Default::default();
    for (slot, entry) in features.iter_mut().zip(&manifest.modalities) {
        *slot = read_blob(&entry.file, n * entry.seq_len * entry.dim)?;
    }
    let labels = read_blob(&manifest.labels.file, n * manifest.labels.dim)?;
    Ok(Dataset { manifest, features, labels })
}
