#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};

use hctmg::autodiff::{Graph, Precision, Tensor};
use hctmg::data::{generate_synthetic, Dataset, ModalityBatch, SyntheticSpec};
use hctmg::layers::Dropout;
use hctmg::model::{Architecture, FusionOutput, GateInput, HctConfig, HctModel, InputSpec, Model};
use hctmg::{Modality, Task};

/// Small double-precision config: d = 8, 2 layers, 2 heads.
pub fn small_config(architecture: Architecture, positions: bool) -> HctConfig {
    HctConfig {
        architecture,
        hidden: 8,
        layers: 2,
        heads: 2,
        kernels: [1, 3, 1],
        inputs: [
            InputSpec { dim: 5, max_len: 6 },
            InputSpec { dim: 4, max_len: 9 },
            InputSpec { dim: 3, max_len: 7 },
        ],
        task: Task::Regression,
        dropout: 0.0,
        precision: Precision::Double,
        positions,
    }
}

pub fn dataset_for(config: &HctConfig, n: usize, seed: u64) -> Dataset {
    let mut spec = SyntheticSpec::new(
        n,
        config.inputs.map(|s| s.max_len),
        config.inputs.map(|s| s.dim),
        Modality::Audio,
        seed,
    );
    spec.noise_sigma = 0.4;
    spec.variable_lengths = true;
    generate_synthetic(&spec).unwrap().dataset
}

pub fn batch_of(ds: &Dataset) -> ModalityBatch {
    ModalityBatch::from_dataset(ds, &(0..ds.len()).collect::<Vec<_>>())
}

/// Hierarchical forward pass at stored parameters, no dropout, trace on.
pub fn hct_forward(model: &HctModel, batch: &ModalityBatch, gate: GateInput) -> (Graph, FusionOutput) {
    let mut g = Graph::new(model.config.precision);
    let p = model.store.bind_frozen(&mut g).unwrap();
    let out = model.forward(&mut g, &p, batch, gate, &mut Dropout::disabled(), true).unwrap();
    (g, out)
}

pub fn predictions(model: &Model, batch: &ModalityBatch, gate: GateInput) -> Tensor {
    let mut g = Graph::new(model.config().precision);
    let p = model.store().bind_frozen(&mut g).unwrap();
    let out = model.forward(&mut g, &p, batch, gate, &mut Dropout::disabled(), true).unwrap();
    g.value(out.prediction).clone()
}

pub fn hct(model: &Model) -> &HctModel {
    model.as_hct().expect("hierarchical model")
}

pub fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

pub fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p.file_name().unwrap().into(), bytes)
        })
        .collect()
}
