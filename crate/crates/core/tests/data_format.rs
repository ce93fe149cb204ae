mod common;

use common::tmp;
use hctmg::data::{batch_indices, read_dataset, write_dataset, BatchIter, Dataset, DatasetManifest, ModalityBatch};
use hctmg::model::{HctConfig, Model};
use hctmg::{Modality, Task};

/// Two samples shaped like MOSI exports: text 50×300, audio 375×5, vision 500×20.
fn mosi_like() -> Dataset {
    let shapes = [(50, 300), (375, 5), (500, 20)];
    let mut manifest = DatasetManifest::new("mosi-like", 2, Task::Regression, shapes);
    manifest.modalities[1].lengths = Some(vec![375, 120]);
    let features = shapes.map(|(l, d)| (0..2 * l * d).map(|i| ((i % 97) as f32 - 48.0) / 50.0).collect());
    Dataset::new(manifest, features, vec![1.5, -0.4]).unwrap()
}

#[test]
fn mosi_shaped_dataset_loads_and_batches() {
    let ds = mosi_like();
    let dir = tmp();
    write_dataset(&ds, dir.path()).unwrap();
    let bytes = std::fs::metadata(dir.path().join("vision.f32")).unwrap().len();
    assert_eq!(bytes, 2 * 500 * 20 * 4);
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    let batch = ModalityBatch::from_dataset(&back, &[0, 1]);
    assert_eq!(batch.input(Modality::Audio).shape(), [2, 375, 5]);
    assert_eq!(batch.mask(Modality::Audio).lengths(), [375, 120]);
    assert_eq!(batch.input(Modality::Vision).shape(), [2, 500, 20]);
    assert!(batch.input(Modality::Audio).data()[(375 + 120) * 5..].iter().all(|&v| v == 0.0));

    // the MOSI preset accepts the batch
    let mut config = HctConfig::mosi();
    config.layers = 1;
    let model = Model::new(&config, 0).unwrap();
    let preds = hctmg::train::predict(&model, None, &back, 2).unwrap();
    assert_eq!(preds.len(), 2);
}

#[test]
fn batch_iteration_partitions_and_repeats() {
    let sizes: Vec<usize> = batch_indices(10, 4, 1, true).iter().map(|b| b.len()).collect();
    assert_eq!(sizes, [4, 4, 2]);
    assert_eq!(batch_indices(10, 4, 1, true), batch_indices(10, 4, 1, true));
    let ds = mosi_like();
    let collected: Vec<usize> = BatchIter::new(&ds, 1, 3, true).flat_map(|b| b.indices).collect();
    let mut sorted = collected.clone();
    sorted.sort();
    assert_eq!(sorted, [0, 1]);
}
