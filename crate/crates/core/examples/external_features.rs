//! Package externally extracted features (for example arrays exported from
//! a feature-extraction toolkit) into the dataset format, with per-sample
//! true lengths, then batch them.

use hctmg::data::{read_dataset, write_dataset, Dataset, DatasetManifest, ModalityBatch};
use hctmg::{Modality, Task};

fn main() -> hctmg::Result<()> {
    // three utterances: text 6×4, audio 10×3, vision 8×2, zero-padded
    let shapes = [(6, 4), (10, 3), (8, 2)];
    let n = 3;
    let mut manifest = DatasetManifest::new("my-export", n, Task::Regression, shapes);
    manifest.modalities[0].lengths = Some(vec![6, 4, 5]);
    manifest.modalities[1].lengths = Some(vec![10, 7, 9]);
    let features = shapes.map(|(len, dim)| (0..n * len * dim).map(|i| (i as f32 * 0.37).sin()).collect::<Vec<f32>>());
    let labels = vec![2.4, -1.2, 0.0];
    let ds = Dataset::new(manifest, features, labels)?;

    let dir = std::env::temp_dir().join("hctmg_external_example");
    write_dataset(&ds, &dir)?;
    let back = read_dataset(&dir)?;
    assert_eq!(back, ds);
    let batch = ModalityBatch::from_dataset(&back, &[0, 1, 2]);
    for m in Modality::ALL {
        println!("{:<6} batch {:?}, true lengths {:?}", m.name(), batch.input(m).shape(), batch.mask(m).lengths());
    }
    println!("written to {}", dir.display());
    Ok(())
}
