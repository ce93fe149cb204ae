//! Save a trained model with its gate state, load it back, and check that
//! predictions survive the f32 round trip.

use hctmg::data::generate_synthetic;
use hctmg::desk::{self, Split};
use hctmg::model::{load_checkpoint, save_checkpoint, Architecture, Model};
use hctmg::train::{predict, Trainer};
use hctmg::Modality;

fn main() -> hctmg::Result<()> {
    let split = Split::of(&generate_synthetic(&desk::gating_spec(Modality::Vision, 2))?.dataset);
    let model = Model::new(&desk::model_config(Architecture::Hct, true), 2)?;
    let mut trainer = Trainer::new(model, None, desk::train_config(2, 8))?;
    trainer.fit(&split.train, None)?;

    let path = std::env::temp_dir().join("hctmg_example_checkpoint.bin");
    save_checkpoint(&path, &trainer.model, 2, trainer.gate.as_ref())?;
    let loaded = load_checkpoint(&path)?;
    let before = trainer.predict(&split.test)?;
    let after = predict(&loaded.model, loaded.gate.as_ref(), &split.test, 32)?;
    let diff = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("{} ({size} bytes), seed {}, gate {:?}", path.display(), loaded.seed, loaded.gate.map(|g| g.mode));
    println!("max prediction change after reload: {diff:.2e}");
    Ok(())
}
