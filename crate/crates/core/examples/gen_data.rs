//! Generate a planted-primary synthetic dataset and show what was planted.
//!
//! cargo run --release --example gen_data -- [OUT_DIR] [T|A|V]

use std::path::PathBuf;

use hctmg::data::{generate_synthetic, read_dataset, write_dataset, PlantedInfo};
use hctmg::desk;
use hctmg::Modality;

fn main() -> hctmg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/synthetic".into()));
    let planted: Modality = args.next().as_deref().unwrap_or("T").parse()?;

    let spec = desk::gating_spec(planted, 0);
    let synth = generate_synthetic(&spec)?;
    write_dataset(&synth.dataset, &out)?;
    synth.planted.write(&out)?;

    let ds = read_dataset(&out)?;
    assert_eq!(ds, synth.dataset);
    let planted = PlantedInfo::read(&out)?.expect("planted metadata");
    let flipped = planted.flipped.iter().filter(|&&f| f).count();
    println!("wrote {} samples to {}", ds.len(), out.display());
    for m in Modality::ALL {
        let e = ds.manifest.entry(m);
        println!("  {:<6} {:>3} steps x {:>2} features, cue amplitude {:.3}", m.name(), e.seq_len, e.dim, spec.amplitude(m));
    }
    println!("  incongruent samples (auxiliary cue flipped): {flipped}");
    Ok(())
}
