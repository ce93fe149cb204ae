//! Train the flat-fusion baseline and HCT-MG on congruent data whose cue
//! lives only in audio and vision, then run the four probe experiments and
//! export heatmaps. Prints one exp3 matrix as a character plot.
//!
//! Takes a couple of minutes in release mode.

use hctmg::desk;
use hctmg::model::Architecture;
use hctmg::probe::{export_heatmaps, run_probe, Experiment, ProbeSpec};

fn main() -> hctmg::Result<()> {
    let flat = desk::probe_trial(Architecture::FlatFusion, 0)?;
    let hct = desk::probe_trial(Architecture::Hct, 0)?;
    let samples: Vec<usize> = flat.test_indices.clone();
    let out = std::path::Path::new("target/probe/heatmaps");

    for (label, trial) in [("flat", &flat), ("hct", &hct)] {
        for exp in [Experiment::Exp1, Experiment::Exp3] {
            let maps = run_probe(&trial.trainer.model, trial.trainer.gate.as_ref(), None, &trial.dataset, &ProbeSpec::new(exp, samples.clone()))?;
            println!("{label:<5} {exp}: cue mass vs uniform {:.2}x", desk::cue_saliency(&maps, &trial.planted));
        }
    }

    let first = vec![samples[0]];
    let mut all = Vec::new();
    for exp in [Experiment::Exp1, Experiment::Exp2, Experiment::Exp3] {
        all.extend(run_probe(&flat.trainer.model, None, None, &flat.dataset, &ProbeSpec::new(exp, first.clone()))?);
    }
    let inc = ProbeSpec::new(Experiment::Incongruity, first.clone());
    all.extend(run_probe(&hct.trainer.model, hct.trainer.gate.as_ref(), Some(&flat.trainer.model), &flat.dataset, &inc)?);
    let files = export_heatmaps(&all, out, true)?;
    println!("exported {} heatmaps to {}", files.len(), out.display());

    let h = all.iter().find(|h| h.experiment == Experiment::Exp3 && h.family == "A->T").unwrap();
    let cue = flat.planted.cue_steps[h.source.index()][h.sample];
    let cols = h.matrix.shape()[1];
    println!("\nsample {} A->T (rows: text steps, cols: audio steps, cue at column {cue})", h.sample);
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for row in h.matrix.data().chunks(cols) {
        let max = row.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let line: String = row.iter().map(|v| shades[((v / max) * 9.0).round() as usize]).collect();
        println!("  |{line}|");
    }
    Ok(())
}
