//! Modality gating on each planting: which primary does the gate freeze on,
//! and how did the selection probability evolve? Writes one gate-history CSV
//! per planting for plotting.

use std::fs::File;

use hctmg::desk;
use hctmg::Modality;

fn main() -> hctmg::Result<()> {
    let out = std::path::Path::new("target/gating");
    std::fs::create_dir_all(out).map_err(|e| hctmg::Error::Data(e.to_string()))?;
    for planted in Modality::ALL {
        let trial = desk::gating_trial(planted, 0)?;
        let gate = trial.trainer.gate.as_ref().expect("learned gate");
        let path = out.join(format!("gate_history_{}.csv", planted.name()));
        let file = File::create(&path).map_err(|e| hctmg::Error::Data(e.to_string()))?;
        gate.write_history_csv(file).map_err(|e| hctmg::Error::Data(e.to_string()))?;

        // share of batches won per epoch, like a selection-probability curve
        let epochs = gate.history.last().map_or(0, |r| r.epoch + 1);
        let curve: Vec<String> = (0..epochs)
            .map(|e| {
                let rows: Vec<_> = gate.history.iter().filter(|r| r.epoch == e).collect();
                let won = rows.iter().filter(|r| r.primary == planted).count();
                format!("{:.2}", won as f64 / rows.len() as f64)
            })
            .collect();
        println!(
            "planted {planted}: froze on {:?} at epoch {:?}; test MAE / median {:.2}",
            trial.primary.map(|m| m.short()),
            trial.frozen_at,
            trial.mae_ratio()
        );
        println!("  P(planted selected) per epoch: {}", curve.join(" "));
        println!("  history: {}", path.display());
    }
    Ok(())
}
