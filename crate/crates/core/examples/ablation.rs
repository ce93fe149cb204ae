//! Pin each modality as primary on a planted-text set (gating disabled) and
//! compare test MAE.

use hctmg::desk;
use hctmg::Modality;

fn main() -> hctmg::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    println!("seed  pin=T   pin=A   pin=V");
    for seed in 0..seeds {
        let mae = Modality::ALL.map(|p| desk::pinned_trial(p, seed).map(|t| t.test_mae));
        let [t, a, v] = [mae[0].as_ref(), mae[1].as_ref(), mae[2].as_ref()].map(|r| *r.unwrap());
        let mark = if t < a && t < v { "T best" } else { "" };
        println!("{seed:>4}  {t:.4}  {a:.4}  {v:.4}  {mark}");
    }
    Ok(())
}
