//! Train HCT-MG on a planted-audio set and compare against the
//! constant-median predictor.

use hctmg::data::generate_synthetic;
use hctmg::desk::{self, Split};
use hctmg::model::{Architecture, Model};
use hctmg::train::{median_baseline_mae, EvalReport, Trainer};
use hctmg::Modality;

fn main() -> hctmg::Result<()> {
    let split = Split::of(&generate_synthetic(&desk::gating_spec(Modality::Audio, 1))?.dataset);
    let model = Model::new(&desk::model_config(Architecture::Hct, true), 1)?;
    let mut trainer = Trainer::new(model, None, desk::train_config(1, 20))?;
    println!("epoch  loss    val_mae  w_T    w_A    w_V    primary");
    for _ in 0..trainer.config.epochs {
        trainer.train_epoch(&split.train, Some(&split.val))?;
        let log = trainer.logs.last().unwrap();
        let mae = match &log.val {
            Some(EvalReport::Regression(r)) => r.mae,
            _ => f64::NAN,
        };
        let w = log.gate_weights.unwrap_or_default();
        let state = if log.frozen { " (frozen)" } else { "" };
        println!(
            "{:>5}  {:.4}  {:.4}   {:.3}  {:.3}  {:.3}  {}{state}",
            log.epoch, log.train_loss, mae, w[0], w[1], w[2], log.primary.map_or("-", |m| m.short())
        );
    }
    let labels = |d: &hctmg::data::Dataset| d.labels.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let EvalReport::Regression(test) = trainer.evaluate(&split.test)? else { unreachable!() };
    let median = median_baseline_mae(&labels(&split.train), &labels(&split.test));
    println!("\ntest: mae {:.4} (median predictor {median:.4}), corr {:.3}, acc2 {:.3}, acc7 {:.3}, f1 {:.3}",
        test.mae, test.corr, test.acc2, test.acc7, test.f1);
    Ok(())
}
