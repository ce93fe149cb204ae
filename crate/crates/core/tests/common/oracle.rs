//! Brute-force metric reference, written independently of the library.

use hctmg::train::ZeroLabels;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Nearest class in -3..=3 after clipping; exact halves go away from zero.
pub fn class7(v: f64) -> i32 {
    let v = v.clamp(-3.0, 3.0);
    let mut best = 0;
    for k in -3..=3 {
        let (dk, db) = ((v - k as f64).abs(), (v - best as f64).abs());
        if dk < db || (dk == db && (k as f64).abs() > (best as f64).abs()) {
            best = k;
        }
    }
    best
}

pub fn f1_from_rates(tp: f64, fp: f64, fn_: f64) -> f64 {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub struct Reference {
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: Option<f64>,
}

pub fn reference(p: &[f64], l: &[f64], zero: ZeroLabels) -> Reference {
    let n = p.len() as f64;
    let acc7 = p.iter().zip(l).filter(|(a, b)| class7(**a) == class7(**b)).count() as f64 / n;
    let mae = p.iter().zip(l).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;

    let kept: Vec<(bool, bool)> = p
        .iter()
        .zip(l)
        .filter(|(_, b)| zero == ZeroLabels::NonNegative || **b != 0.0)
        .map(|(a, b)| match zero {
            ZeroLabels::Exclude => (*a > 0.0, *b > 0.0),
            ZeroLabels::NonNegative => (*a >= 0.0, *b >= 0.0),
        })
        .collect();
    let count = |f: &dyn Fn(&(bool, bool)) -> bool| kept.iter().filter(|x| f(x)).count() as f64;
    let acc2 = if kept.is_empty() { 0.0 } else { count(&|(a, b)| a == b) / kept.len() as f64 };
    let f1 = f1_from_rates(count(&|(a, b)| *a && *b), count(&|(a, b)| *a && !*b), count(&|(a, b)| !*a && *b));

    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mp, ml) = (mean(p), mean(l));
    let cov = p.iter().zip(l).map(|(a, b)| (a - mp) * (b - ml)).sum::<f64>() / n;
    let sd = |v: &[f64], m: f64| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    let (sp, sl) = (sd(p, mp), sd(l, ml));
    let corr = (sp > 0.0 && sl > 0.0).then(|| cov / (sp * sl));
    Reference { acc7, acc2, f1, mae, corr }
}

/// Continuous values mixed with exact zeros and half-integer ties.
pub fn draw(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match r.gen_range(0..6) {
            0 => 0.0,
            1 => r.gen_range(-8i32..=8) as f64 * 0.5,
            _ => r.gen_range(-3.6..3.6),
        })
        .collect()
}
