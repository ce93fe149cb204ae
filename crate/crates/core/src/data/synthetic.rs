use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest};
use crate::domain::{Modality, Task};
use crate::error::{Error, Result};
use crate::rng;

pub const PLANTED_FILE: &str = "synthetic.json";

/// Planted-signal generator settings.
///
/// Every sample draws a latent cue `c ~ U[-3, 3]` and gets label
/// `c + N(0, noise_sigma²)`. The planted modality carries `c` along a fixed
/// random unit direction at one random timestep with amplitude
/// `sqrt(signal_fraction)`; each auxiliary carries it with amplitude
/// `sqrt((1 - signal_fraction) / 2)`, sign-flipped on a
/// `incongruity_rate` share of samples. All other valid entries are
/// `N(0, feature_sigma²)` noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n: usize,
    /// Sequence lengths in text/audio/vision order.
    pub seq_lens: [usize; 3],
    /// Feature dims in text/audio/vision order.
    pub dims: [usize; 3],
    pub planted_primary: Modality,
    #[serde(default = "default_signal_fraction")]
    pub signal_fraction: f64,
    #[serde(default)]
    pub incongruity_rate: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Feature noise; defaults to `noise_sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_sigma: Option<f64>,
    /// Draw per-sample true lengths in `[ceil(L/2), L]` instead of full length.
    #[serde(default)]
    pub variable_lengths: bool,
    pub seed: u64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_signal_fraction() -> f64 {
    0.9
}

impl SyntheticSpec {
    pub fn new(n: usize, seq_lens: [usize; 3], dims: [usize; 3], planted_primary: Modality, seed: u64) -> Self {
        SyntheticSpec {
            name: default_name(),
            n,
            seq_lens,
            dims,
            planted_primary,
            signal_fraction: default_signal_fraction(),
            incongruity_rate: 0.0,
            noise_sigma: 0.0,
            feature_sigma: None,
            variable_lengths: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic spec: n must be >= 1".into()));
        }
        if self.seq_lens.contains(&0) || self.dims.contains(&0) {
            return Err(Error::Config("synthetic spec: lengths and dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            return Err(Error::Config(format!("signal_fraction {} outside [0, 1]", self.signal_fraction)));
        }
        if !(0.0..=1.0).contains(&self.incongruity_rate) {
            return Err(Error::Config(format!("incongruity_rate {} outside [0, 1]", self.incongruity_rate)));
        }
        let feature_sigma = self.feature_sigma.unwrap_or(self.noise_sigma);
        if !(self.noise_sigma >= 0.0) || !(feature_sigma >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn amplitude(&self, m: Modality) -> f64 {
        if m == self.planted_primary {
            self.signal_fraction.sqrt()
        } else {
            ((1.0 - self.signal_fraction) / 2.0).sqrt()
        }
    }
}

/// Ground truth recorded by the generator, for probes and oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInfo {
    pub spec: SyntheticSpec,
    /// Unit cue direction per modality.
    pub directions: [Vec<f64>; 3],
    /// Cue timestep per modality and sample.
    pub cue_steps: [Vec<usize>; 3],
    /// Latent cue per sample.
    pub cues: Vec<f64>,
    /// Samples whose auxiliary cues are sign-flipped.
    pub flipped: Vec<bool>,
}

impl PlantedInfo {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(PLANTED_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Option<PlantedInfo>> {
        let path = dir.join(PLANTED_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Keep the entries of `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> PlantedInfo {
        PlantedInfo {
            spec: self.spec.clone(),
            directions: self.directions.clone(),
            cue_steps: self.cue_steps.clone().map(|v| indices.iter().map(|&i| v[i]).collect()),
            cues: indices.iter().map(|&i| self.cues[i]).collect(),
            flipped: indices.iter().map(|&i| self.flipped[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub planted: PlantedInfo,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::STREAM_SYNTHETIC);
    let feature_noise = Normal::new(0.0, spec.feature_sigma.unwrap_or(spec.noise_sigma)).map_err(|e| Error::Config(e.to_string()))?;
    let label_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.n;

    let directions: [Vec<f64>; 3] = spec.dims.map(|d| loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            break v.into_iter().map(|x| x / norm).collect();
        }
    });

    let cues: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
    let labels: Vec<f32> = cues.iter().map(|&c| (c + label_noise.sample(&mut r)) as f32).collect();

    let n_flip = (spec.incongruity_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut flipped = vec![false; n];
    for &i in &order[..n_flip] {
        flipped[i] = true;
    }

    let lengths: [Vec<usize>; 3] = spec.seq_lens.map(|len| {
        (0..n)
            .map(|_| if spec.variable_lengths { r.gen_range(len.div_ceil(2)..=len) } else { len })
            .collect()
    });
    let cue_steps: [Vec<usize>; 3] = [0, 1, 2].map(|m| lengths[m].iter().map(|&l| r.gen_range(0..l)).collect());

    let mut features: [Vec<f32>; 3] = Default::default();
    for m in Modality::ALL {
        let k = m.index();
        let (len, dim) = (spec.seq_lens[k], spec.dims[k]);
        let amplitude = spec.amplitude(m);
        let mut data = vec![0.0f32; n * len * dim];
        for i in 0..n {
            let sample = &mut data[i * len * dim..(i + 1) * len * dim];
            let mut values: Vec<f64> = (0..lengths[k][i] * dim).map(|_| feature_noise.sample(&mut r)).collect();
            let sign = if m != spec.planted_primary && flipped[i] { -1.0 } else { 1.0 };
            let t = cue_steps[k][i];
            for (j, u) in directions[k].iter().enumerate() {
                values[t * dim + j] += sign * amplitude * cues[i] * u;
            }
            for (dst, v) in sample.iter_mut().zip(values) {
                *dst = v as f32;
            }
        }
        features[k] = data;
    }

    let mut manifest = DatasetManifest::new(
        &spec.name,
        n,
        Task::Regression,
        [0, 1, 2].map(|k| (spec.seq_lens[k], spec.dims[k])),
    );
    if spec.variable_lengths {
        for (entry, l) in manifest.modalities.iter_mut().zip(&lengths) {
            entry.lengths = Some(l.clone());
        }
    }
    let dataset = Dataset::new(manifest, features, labels)?;
    Ok(SyntheticDataset {
        dataset,
        planted: PlantedInfo {
            spec: spec.clone(),
            directions,
            cue_steps,
            cues,
            flipped,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Projection of each sample's cue timestep onto the cue direction.
    fn cue_readout(s: &SyntheticDataset, m: Modality) -> Vec<f64> {
        let k = m.index();
        let dim = s.planted.spec.dims[k];
        (0..s.dataset.len())
            .map(|i| {
                let x = s.dataset.sample_features(m, i);
                let t = s.planted.cue_steps[k][i];
                s.planted.directions[k].iter().enumerate().map(|(j, u)| u * x[t * dim + j] as f64).sum()
            })
            .collect()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn labels(s: &SyntheticDataset) -> Vec<f64> {
        s.dataset.labels.iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn noiseless_planted_cue_is_linearly_recoverable() {
        let mut spec = SyntheticSpec::new(200, [6, 8, 7], [5, 4, 3], Modality::Audio, 11);
        spec.signal_fraction = 1.0;
        let s = generate_synthetic(&spec).unwrap();
        let x = cue_readout(&s, Modality::Audio);
        let y = labels(&s);
        // least squares y ≈ a·x + b
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let a = sxy / sxx;
        let b = my - a * mx;
        let residual = x.iter().zip(&y).map(|(xi, yi)| (yi - a * xi - b).abs()).fold(0.0, f64::max);
        assert!(residual < 1e-6, "{residual}");
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = SyntheticSpec::new(50, [4, 5, 6], [3, 3, 3], Modality::Text, 3);
        spec.noise_sigma = 0.4;
        spec.incongruity_rate = 0.3;
        spec.variable_lengths = true;
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn full_incongruity_anticorrelates_auxiliaries() {
        let mut spec = SyntheticSpec::new(1000, [5, 5, 5], [4, 4, 4], Modality::Vision, 5);
        spec.incongruity_rate = 1.0;
        spec.noise_sigma = 0.3;
        let s = generate_synthetic(&spec).unwrap();
        let y = labels(&s);
        assert!(pearson(&cue_readout(&s, Modality::Vision), &y) >= 0.9);
        for m in [Modality::Text, Modality::Audio] {
            assert!(pearson(&cue_readout(&s, m), &y) <= -0.5);
        }
    }

    #[test]
    fn cue_energy_follows_signal_fraction() {
        let mut spec = SyntheticSpec::new(4000, [3, 3, 3], [6, 6, 6], Modality::Text, 8);
        spec.noise_sigma = 0.5;
        let s = generate_synthetic(&spec).unwrap();
        let cue_var = 3.0; // Var U[-3, 3]
        let noise_var = 0.25;
        for m in Modality::ALL {
            let x = cue_readout(&s, m);
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let share = (var - noise_var) / cue_var;
            let expect = spec.amplitude(m).powi(2);
            assert!((share - expect).abs() < 0.05, "{m}: {share} vs {expect}");
        }
        let y = labels(&s);
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - (cue_var + noise_var)).abs() < 0.2, "{var}");
    }

    #[test]
    fn incongruity_share_is_exact() {
        let mut spec = SyntheticSpec::new(40, [2, 2, 2], [2, 2, 2], Modality::Text, 1);
        spec.incongruity_rate = 0.25;
        let s = generate_synthetic(&spec).unwrap();
        assert_eq!(s.planted.flipped.iter().filter(|&&f| f).count(), 10);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = SyntheticSpec::new(10, [2, 2, 2], [2, 2, 2], Modality::Text, 1);
        spec.signal_fraction = 1.5;
        assert!(generate_synthetic(&spec).is_err());
    }
}
