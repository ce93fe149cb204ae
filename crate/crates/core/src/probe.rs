//! Crossmodal-attention probes. Each experiment runs a forward pass on
//! chosen samples and returns attention heatmaps cropped to the samples'
//! true lengths (rows are target positions, columns source positions).
//!
//! | experiment | matrices per sample |
//! |---|---|
//! | `exp1` | `V->T` |
//! | `exp2` | `with` (self-attention after crossmodal enhancement) and `without` (the same self-attention on the bare encoded text) |
//! | `exp3` | `A->T` and `V->T` |
//! | `incongruity` | `hct` and `flat`: text self-attention of both models |

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{Dataset, ModalityBatch};
use crate::domain::Modality;
use crate::error::{Error, Result};
use crate::gating::{GateState, RoleAssignment};
use crate::layers::{AttentionTrace, Dropout, StackTrace};
use crate::model::{GateInput, Model};
use crate::train::gate_input;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
    Incongruity,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Exp1 => "exp1",
            Experiment::Exp2 => "exp2",
            Experiment::Exp3 => "exp3",
            Experiment::Incongruity => "incongruity",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(Experiment::Exp1),
            "exp2" => Ok(Experiment::Exp2),
            "exp3" => Ok(Experiment::Exp3),
            "incongruity" => Ok(Experiment::Incongruity),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelect {
    Average,
    Head(usize),
}

/// Per-modality token labels, one list per dataset sample.
pub type AxisLabels = BTreeMap<Modality, Vec<Vec<String>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub experiment: Experiment,
    pub samples: Vec<usize>,
    /// `None` selects the last layer.
    pub layer: Option<usize>,
    pub head: HeadSelect,
    pub labels: Option<AxisLabels>,
}

impl ProbeSpec {
    pub fn new(experiment: Experiment, samples: Vec<usize>) -> Self {
        ProbeSpec {
            experiment,
            samples,
            layer: None,
            head: HeadSelect::Average,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub experiment: Experiment,
    pub sample: usize,
    /// `V->T`, `with`, `hct`, ...
    pub family: String,
    pub target: Modality,
    pub source: Modality,
    pub layer: usize,
    pub head: HeadSelect,
    #[serde(skip)]
    pub matrix: Tensor,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_labels: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub col_labels: Option<Vec<String>>,
}

impl Heatmap {
    /// Mean attention that rows put on source column `col`.
    pub fn column_mass(&self, col: usize) -> f64 {
        let (rows, cols) = (self.matrix.shape()[0], self.matrix.shape()[1]);
        (0..rows).map(|r| self.matrix.data()[r * cols + col]).sum::<f64>() / rows as f64
    }

    /// File stem used by [`export_heatmaps`].
    pub fn stem(&self) -> String {
        let head = match self.head {
            HeadSelect::Average => "mean".to_string(),
            HeadSelect::Head(h) => format!("h{h}"),
        };
        let family = self.family.replace("->", "_to_");
        format!("{}_s{}_{}_l{}_{}", self.experiment, self.sample, family, self.layer, head)
    }
}

fn select(trace: &StackTrace, sample: usize, layer: Option<usize>, head: HeadSelect) -> Result<(usize, Tensor)> {
    let layer = layer.unwrap_or(trace.layers.len() - 1);
    if layer >= trace.layers.len() {
        return Err(Error::Config(format!("layer {layer} out of range for {} layers", trace.layers.len())));
    }
    let full = match head {
        HeadSelect::Average => trace.head_average(sample, layer),
        HeadSelect::Head(h) if h < trace.heads() => trace.matrix(sample, layer, h),
        HeadSelect::Head(h) => return Err(Error::Config(format!("head {h} out of range for {} heads", trace.heads()))),
    };
    let rows = trace.query_mask.lengths()[sample];
    let cols = trace.key_mask.lengths()[sample];
    let lk = full.shape()[1];
    let data = (0..rows).flat_map(|r| full.data()[r * lk..r * lk + cols].to_vec()).collect();
    Ok((layer, Tensor::new(&[rows, cols], data)?))
}

fn forward_trace(model: &Model, batch: &ModalityBatch, input: GateInput) -> Result<AttentionTrace> {
    let mut g = Graph::new(model.config().precision);
    let p = model.store().bind_frozen(&mut g)?;
    Ok(model.forward(&mut g, &p, batch, input, &mut Dropout::disabled(), true)?.trace)
}

/// Gate input with text as primary, keeping the model's own scaling.
fn text_primary(model: &Model, gate: Option<&GateState>) -> GateInput {
    GateInput {
        roles: RoleAssignment::pinned(Modality::Text),
        scale: gate_input(model, gate).scale,
    }
}

/// Self-attention of `model` applied to encoded text alone, for the
/// `without` arm of exp2. The hierarchical model's width-2d stack reads
/// `[T ; T]`; the flat model's text stack does the same.
fn bare_text_self_attention(model: &Model, batch: &ModalityBatch, gate: Option<&GateState>) -> Result<AttentionTrace> {
    let mut g = Graph::new(model.config().precision);
    let p = model.store().bind_frozen(&mut g)?;
    let t = Modality::Text;
    let mask = batch.mask(t);
    let (encoded, stack) = match model {
        Model::Hct(m) => {
            let mut enc = m.encode(&mut g, &p, batch)?;
            if text_primary(model, gate).scale {
                let w = crate::gating::gate_weights(&mut g, p[m.gate_logits])?;
                enc = crate::gating::apply_gate_scaling(&mut g, enc, w)?;
            }
            (enc[t.index()], &m.self_attention)
        }
        Model::Flat(m) => {
            let e = &m.encoders[t.index()];
            (e.forward(&mut g, &p, batch.input(t), mask)?, &m.self_attention[t.index()])
        }
    };
    let joined = g.concat(&[encoded, encoded], 2)?;
    let (_, att) = stack.forward_self(&mut g, &p, joined, mask, &mut Dropout::disabled())?;
    let mut trace = AttentionTrace::default();
    trace.record(&g, "self:T", &att, mask, mask);
    Ok(trace)
}

/// Run `spec` on `dataset`. `baseline` is the flat-fusion model, required
/// for the incongruity comparison only.
pub fn run_probe(
    model: &Model,
    gate: Option<&GateState>,
    baseline: Option<&Model>,
    dataset: &Dataset,
    spec: &ProbeSpec,
) -> Result<Vec<Heatmap>> {
    if spec.samples.is_empty() {
        return Err(Error::Config("probe needs at least one sample".into()));
    }
    if let Some(&bad) = spec.samples.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Config(format!("sample {bad} out of range for {} samples", dataset.len())));
    }
    let batch = ModalityBatch::from_dataset(dataset, &spec.samples);
    let (t, a, v) = (Modality::Text, Modality::Audio, Modality::Vision);

    // (family, source-of-trace, stack role, target, source)
    let mut families: Vec<(String, AttentionTrace, &str, Modality, Modality)> = Vec::new();
    match spec.experiment {
        Experiment::Exp1 | Experiment::Exp3 => {
            let trace = forward_trace(model, &batch, text_primary(model, gate))?;
            if spec.experiment == Experiment::Exp3 {
                families.push(("A->T".into(), trace.clone(), "A->T", t, a));
            }
            families.push(("V->T".into(), trace, "V->T", t, v));
        }
        Experiment::Exp2 => {
            let with = forward_trace(model, &batch, text_primary(model, gate))?;
            let without = bare_text_self_attention(model, &batch, gate)?;
            families.push(("with".into(), with, "self:T", t, t));
            families.push(("without".into(), without, "self:T", t, t));
        }
        Experiment::Incongruity => {
            let (hct, flat) = match (model, baseline) {
                (Model::Hct(_), Some(b @ Model::Flat(_))) => (model, b),
                _ => {
                    return Err(Error::Config(
                        "incongruity needs a hierarchical model and a flat-fusion baseline".into(),
                    ))
                }
            };
            families.push(("hct".into(), forward_trace(hct, &batch, text_primary(hct, gate))?, "self:T", t, t));
            families.push(("flat".into(), forward_trace(flat, &batch, GateInput::pinned(t))?, "self:T", t, t));
        }
    }

    let mut out = Vec::new();
    for (row, &sample) in spec.samples.iter().enumerate() {
        for (family, trace, role, target, source) in &families {
            let stack = trace
                .get(role)
                .ok_or_else(|| Error::Config(format!("model has no {role} attention stack")))?;
            let (layer, matrix) = select(stack, row, spec.layer, spec.head)?;
            let labels_for = |m: Modality, n: usize| {
                spec.labels
                    .as_ref()
                    .and_then(|l| l.get(&m))
                    .and_then(|per| per.get(sample))
                    .map(|toks| toks.iter().take(n).cloned().collect::<Vec<_>>())
            };
            let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
            out.push(Heatmap {
                experiment: spec.experiment,
                sample,
                family: family.clone(),
                target: *target,
                source: *source,
                layer,
                head: spec.head,
                row_labels: labels_for(*target, rows),
                col_labels: labels_for(*source, cols),
                matrix,
            });
        }
    }
    Ok(out)
}

/// Write `<stem>.csv` (9 significant digits) and `<stem>.json` per heatmap,
/// plus `<stem>.pgm` when `pgm` is set. Returns the CSV paths.
pub fn export_heatmaps(heatmaps: &[Heatmap], dir: &Path, pgm: bool) -> Result<Vec<PathBuf>> {
    if heatmaps.is_empty() {
        return Err(Error::Config("nothing to export".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(heatmaps.len());
    for h in heatmaps {
        let stem = h.stem();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, heatmap_csv(&h.matrix)).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let mut meta = serde_json::to_value(h)?;
        meta["rows"] = h.matrix.shape()[0].into();
        meta["cols"] = h.matrix.shape()[1].into();
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        if pgm {
            let path = dir.join(format!("{stem}.pgm"));
            std::fs::write(&path, heatmap_pgm(&h.matrix)).map_err(|e| Error::io(&path, e))?;
        }
        written.push(csv);
    }
    Ok(written)
}

pub fn heatmap_csv(m: &Tensor) -> String {
    let cols = m.shape()[1];
    let mut s = String::new();
    for row in m.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Binary greyscale PGM, each row scaled so its maximum is white.
pub fn heatmap_pgm(m: &Tensor) -> Vec<u8> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for row in m.data().chunks(cols) {
        let max = row.iter().copied().fold(0.0, f64::max);
        out.extend(row.iter().map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{Architecture, HctConfig, InputSpec};
    use crate::domain::Task;

    fn setup() -> (Model, Model, Dataset) {
        let mut c = HctConfig {
            architecture: Architecture::Hct,
            hidden: 4,
            layers: 2,
            heads: 2,
            kernels: [1, 1, 1],
            inputs: [
                InputSpec { dim: 3, max_len: 4 },
                InputSpec { dim: 2, max_len: 6 },
                InputSpec { dim: 3, max_len: 5 },
            ],
            task: Task::Regression,
            dropout: 0.0,
            precision: Precision::Double,
            positions: true,
        };
        let hct = Model::new(&c, 1).unwrap();
        c.architecture = Architecture::FlatFusion;
        let flat = Model::new(&c, 1).unwrap();
        let mut spec = SyntheticSpec::new(6, [4, 6, 5], [3, 2, 3], Modality::Text, 2);
        spec.variable_lengths = true;
        (hct, flat, generate_synthetic(&spec).unwrap().dataset)
    }

    fn rows_are_distributions(m: &Tensor) {
        let cols = m.shape()[1];
        for row in m.data().chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn experiment_families() {
        let (hct, flat, ds) = setup();
        let families = |exp, baseline| {
            let maps = run_probe(&hct, None, baseline, &ds, &ProbeSpec::new(exp, vec![0, 3])).unwrap();
            for m in &maps {
                rows_are_distributions(&m.matrix);
            }
            maps.into_iter().map(|m| (m.sample, m.family)).collect::<Vec<_>>()
        };
        let s = |v: &[(usize, &str)]| v.iter().map(|&(i, f)| (i, f.to_string())).collect::<Vec<_>>();
        assert_eq!(families(Experiment::Exp1, None), s(&[(0, "V->T"), (3, "V->T")]));
        assert_eq!(
            families(Experiment::Exp2, None),
            s(&[(0, "with"), (0, "without"), (3, "with"), (3, "without")])
        );
        assert_eq!(
            families(Experiment::Exp3, None),
            s(&[(0, "A->T"), (0, "V->T"), (3, "A->T"), (3, "V->T")])
        );
        assert_eq!(
            families(Experiment::Incongruity, Some(&flat)),
            s(&[(0, "hct"), (0, "flat"), (3, "hct"), (3, "flat")])
        );
    }

    #[test]
    fn matrices_are_cropped_to_true_lengths() {
        let (hct, _, ds) = setup();
        let maps = run_probe(&hct, None, None, &ds, &ProbeSpec::new(Experiment::Exp1, vec![1])).unwrap();
        let m = &maps[0].matrix;
        assert_eq!(m.shape(), [ds.length(Modality::Text, 1), ds.length(Modality::Vision, 1)]);
    }

    #[test]
    fn incongruity_without_baseline_is_config_error() {
        let (hct, _, ds) = setup();
        let r = run_probe(&hct, None, None, &ds, &ProbeSpec::new(Experiment::Incongruity, vec![0]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn flat_model_supports_exp1_to_exp3() {
        let (_, flat, ds) = setup();
        for exp in [Experiment::Exp1, Experiment::Exp2, Experiment::Exp3] {
            run_probe(&flat, None, None, &ds, &ProbeSpec::new(exp, vec![2])).unwrap();
        }
    }

    #[test]
    fn head_average_is_mean_of_heads() {
        let (hct, _, ds) = setup();
        let mut spec = ProbeSpec::new(Experiment::Exp1, vec![0]);
        let avg = run_probe(&hct, None, None, &ds, &spec).unwrap().remove(0).matrix;
        let heads: Vec<Tensor> = (0..2)
            .map(|h| {
                spec.head = HeadSelect::Head(h);
                run_probe(&hct, None, None, &ds, &spec).unwrap().remove(0).matrix
            })
            .collect();
        for (i, v) in avg.data().iter().enumerate() {
            assert!((v - (heads[0].data()[i] + heads[1].data()[i]) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_layout_and_pgm_header() {
        let m = Tensor::from_fn(&[3, 4], |i| (i % 4) as f64 / 6.0);
        let csv = heatmap_csv(&m);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().all(|l| l.split(',').count() == 4));
        let pgm = heatmap_pgm(&m);
        assert!(pgm.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(pgm.len(), b"P5\n4 3\n255\n".len() + 12);
    }
}
