use super::{check_batch, init_rng, pool_last, Encoder, HctConfig, Head, ParamReport};
use crate::autodiff::{Graph, Var};
use crate::data::ModalityBatch;
use crate::domain::Modality;
use crate::error::Result;
use crate::layers::{AttentionTrace, Dropout, TransformerStack};
use crate::params::{Bound, ParamStore};

/// Flat-fusion reference: every modality is attended by each of the other
/// two, the two enhanced copies are joined on the feature axis and passed
/// through a per-target self-attention stack, and the three pooled results
/// are concatenated. Same front end as [`super::HctModel`], no gating.
#[derive(Debug, Clone)]
pub struct FlatFusion {
    pub config: HctConfig,
    pub store: ParamStore,
    pub encoders: [Encoder; 3],
    /// `crossmodal[target][j]` attends `target` with its `j`-th other modality.
    pub crossmodal: [[TransformerStack; 2]; 3],
    /// Per-target self-attention at width 2d.
    pub self_attention: [TransformerStack; 3],
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct FlatOutput {
    /// `[b × 6d]`
    pub z: Var,
    pub prediction: Var,
    pub trace: AttentionTrace,
}

/// The two modalities other than `target`, in declared order.
fn sources(target: Modality) -> [Modality; 2] {
    let mut it = Modality::ALL.into_iter().filter(|&m| m != target);
    [it.next().unwrap(), it.next().unwrap()]
}

impl FlatFusion {
    pub fn new(config: &HctConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, heads, layers) = (config.hidden, config.heads, config.layers);
        let encoders = [
            Encoder::new(s, config, Modality::Text, r)?,
            Encoder::new(s, config, Modality::Audio, r)?,
            Encoder::new(s, config, Modality::Vision, r)?,
        ];
        let stack = |s: &mut ParamStore, name: String, width: usize, r: &mut _| -> Result<TransformerStack> {
            let mut t = TransformerStack::new(s, &name, width, heads, layers, r)?;
            t.use_positions = config.positions;
            Ok(t)
        };
        let mut crossmodal = Vec::with_capacity(3);
        for target in Modality::ALL {
            let [a, b] = sources(target);
            crossmodal.push([
                stack(s, format!("cmt.{}_to_{}", a.name(), target.name()), d, r)?,
                stack(s, format!("cmt.{}_to_{}", b.name(), target.name()), d, r)?,
            ]);
        }
        let mut self_attention = Vec::with_capacity(3);
        for target in Modality::ALL {
            self_attention.push(stack(s, format!("self_attention.{}", target.name()), 2 * d, r)?);
        }
        let head = Head::new(s, 6 * d, config.task.outputs(), r);
        let crossmodal: [[TransformerStack; 2]; 3] = crossmodal.try_into().expect("three targets");
        let self_attention: [TransformerStack; 3] = self_attention.try_into().expect("three targets");
        Ok(FlatFusion {
            config: config.clone(),
            store,
            encoders,
            crossmodal,
            self_attention,
            head,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &ModalityBatch,
        dropout: &mut Dropout,
        record: bool,
    ) -> Result<FlatOutput> {
        check_batch(&self.config, batch)?;
        let mut encoded = Vec::with_capacity(3);
        for e in &self.encoders {
            encoded.push(e.forward(g, p, batch.input(e.modality), batch.mask(e.modality))?);
        }
        let mut trace = AttentionTrace::default();
        let mut pooled = Vec::with_capacity(3);
        for target in Modality::ALL {
            let t = target.index();
            let tmask = batch.mask(target);
            let mut enhanced = Vec::with_capacity(2);
            for (stack, src) in self.crossmodal[t].iter().zip(sources(target)) {
                let smask = batch.mask(src);
                let (y, att) = stack.forward_cross(g, p, encoded[t], tmask, encoded[src.index()], smask, dropout)?;
                if record {
                    trace.record(g, format!("{}->{}", src.short(), target.short()), &att, tmask, smask);
                }
                enhanced.push(y);
            }
            let joined = g.concat(&enhanced, 2)?;
            let (h, att) = self.self_attention[t].forward_self(g, p, joined, tmask, dropout)?;
            if record {
                trace.record(g, format!("self:{}", target.short()), &att, tmask, tmask);
            }
            pooled.push(pool_last(g, h, tmask)?);
        }
        let z = g.concat(&pooled, 1)?;
        let prediction = self.head.forward(g, p, z)?;
        Ok(FlatOutput { z, prediction, trace })
    }

    pub fn report(&self) -> ParamReport {
        let mut prefixes: Vec<String> = Modality::ALL.iter().map(|m| format!("encoder.{}", m.name())).collect();
        for target in Modality::ALL {
            for src in sources(target) {
                prefixes.push(format!("cmt.{}_to_{}", src.name(), target.name()));
            }
        }
        prefixes.extend(Modality::ALL.iter().map(|m| format!("self_attention.{}", m.name())));
        prefixes.push("head".into());
        let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        ParamReport::from_prefixes(&self.store, &refs)
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{tiny_batch, tiny_config};
    use super::*;
    use crate::autodiff::Precision;

    #[test]
    fn six_crossmodal_stacks_and_scalar_output() {
        let c = tiny_config();
        let model = FlatFusion::new(&c, 1).unwrap();
        let batch = tiny_batch(&c, 3, 2);
        let mut g = Graph::new(Precision::Double);
        let p = model.store.bind(&mut g).unwrap();
        let o = model.forward(&mut g, &p, &batch, &mut Dropout::disabled(), true).unwrap();
        assert_eq!(g.shape(o.prediction), [3, 1]);
        assert_eq!(g.shape(o.z), [3, 6 * c.hidden]);
        let cross = o.trace.stacks.iter().filter(|s| !s.role.starts_with("self:")).count();
        assert_eq!(cross, 6);
    }
}
