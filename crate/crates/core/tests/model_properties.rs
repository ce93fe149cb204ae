mod common;

use common::*;
use hctmg::autodiff::{Graph, Tensor};
use hctmg::gating::RoleAssignment;
use hctmg::layers::{Dropout, TransformerStack};
use hctmg::model::{Architecture, GateInput, HctConfig, InputSpec, Model};
use hctmg::params::ParamStore;
use hctmg::train::{TrainConfig, Trainer};
use hctmg::Modality;
use rand::{Rng, SeedableRng};

fn zero_residual_branches(store: &mut ParamStore, stack: &TransformerStack) {
    for b in &stack.blocks {
        for lin in [&b.mha.wo, &b.ff.contract] {
            store.get_mut(lin.weight).data_mut().fill(0.0);
            store.get_mut(lin.bias.unwrap()).data_mut().fill(0.0);
        }
    }
}

fn row(t: &Tensor, sample: usize, step: usize) -> Vec<f64> {
    let s = t.shape();
    let start = (sample * s[1] + step) * s[2];
    t.data()[start..start + s[2]].to_vec()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * cols + j]).sum()).collect()
}

#[test]
fn identity_stacks_reduce_to_pooled_encodings() {
    let config = small_config(Architecture::Hct, false);
    let Model::Hct(mut m) = Model::new(&config, 3).unwrap() else { unreachable!() };
    let stacks = [&m.aux2_to_aux1, &m.aux1_to_aux2, &m.aux1_to_primary, &m.aux2_to_primary, &m.self_attention].map(|s| s.clone());
    for s in &stacks {
        zero_residual_branches(&mut m.store, s);
    }
    let ds = dataset_for(&config, 5, 1);
    let batch = batch_of(&ds);
    let roles = RoleAssignment::pinned(Modality::Vision);
    let (g, out) = hct_forward(&m, &batch, GateInput { roles, scale: false });

    let mut ge = Graph::new(config.precision);
    let p = m.store.bind_frozen(&mut ge).unwrap();
    let enc = m.encode(&mut ge, &p, &batch).unwrap().map(|v| ge.value(v).clone());
    let (xp, x1, x2) = (&enc[roles.primary.index()], &enc[roles.aux1.index()], &enc[roles.aux2.index()]);
    assert_eq!(g.value(out.a_hat1), x1);
    assert_eq!(g.value(out.a_hat2), x2);
    assert_eq!(g.value(out.p_hat_a1), xp);
    assert_eq!(g.value(out.p_hat_a2), xp);

    let d = config.hidden;
    let z = g.value(out.z);
    let pred = g.value(out.prediction);
    let (w1, w2) = (m.store.get(m.w1), m.store.get(m.w2));
    let (hw, hb) = (m.store.get(m.head.hidden.weight), m.store.get(m.head.hidden.bias.unwrap()));
    let (ow, ob) = (m.store.get(m.head.out.weight), m.store.get(m.head.out.bias.unwrap()));
    for i in 0..ds.len() {
        let last = |mo: Modality| ds.length(mo, i) - 1;
        let mut expect = vec_mat(&row(x1, i, last(roles.aux1)), w1);
        expect.extend(vec_mat(&row(x2, i, last(roles.aux2)), w2));
        let pl = row(xp, i, last(roles.primary));
        expect.extend(pl.iter().chain(&pl));
        let got = &z.data()[i * 4 * d..(i + 1) * 4 * d];
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "z mismatch {a} vs {b}");
        }
        let h: Vec<f64> = vec_mat(&expect, hw).iter().zip(hb.data()).map(|(v, b)| (v + b).max(0.0)).collect();
        let y = vec_mat(&h, ow)[0] + ob.data()[0];
        assert!((pred.data()[i] - y).abs() < 1e-12);
    }
}

#[test]
fn swapping_auxiliaries_swaps_enhanced_streams() {
    let config = small_config(Architecture::Hct, true);
    let Model::Hct(m) = Model::new(&config, 4).unwrap() else { unreachable!() };
    let mut swapped = m.clone();
    let names: Vec<String> = m.store.iter().map(|(n, _)| n.to_string()).collect();
    for (from, to) in [("cmt.aux2_to_aux1.", "cmt.aux1_to_aux2."), ("cmt.aux1_to_primary.", "cmt.aux2_to_primary.")] {
        for n in names.iter().filter(|n| n.starts_with(from)) {
            let other = n.replacen(from, to, 1);
            swapped.store.swap(m.store.find(n).unwrap(), m.store.find(&other).unwrap());
        }
    }
    swapped.store.swap(m.w1, m.w2);

    let batch = batch_of(&dataset_for(&config, 4, 2));
    let roles = RoleAssignment { primary: Modality::Text, aux1: Modality::Audio, aux2: Modality::Vision };
    let flipped = RoleAssignment { primary: Modality::Text, aux1: Modality::Vision, aux2: Modality::Audio };
    let (g, a) = hct_forward(&m, &batch, GateInput { roles, scale: false });
    let (h, b) = hct_forward(&swapped, &batch, GateInput { roles: flipped, scale: false });
    let close = |x: &Tensor, y: &Tensor| assert!(x.max_abs_diff(y) < 1e-12, "diff {}", x.max_abs_diff(y));
    close(g.value(a.a_hat1), h.value(b.a_hat2));
    close(g.value(a.a_hat2), h.value(b.a_hat1));
    close(g.value(a.p_hat_a1), h.value(b.p_hat_a2));
    close(g.value(a.p_hat_a2), h.value(b.p_hat_a1));
    let d = config.hidden;
    let (za, zb) = (g.value(a.z), h.value(b.z));
    for i in 0..batch.len() {
        let ra = &za.data()[i * 4 * d..(i + 1) * 4 * d];
        let rb = &zb.data()[i * 4 * d..(i + 1) * 4 * d];
        for k in 0..d {
            assert!((ra[k] - rb[d + k]).abs() < 1e-12);
            assert!((ra[d + k] - rb[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn mosi_widths_give_160_wide_fusion_vector() {
    let mut config = HctConfig::mosi();
    config.precision = hctmg::autodiff::Precision::Double;
    // short sequences keep the test fast; widths are what matter here
    config.inputs = [InputSpec { dim: 300, max_len: 6 }, InputSpec { dim: 5, max_len: 9 }, InputSpec { dim: 20, max_len: 7 }];
    let model = Model::new(&config, 0).unwrap();
    let batch = batch_of(&dataset_for(&config, 2, 0));
    let (g, out) = hct_forward(hct(&model), &batch, GateInput::pinned(Modality::Text));
    assert_eq!(g.shape(out.z), [2, 160]);
    assert_eq!(g.shape(out.p_hat)[2], 80);
    assert_eq!(g.shape(out.prediction), [2, 1]);

    let flat = Model::new(&HctConfig { architecture: Architecture::FlatFusion, ..config }, 0).unwrap();
    let mut g = Graph::new(flat.config().precision);
    let p = flat.store().bind_frozen(&mut g).unwrap();
    let out = flat.forward(&mut g, &p, &batch, GateInput::pinned(Modality::Text), &mut Dropout::disabled(), false).unwrap();
    assert_eq!(g.shape(out.z), [2, 240]);
}

#[test]
fn same_seed_same_model() {
    for arch in [Architecture::Hct, Architecture::FlatFusion] {
        let config = small_config(arch, true);
        let (a, b) = (Model::new(&config, 9).unwrap(), Model::new(&config, 9).unwrap());
        assert_eq!(a.store().tensors(), b.store().tensors());
        let c = Model::new(&config, 10).unwrap();
        assert_ne!(a.store().tensors(), c.store().tensors());
    }
}

fn fuzz_padding(ds: &hctmg::data::Dataset, seed: u64, scale: f64) -> hctmg::data::ModalityBatch {
    let mut batch = batch_of(ds);
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for m in Modality::ALL {
        let mask = batch.mask(m).clone();
        let dim = batch.input(m).shape()[2];
        let t = &mut batch.inputs[m.index()];
        for (row, &valid) in t.data_mut().chunks_mut(dim).zip(mask.data()) {
            if !valid {
                row.iter_mut().for_each(|v| *v = r.gen_range(-scale..scale));
            }
        }
    }
    batch
}

#[test]
fn padded_region_contents_do_not_reach_predictions() {
    for arch in [Architecture::Hct, Architecture::FlatFusion] {
        let config = small_config(arch, true);
        let model = Model::new(&config, 5).unwrap();
        let ds = dataset_for(&config, 6, 3);
        let gate = GateInput { roles: RoleAssignment::pinned(Modality::Audio), scale: true };
        let clean = predictions(&model, &batch_of(&ds), gate);
        for (seed, scale) in [(1, 1.0), (2, 1e3), (3, 1e-3)] {
            let noisy = predictions(&model, &fuzz_padding(&ds, seed, scale), gate);
            assert!(clean.max_abs_diff(&noisy) < 1e-9, "{arch:?} scale {scale}");
        }
    }
}

fn check_attention_rows(model: &Model, batch: &hctmg::data::ModalityBatch, gate: GateInput) -> usize {
    let mut g = Graph::new(model.config().precision);
    let p = model.store().bind_frozen(&mut g).unwrap();
    let out = model.forward(&mut g, &p, batch, gate, &mut Dropout::disabled(), true).unwrap();
    let mut rows = 0;
    for stack in &out.trace.stacks {
        let keys = stack.key_mask.lengths();
        for layer in 0..stack.layers.len() {
            for (i, &valid) in keys.iter().enumerate() {
                for h in 0..stack.heads() {
                    let m = stack.matrix(i, layer, h);
                    let lk = m.shape()[1];
                    for r in m.data().chunks(lk) {
                        let sum: f64 = r.iter().sum();
                        assert!((sum - 1.0).abs() < 1e-6, "{} row sums to {sum}", stack.role);
                        assert!(r[valid..].iter().all(|&v| v == 0.0), "{} masked key has weight", stack.role);
                        rows += 1;
                    }
                }
            }
        }
    }
    rows
}

#[test]
fn attention_rows_are_distributions_with_exact_masked_zeros() {
    for arch in [Architecture::Hct, Architecture::FlatFusion] {
        let mut config = small_config(arch, true);
        config.precision = hctmg::autodiff::Precision::Single;
        let ds = dataset_for(&config, 24, 6);
        let model = Model::new(&config, 6).unwrap();
        let gate = GateInput { roles: RoleAssignment::pinned(Modality::Vision), scale: true };
        assert!(check_attention_rows(&model, &batch_of(&ds), gate) > 0);

        let mut tc = TrainConfig::mosi();
        tc.epochs = 3;
        tc.batch_size = 8;
        tc.lr = 1e-2;
        let mut trainer = Trainer::new(model, None, tc).unwrap();
        trainer.fit(&ds, None).unwrap();
        let gate = hctmg::train::gate_input(&trainer.model, trainer.gate.as_ref());
        check_attention_rows(&trainer.model, &batch_of(&ds), gate);
    }
}
