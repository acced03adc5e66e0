#![allow(dead_code)]

use std::collections::BTreeMap;

use dpan::aavg::{self, ActivationUnit};
use dpan::bcr;
use dpan::features::{Batch, FeatureSpace, Sample, VocabManifest};
use dpan::model::{Ablation, Arch, Model, ModelConfig};
use dpan::numerics::gradcheck::{check_inputs, check_params, GradCheckReport};
use dpan::numerics::{ParamStore, Tape, Tensor, Var};
use dpan::sduf::{self, FusionLayout, ParamGenerator};
use dpan::traineval::auc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-limit..limit)).collect()).unwrap()
}

/// `[B, T]` mask with `lens[b]` leading ones per row.
pub fn mask_tensor(lens: &[usize], t: usize) -> Tensor {
    let data = lens
        .iter()
        .flat_map(|&l| (0..t).map(move |i| if i < l { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(vec![lens.len(), t], data).unwrap()
}

/// Attributes item, brand, category (first `k`), 5 users, 2 channels, 3 time buckets.
pub fn manifest(k: usize) -> VocabManifest {
    let all = [("item", 9), ("brand", 6), ("category", 5)];
    VocabManifest {
        attributes: all[..k].iter().map(|&(n, v)| (n.to_string(), v)).collect(),
        users: 5,
        channels: 3,
        time_buckets: 4,
    }
}

pub fn random_item(rng: &mut ChaCha8Rng, m: &VocabManifest) -> Vec<usize> {
    m.attributes.iter().map(|(_, v)| rng.gen_range(1..*v)).collect()
}

pub fn random_sample(rng: &mut ChaCha8Rng, m: &VocabManifest, max_len: usize) -> Sample {
    let len = rng.gen_range(0..=max_len);
    Sample {
        event: rng.gen_range(0..4),
        day: 0,
        ts: 100,
        user: rng.gen_range(1..m.users),
        channel: rng.gen_range(1..m.channels),
        time_bucket: rng.gen_range(1..m.time_buckets),
        trigger: random_item(rng, m),
        target: random_item(rng, m),
        seq: (0..len).map(|_| random_item(rng, m)).collect(),
        seq_ts: (0..len as u64).collect(),
        label: rng.gen_range(0..2),
    }
}

/// A batch with both labels and at least one non-empty sequence.
pub fn random_samples(rng: &mut ChaCha8Rng, m: &VocabManifest, n: usize, max_len: usize) -> Vec<Sample> {
    let mut s: Vec<Sample> = (0..n).map(|_| random_sample(rng, m, max_len)).collect();
    s[0].label = 1;
    s[1].label = 0;
    if s[0].seq.is_empty() {
        s[0].seq = vec![random_item(rng, m)];
        s[0].seq_ts = vec![1];
    }
    s
}

pub fn batch(m: &VocabManifest, samples: &[Sample], t: usize) -> Batch {
    let space = FeatureSpace::new(m.clone());
    Batch::collate(&samples.iter().collect::<Vec<_>>(), &space, t).unwrap()
}

/// T=3, d_a=4, deep widths [8,4].
pub fn tiny(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        seq_len: 3,
        attr_dim: 4,
        user_dim: 3,
        context_dim: 2,
        unit_hidden: 6,
        aggregator_hidden: 6,
        aggregated_dim: 4,
        union_widths: vec![8, 4],
        generator_hidden: 6,
        scoring_widths: vec![8, 4],
        seed: 5,
        ..ModelConfig::default()
    }
}

/// Moves every weight and bias to uniform(±0.5) and scales embeddings by 10
/// (padding rows stay zero), so no PReLU/ReLU input sits within a
/// finite-difference step of its kink. PReLU slopes are kept.
pub fn perturb_store(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with(".prelu") {
            continue;
        }
        let embedding = name.starts_with("embed.");
        for v in store.value_mut(id).data_mut() {
            *v = if embedding { *v * 10.0 } else { r.gen_range(-0.5..0.5) };
        }
    }
}

/// `Σ R ⊙ v` for a fixed random `R`, so every output coordinate matters.
pub fn weighted_sum(tape: &mut Tape<'_>, v: Var, seed: u64) -> dpan::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let r = tape.constant(random_tensor(&mut rng(seed), &shape, 1.0));
    let p = tape.mul(v, r)?;
    tape.sum_all(p)
}

type Named = Vec<(String, GradCheckReport)>;

pub fn grad_primitive() -> Named {
    let mut r = rng(1);
    let inputs = [random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[4, 2], 1.0)];
    let rep = check_inputs(&inputs, STEP, |t, v| {
        let z = t.matmul(v[0], v[1])?;
        let s = t.sigmoid(z);
        t.sum_all(s)
    })
    .unwrap();
    vec![("sum(sigmoid(W·x))".into(), rep)]
}

fn unit_store(d: usize, seed: u64) -> (ParamStore, ActivationUnit) {
    let mut store = ParamStore::new();
    let unit = ActivationUnit::new(&mut store, &mut rng(seed), "unit", d, 5).unwrap();
    perturb_store(&mut store, seed + 1);
    (store, unit)
}

pub fn grad_activation_unit() -> Named {
    let (b, t, d) = (2, 3, 3);
    let (store, unit) = unit_store(d, 11);
    let mut r = rng(12);
    let seq = random_tensor(&mut r, &[b, t, d], 1.0);
    let query = random_tensor(&mut r, &[b, d], 1.0);
    let mask = mask_tensor(&[3, 2], t);
    let params = check_params(&store, STEP, 64, |tape| {
        let s = tape.constant(seq.clone());
        let q = tape.constant(query.clone());
        let m = tape.constant(mask.clone());
        let w = aavg::activate_sequence(tape, &unit, s, q, m)?;
        weighted_sum(tape, w, 13)
    })
    .unwrap();
    let inputs = check_inputs(&[seq.clone(), query.clone()], STEP, |tape, v| {
        let m = tape.constant(mask.clone());
        let w = activate_via(tape, &store, &unit, v[0], v[1], m)?;
        weighted_sum(tape, w, 13)
    })
    .unwrap();
    vec![
        ("activation unit / parameters".to_string(), params),
        ("activation unit / inputs".to_string(), inputs),
    ]
}

/// Unit scoring on a parameter-free tape: parameters enter as constants so
/// the inputs can be checked with `check_inputs`.
fn activate_via(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    unit: &ActivationUnit,
    seq: Var,
    query: Var,
    mask: Var,
) -> dpan::Result<Var> {
    let s = tape.shape(seq).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let keys = tape.reshape(seq, vec![b * t, d])?;
    let q = tape.reshape(query, vec![b, 1, d])?;
    let q = tape.broadcast_to(q, vec![b, t, d])?;
    let q = tape.reshape(q, vec![b * t, d])?;
    let cross = tape.mul(keys, q)?;
    let mut h = tape.concat(&[keys, q, cross], 1)?;
    for (i, layer) in unit.mlp.layers.iter().enumerate() {
        let w = tape.constant(store.value(layer.weight).clone());
        h = tape.matmul(h, w)?;
        if let Some(bias) = layer.bias {
            let bv = tape.constant(store.value(bias).clone());
            h = tape.add_broadcast(h, bv)?;
        }
        if let Some(&slope) = unit.mlp.slopes.get(i) {
            let a = tape.constant(store.value(slope).clone());
            h = tape.prelu(h, a)?;
        }
    }
    let h = tape.reshape(h, vec![b, t])?;
    tape.mul(h, mask)
}

/// Score grid with zeros on masked positions, as AAVG produces.
pub fn masked_scores(rng: &mut ChaCha8Rng, lens: &[usize], t: usize, k: usize) -> Tensor {
    let mut w = random_tensor(rng, &[lens.len(), t, k], 1.0);
    for (b, &l) in lens.iter().enumerate() {
        for i in l..t {
            for j in 0..k {
                w.data_mut()[(b * t + i) * k + j] = 0.0;
            }
        }
    }
    w
}

pub fn inv_lens(lens: &[usize]) -> Vec<f64> {
    lens.iter().map(|&l| if l == 0 { 0.0 } else { 1.0 / l as f64 }).collect()
}

pub fn grad_bcr() -> Named {
    let (t, k, d) = (3, 2, 3);
    let lens = [3, 1];
    let b = lens.len();
    let mut r = rng(21);
    let w = masked_scores(&mut r, &lens, t, k);
    let seq_emb = random_tensor(&mut r, &[b, t, k * d], 1.0);
    let attrs: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut r, &[b, d], 1.0)).collect();
    let mut out = Vec::new();
    type Uiem = fn(&mut Tape<'_>, Var, Var) -> dpan::Result<Var>;
    type Iiem = fn(&mut Tape<'_>, Var, Var, &[Var]) -> dpan::Result<Var>;
    let uiem: [(&str, Uiem); 2] = [("UIEM diversity", bcr::uiem_diversity), ("UIEM similarity", bcr::uiem_similarity)];
    for (name, f) in uiem {
        let rep = check_inputs(&[w.clone(), seq_emb.clone()], STEP, |tape, v| {
            let o = f(tape, v[0], v[1])?;
            weighted_sum(tape, o, 22)
        })
        .unwrap();
        out.push((name.to_string(), rep));
    }
    let iiem: [(&str, Iiem); 2] = [("IIEM diversity", bcr::iiem_diversity), ("IIEM similarity", bcr::iiem_similarity)];
    for (name, f) in iiem {
        let mut inputs = vec![w.clone()];
        inputs.extend(attrs.iter().cloned());
        let rep = check_inputs(&inputs, STEP, |tape, v| {
            let inv = bcr::inv_len_input(tape, inv_lens(&lens));
            let o = f(tape, v[0], inv, &v[1..])?;
            weighted_sum(tape, o, 23)
        })
        .unwrap();
        out.push((name.to_string(), rep));
    }
    out
}

pub fn grad_unions() -> Named {
    let (b, g) = (3, 4);
    let widths = [5usize, 3];
    let layout = FusionLayout::new(g, widths.to_vec()).unwrap();
    let mut r = rng(31);
    let v_sim = random_tensor(&mut r, &[b, g], 1.0);
    let v_div = random_tensor(&mut r, &[b, g], 1.0);
    let gate = random_tensor(&mut r, &[b, g], 2.0);
    let shallow = check_inputs(&[v_sim.clone(), v_div.clone(), gate], STEP, |tape, v| {
        let gate = tape.sigmoid(v[2]);
        let o = sduf::shallow_union(tape, v[0], v[1], gate)?;
        weighted_sum(tape, o, 32)
    })
    .unwrap();
    let mut inputs = vec![v_sim, v_div];
    for (a, c) in layout.layer_shapes() {
        inputs.push(random_tensor(&mut r, &[b, a * c], 1.0));
    }
    let deep = check_inputs(&inputs, STEP, |tape, v| {
        let o = sduf::deep_union(tape, v[0], v[1], &v[2..], &widths)?;
        weighted_sum(tape, o, 33)
    })
    .unwrap();
    vec![("shallow union".into(), shallow), ("deep union".into(), deep)]
}

pub fn grad_generator() -> Named {
    let layout = FusionLayout::new(3, vec![4, 2]).unwrap();
    let mut store = ParamStore::new();
    let generator = ParamGenerator::new(&mut store, &mut rng(41), 5, 6, layout).unwrap();
    perturb_store(&mut store, 42);
    let h = random_tensor(&mut rng(43), &[2, 5], 1.0);
    let loss = |tape: &mut Tape<'_>, h: Var| -> dpan::Result<Var> {
        let p = generator.generate(tape, h)?;
        let mut total = weighted_sum(tape, p.gate, 44)?;
        for (i, &l) in p.layers.iter().enumerate() {
            let s = weighted_sum(tape, l, 45 + i as u64)?;
            total = tape.add(total, s)?;
        }
        Ok(total)
    };
    let params = check_params(&store, STEP, 64, |tape| {
        let h = tape.constant(h.clone());
        loss(tape, h)
    })
    .unwrap();
    vec![("parameter generator".into(), params)]
}

/// Full-model check on T=3, K=2, d_a=4, deep widths [8,4].
pub fn grad_full_model(arch: Arch, flags: &[Ablation]) -> GradCheckReport {
    let m2 = manifest(2);
    let mut cfg = tiny(arch);
    for &f in flags {
        cfg.ablations.set(f, true);
    }
    let mut model = Model::new(cfg, m2.clone()).unwrap();
    perturb_store(model.store_mut(), 51);
    let samples = random_samples(&mut rng(52), &m2, 4, 4);
    let b = batch(&m2, &samples, 3);
    check_params(model.store(), STEP, 40, |tape| Ok(model.loss(tape, &b)?.total)).unwrap()
}

pub fn grad_models() -> Named {
    let mut out = vec![
        ("DPAN full model".to_string(), grad_full_model(Arch::Dpan, &[])),
        ("DIN baseline".to_string(), grad_full_model(Arch::Din, &[])),
    ];
    for a in Ablation::ALL {
        out.push((format!("DPAN {}", a.flag()), grad_full_model(Arch::Dpan, &[a])));
    }
    out
}

pub fn gradient_suite() -> Named {
    let mut all = grad_primitive();
    all.extend(grad_activation_unit());
    all.extend(grad_bcr());
    all.extend(grad_unions());
    all.extend(grad_generator());
    all.extend(grad_models());
    all
}

/// Naive loops for the four compressions. `w[b][i][k]`, `seq[b][i][k][c]`,
/// `tr/ta[k][b][c]`.
pub struct BcrOracle {
    pub u_div: Vec<Vec<f64>>,
    pub u_sim: Vec<Vec<f64>>,
    pub i_div: Vec<Vec<f64>>,
    pub i_sim: Vec<Vec<f64>>,
}

pub fn bcr_oracle(w_ta: &Tensor, w_tt: &Tensor, seq_emb: &Tensor, ta: &[Tensor], cross: &[Tensor], lens: &[usize]) -> BcrOracle {
    let s = w_ta.shape();
    let (b, t, k) = (s[0], s[1], s[2]);
    let dd = seq_emb.shape()[2];
    let d = ta[0].shape()[1];
    let at = |x: &Tensor, bi: usize, i: usize, j: usize| x.data()[(bi * t + i) * k + j];
    let mut o = BcrOracle {
        u_div: vec![vec![0.0; dd]; b],
        u_sim: vec![vec![0.0; dd]; b],
        i_div: vec![vec![0.0; d]; b],
        i_sim: vec![vec![0.0; d]; b],
    };
    for bi in 0..b {
        for i in 0..t {
            let mut m_ta = 0.0;
            let mut m_tt = 0.0;
            for j in 0..k {
                m_ta += at(w_ta, bi, i, j);
                m_tt += at(w_tt, bi, i, j);
            }
            m_ta /= k as f64;
            m_tt /= k as f64;
            for c in 0..dd {
                let e = seq_emb.data()[(bi * t + i) * dd + c];
                o.u_div[bi][c] += m_ta * e;
                o.u_sim[bi][c] += m_tt * e;
            }
        }
        let inv = if lens[bi] == 0 { 0.0 } else { 1.0 / lens[bi] as f64 };
        for j in 0..k {
            let mut s_ta = 0.0;
            let mut s_tt = 0.0;
            for i in 0..t {
                s_ta += at(w_ta, bi, i, j);
                s_tt += at(w_tt, bi, i, j);
            }
            for c in 0..d {
                o.i_div[bi][c] += inv * s_ta * ta[j].data()[bi * d + c];
                o.i_sim[bi][c] += inv * s_tt * cross[j].data()[bi * d + c];
            }
        }
    }
    o
}

fn max_diff(got: &[f64], want: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    assert_eq!(got.len(), flat.len());
    got.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Largest |implementation − oracle| over the four compressions for every
/// T ≤ 3, K ≤ 3 and several random draws.
pub fn bcr_oracle_error() -> f64 {
    let mut worst: f64 = 0.0;
    let mut r = rng(61);
    for t in 1..=3 {
        for k in 1..=3 {
            for _ in 0..5 {
                let d = 2;
                let lens: Vec<usize> = (0..3).map(|_| r.gen_range(0..=t)).collect();
                let b = lens.len();
                let w_tr = masked_scores(&mut r, &lens, t, k);
                let w_ta = masked_scores(&mut r, &lens, t, k);
                let seq_emb = random_tensor(&mut r, &[b, t, k * d], 1.0);
                let tr: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut r, &[b, d], 1.0)).collect();
                let ta: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut r, &[b, d], 1.0)).collect();

                let mut tape = Tape::new();
                let vtr = tape.constant(w_tr.clone());
                let vta = tape.constant(w_ta.clone());
                let vtt = aavg::dual_scores(&mut tape, vtr, vta).unwrap();
                let ve = tape.constant(seq_emb.clone());
                let vtr_a: Vec<Var> = tr.iter().map(|x| tape.constant(x.clone())).collect();
                let vta_a: Vec<Var> = ta.iter().map(|x| tape.constant(x.clone())).collect();
                let crosses: Vec<Var> = vtr_a
                    .iter()
                    .zip(&vta_a)
                    .map(|(&a, &c)| tape.mul(a, c).unwrap())
                    .collect();
                let inv = bcr::inv_len_input(&mut tape, inv_lens(&lens));
                let u_div = bcr::uiem_diversity(&mut tape, vta, ve).unwrap();
                let u_sim = bcr::uiem_similarity(&mut tape, vtt, ve).unwrap();
                let i_div = bcr::iiem_diversity(&mut tape, vta, inv, &vta_a).unwrap();
                let i_sim = bcr::iiem_similarity(&mut tape, vtt, inv, &crosses).unwrap();

                let w_tt = tape.tensor(vtt);
                let cross_t: Vec<Tensor> = crosses.iter().map(|&c| tape.tensor(c)).collect();
                let o = bcr_oracle(&w_ta, &w_tt, &seq_emb, &ta, &cross_t, &lens);
                worst = worst
                    .max(max_diff(tape.value(u_div), &o.u_div))
                    .max(max_diff(tape.value(u_sim), &o.u_sim))
                    .max(max_diff(tape.value(i_div), &o.i_div))
                    .max(max_diff(tape.value(i_sim), &o.i_sim));
                for (x, (a, c)) in w_tt.data().iter().zip(w_tr.data().iter().zip(w_ta.data())) {
                    worst = worst.max((x - a * c).abs());
                }
            }
        }
    }
    worst
}

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn auc_pairwise(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] < 0.5 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] > 0.5 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Largest |rank-sum AUC − pairwise AUC| over random inputs of size 2..=200,
/// half of them with heavy ties.
pub fn auc_oracle_error() -> f64 {
    let mut r = rng(71);
    let mut worst: f64 = 0.0;
    for case in 0..60 {
        let n = r.gen_range(2..=200);
        let levels = if case % 2 == 0 { 5.0 } else { 1e6 };
        let scores: Vec<f64> = (0..n).map(|_| (r.gen::<f64>() * levels).floor() / levels).collect();
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..2u8))).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        worst = worst.max((auc(&scores, &labels).unwrap() - auc_pairwise(&scores, &labels)).abs());
    }
    worst
}

/// Gradient of the total loss per parameter name.
pub fn named_grads(model: &Model, b: &Batch) -> BTreeMap<String, Vec<f64>> {
    let (_, g) = model.loss_and_grads(b).unwrap();
    model
        .store()
        .iter()
        .zip(g)
        .map(|((_, p), g)| (p.name.clone(), g))
        .collect()
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs() -> Vec<(String, ModelConfig)> {
    let mut out = vec![("dpan".to_string(), tiny(Arch::Dpan)), ("din".to_string(), tiny(Arch::Din))];
    for a in Ablation::ALL {
        let mut c = tiny(Arch::Dpan);
        c.ablations.set(a, true);
        out.push((a.flag().to_string(), c));
    }
    out
}

/// Outputs are bit-identical when sequences are padded to a longer cap and
/// when the ids stored at padded positions change.
pub fn padding_invariance() -> Result<(), String> {
    let m = manifest(3);
    for (name, cfg) in configs() {
        let mut model = Model::new(cfg, m.clone()).unwrap();
        perturb_store(model.store_mut(), 81);
        let samples = random_samples(&mut rng(82), &m, 6, 3);
        let short = batch(&m, &samples, 3);
        let long = batch(&m, &samples, 8);
        let mut scrambled = long.clone();
        let mut r = rng(83);
        for (k, col) in scrambled.seq.iter_mut().enumerate() {
            for (i, id) in col.iter_mut().enumerate() {
                if long.mask[i] == 0.0 {
                    *id = r.gen_range(1..m.attributes[k].1);
                }
            }
        }
        let base = model.loss_and_grads(&short).unwrap();
        for (label, b) in [("padded", &long), ("scrambled padding", &scrambled)] {
            let p = model.predict(b).unwrap();
            check(p == model.predict(&short).unwrap(), || format!("{name}: p_click changed ({label})"))?;
            let other = model.loss_and_grads(b).unwrap();
            check(other.0.to_bits() == base.0.to_bits(), || format!("{name}: loss changed ({label})"))?;
            check(other.1 == base.1, || format!("{name}: gradients changed ({label})"))?;
        }
    }
    Ok(())
}

/// Generated fusion parameters ignore the target; the click score does not.
pub fn target_exclusion() -> Result<(), String> {
    let m = manifest(3);
    let mut model = Model::new(tiny(Arch::Dpan), m.clone()).unwrap();
    perturb_store(model.store_mut(), 91);
    let samples = random_samples(&mut rng(92), &m, 6, 3);
    let mut moved = samples.clone();
    let mut r = rng(93);
    for s in &mut moved {
        s.target = random_item(&mut r, &m);
    }
    let generated = |s: &[Sample]| {
        let b = batch(&m, s, 3);
        let mut tape = model.tape();
        let out = model.forward(&mut tape, &b).unwrap();
        let d = out.diagnostics.unwrap();
        let fusion = model.dpan().unwrap().generator.generate(&mut tape, d.h_cond).unwrap();
        let mut v = vec![tape.value(d.h_cond).to_vec(), tape.value(fusion.gate).to_vec()];
        v.extend(fusion.layers.iter().map(|&l| tape.value(l).to_vec()));
        (v, tape.value(out.p_click).to_vec())
    };
    let (g0, p0) = generated(&samples);
    let (g1, p1) = generated(&moved);
    check(g0 == g1, || "generated parameters depend on the target".into())?;
    check(p0 != p1, || "p_click ignores the target".into())
}

/// `w_tt = w_tr · w_ta` elementwise inside the full forward pass.
pub fn dual_score_factorization() -> Result<(), String> {
    let m = manifest(3);
    let mut model = Model::new(tiny(Arch::Dpan), m.clone()).unwrap();
    perturb_store(model.store_mut(), 101);
    let b = batch(&m, &random_samples(&mut rng(102), &m, 6, 3), 3);
    let mut tape = model.tape();
    let d = model.forward(&mut tape, &b).unwrap().diagnostics.unwrap();
    let (tr, ta, tt) = (tape.value(d.scores.w_tr), tape.value(d.scores.w_ta), tape.value(d.scores.w_tt));
    check(tt.len() == tr.len() && tt.iter().zip(tr.iter().zip(ta)).all(|(x, (a, c))| *x == a * c), || {
        "w_tt differs from w_tr * w_ta".into()
    })
}

/// Gate strictly inside (0,1); `v_su` between `v_sim` and `v_div` per coordinate.
pub fn gate_range() -> Result<(), String> {
    let m = manifest(3);
    for seed in 0..5 {
        let mut model = Model::new(tiny(Arch::Dpan), m.clone()).unwrap();
        perturb_store(model.store_mut(), 110 + seed);
        let b = batch(&m, &random_samples(&mut rng(120 + seed), &m, 8, 3), 3);
        let mut tape = model.tape();
        let d = model.forward(&mut tape, &b).unwrap().diagnostics.unwrap();
        let gate = tape.value(d.gate);
        check(gate.iter().all(|&g| g > 0.0 && g < 1.0), || format!("seed {seed}: gate outside (0,1)"))?;
        let (su, sim, div) = (tape.value(d.v_su), tape.value(d.bcr.v_sim), tape.value(d.bcr.v_div));
        for i in 0..su.len() {
            let (lo, hi) = (sim[i].min(div[i]), sim[i].max(div[i]));
            check(su[i] >= lo && su[i] <= hi, || {
                format!("seed {seed}: v_su[{i}]={} outside [{lo}, {hi}]", su[i])
            })?;
        }
    }
    Ok(())
}

/// Rows `rows` of a row-major `[in, out]` weight, or every entry of a vector.
fn rows(g: &[f64], width: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    g[rows.start * width..rows.end * width].to_vec()
}

fn columns(g: &[f64], width: usize, cols: std::ops::Range<usize>) -> Vec<f64> {
    g.chunks(width).flat_map(|r| r[cols.clone()].to_vec()).collect()
}

/// Gradient coordinates an ablation must leave exactly zero.
fn unused_coordinates(flag: Ablation, cfg: &ModelConfig, m: &VocabManifest, g: &BTreeMap<String, Vec<f64>>) -> Vec<f64> {
    let k = m.num_attributes();
    let d = cfg.attr_dim;
    let gate = cfg.aggregated_dim;
    let du = *cfg.union_widths.last().unwrap();
    let score_w = cfg.scoring_widths[0];
    let gen_w = g["sduf.generator.1.bias"].len();
    let agg_w = cfg.aggregator_hidden;
    match flag {
        Ablation::ItemAttrOnly => g
            .iter()
            .filter(|(n, _)| {
                m.attributes[1..]
                    .iter()
                    .any(|(a, _)| n.starts_with(&format!("embed.{a}")) || n.starts_with(&format!("aavg.{a}.")))
            })
            .flat_map(|(_, v)| v.clone())
            .collect(),
        Ablation::NoUserSimilarity => rows(&g["bcr.sim.0.weight"], agg_w, 0..k * d),
        Ablation::NoItemSimilarity => rows(&g["bcr.sim.0.weight"], agg_w, k * d..k * d + d),
        Ablation::NoShallowUnion => {
            let mut v = rows(&g["score.0.weight"], score_w, 0..gate);
            v.extend(columns(&g["sduf.generator.1.weight"], gen_w, 0..gate));
            v.extend(&g["sduf.generator.1.bias"][..gate]);
            v
        }
        Ablation::NoDeepUnion => {
            let mut v = rows(&g["score.0.weight"], score_w, gate..gate + du);
            v.extend(columns(&g["sduf.generator.1.weight"], gen_w, gate..gen_w));
            v.extend(&g["sduf.generator.1.bias"][gate..]);
            v
        }
        Ablation::NoAuxLoss => Vec::new(),
    }
}

/// Under each flag the parameters it disconnects receive exactly zero
/// gradient, while the full model gives them a nonzero one. `no_aux_loss`
/// has no exclusive parameters; its gradients must equal those at α = 0.
pub fn ablation_containment() -> Result<(), String> {
    let m = manifest(3);
    let samples = random_samples(&mut rng(131), &m, 6, 3);
    let b = batch(&m, &samples, 3);
    let grads = |cfg: &ModelConfig| {
        let mut model = Model::new(cfg.clone(), m.clone()).unwrap();
        perturb_store(model.store_mut(), 132);
        named_grads(&model, &b)
    };
    let full_cfg = tiny(Arch::Dpan);
    let full = grads(&full_cfg);
    for flag in Ablation::ALL {
        let mut cfg = full_cfg.clone();
        cfg.ablations.set(flag, true);
        let g = grads(&cfg);
        if flag == Ablation::NoAuxLoss {
            let mut zero = full_cfg.clone();
            zero.alpha = 0.0;
            check(g == grads(&zero), || "no_aux_loss gradients differ from alpha = 0".into())?;
            continue;
        }
        let unused = unused_coordinates(flag, &cfg, &m, &g);
        check(!unused.is_empty(), || format!("{}: no coordinates selected", flag.flag()))?;
        check(unused.iter().all(|&x| x == 0.0), || {
            format!("{}: {} nonzero gradients in the disconnected branch", flag.flag(), unused.iter().filter(|&&x| x != 0.0).count())
        })?;
        let before = unused_coordinates(flag, &full_cfg, &m, &full);
        check(before.iter().any(|&x| x != 0.0), || format!("{}: full-model gradients are zero too", flag.flag()))?;
    }
    Ok(())
}
