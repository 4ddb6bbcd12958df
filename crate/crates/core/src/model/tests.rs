use proptest::prelude::*;

use super::*;
use crate::context::SeqConfig;
use crate::numerics::{finite_diff_check_piecewise, softmax};

const VOCAB: VocabSizes = VocabSizes {
    users: 1,
    pois: 25,
    categories: 4,
    areas: 3,
};

fn poi_category(p: usize) -> usize {
    p % VOCAB.categories
}

fn toy_history(rng: &mut RngState, len: usize) -> Vec<CheckIn> {
    (0..len)
        .map(|i| {
            let poi = rng.below(VOCAB.pois);
            CheckIn {
                poi,
                category: poi_category(poi),
                dow: 1 + rng.below(7) as u8,
                slot: rng.below(24) as u8,
                area: rng.below(VOCAB.areas),
                timestamp: i as i64,
            }
        })
        .collect()
}

/// Model with weights scaled up so the nonlinearities leave their linear range.
fn toy_model(variant: VariantSpec, seed: u64, scale: f64) -> Model {
    let mut m = Model::new(VOCAB, variant, &mut RngState::new(seed)).unwrap();
    for leaf in m.store.leaves_mut() {
        leaf.value.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    m
}

fn leaf<'a>(m: &'a Model, name: &str) -> &'a Tensor {
    m.store.value(m.param(name).unwrap_or_else(|| panic!("no leaf {name}")))
}

fn row(m: &Model, name: &str, r: usize) -> Vec<f64> {
    leaf(m, name).row_slice(r).to_vec()
}

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row_slice(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn query_oracle(m: &Model, poi: usize, cat: usize, dow: u8, slot: u8, area: usize) -> Vec<f64> {
    let mut q = row(m, "emb.poi", poi);
    q.extend(row(m, "emb.category", cat));
    q.extend(row(m, "emb.dow", dow as usize - 1));
    q.extend(row(m, "emb.slot", slot as usize));
    q.extend(row(m, "emb.area", area));
    q
}

fn lstm_oracle(m: &Model, k: usize, pois: &[usize]) -> Vec<f64> {
    let (wih, whh, b) = (
        leaf(m, &format!("lstm{k}.w_ih")),
        leaf(m, &format!("lstm{k}.w_hh")),
        leaf(m, &format!("lstm{k}.b")).data().to_vec(),
    );
    let (mut h, mut c) = (vec![0.0; HIDDEN], vec![0.0; HIDDEN]);
    for &p in pois {
        let x = row(m, "emb.poi", p);
        let z = add(&add(&mat_vec(wih, &x), &mat_vec(whh, &h)), &b);
        for j in 0..HIDDEN {
            let (i, f, g, o) = (sig(z[j]), sig(z[HIDDEN + j]), z[2 * HIDDEN + j].tanh(), sig(z[3 * HIDDEN + j]));
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
    }
    h
}

fn daily_oracle(m: &Model, history: &[CheckIn]) -> Vec<Vec<f64>> {
    (1..=7u8)
        .map(|d| {
            let rows: Vec<Vec<f64>> = history
                .iter()
                .filter(|c| c.dow == d)
                .map(|c| query_oracle(m, c.poi, c.category, c.dow, c.slot, c.area))
                .collect();
            let mut mean = vec![0.0; QUERY_DIM];
            for r in &rows {
                for (a, b) in mean.iter_mut().zip(r) {
                    *a += b / rows.len() as f64;
                }
            }
            add(&mat_vec(leaf(m, "daily.w"), &mean), leaf(m, "daily.b").data())
                .iter()
                .map(|v| v.tanh())
                .collect()
        })
        .collect()
}

struct Oracle {
    prob: f64,
    intra: Vec<f64>,
    inter: Vec<f64>,
}

/// Straight-line evaluation of one candidate's probability in eval mode.
fn forward_oracle(m: &Model, step: &StepInput, poi: usize) -> Oracle {
    let q = query_oracle(m, poi, poi_category(poi), step.dow, step.slot, step.area);
    let mut interests = Vec::new();
    let mut intra = Vec::new();
    if m.variant.long {
        let l = match m.variant.long_setting {
            LongSetting::SeqAvg => {
                let mut mean = vec![0.0; QUERY_DIM];
                for c in step.history {
                    let r = query_oracle(m, c.poi, c.category, c.dow, c.slot, c.area);
                    for (a, b) in mean.iter_mut().zip(&r) {
                        *a += b / step.history.len() as f64;
                    }
                }
                add(&mat_vec(leaf(m, "daily.w"), &mean), leaf(m, "daily.b").data())
                    .iter()
                    .map(|v| v.tanh())
                    .collect()
            }
            setting => {
                let days = daily_oracle(m, step.history);
                let v_e = leaf(m, "intra.v_e").data();
                let scores: Vec<f64> = days
                    .iter()
                    .map(|lj| {
                        let mut z = mat_vec(leaf(m, "intra.v2"), lj);
                        if setting == LongSetting::AttQk {
                            z = add(&z, &mat_vec(leaf(m, "intra.v1"), &q));
                        }
                        dot(v_e, &z.iter().map(|v| v.tanh()).collect::<Vec<_>>())
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = ex.iter().sum();
                intra = ex.iter().map(|e| e / tot).collect();
                let mut l = vec![0.0; HIDDEN];
                for (e, lj) in intra.iter().zip(&days) {
                    for (a, b) in l.iter_mut().zip(lj) {
                        *a += e * b;
                    }
                }
                l
            }
        };
        interests.push(l);
    }
    for k in 0..4 {
        if m.variant.short[k] {
            interests.push(lstm_oracle(m, k + 1, &step.seqs.get(k).pois));
        }
    }
    let v3q = mat_vec(leaf(m, "inter.v3"), &q);
    let v_a = leaf(m, "inter.v_a").data();
    let mut x = Vec::new();
    let mut inter = Vec::new();
    for i in &interests {
        let z: Vec<f64> = add(&v3q, &mat_vec(leaf(m, "inter.v4"), i)).iter().map(|v| v.tanh()).collect();
        let a = dot(v_a, &z);
        inter.push(a);
        x.extend(i.iter().map(|v| a * v));
    }
    let mut h: Vec<f64> = q.iter().chain(&x).copied().collect();
    for k in 1..=3 {
        h = add(&mat_vec(leaf(m, &format!("mlp{k}.w")), &h), leaf(m, &format!("mlp{k}.b")).data());
        if k < 3 {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Oracle {
        prob: sig(h[0]),
        intra,
        inter,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn eval_forward(m: &Model, step: &StepInput, pois: &[usize]) -> (Vec<f64>, Option<Vec<f64>>, Vec<f64>) {
    let cats: Vec<usize> = pois.iter().map(|&p| poi_category(p)).collect();
    let mut tape = Tape::new(&m.store);
    let f = m
        .forward(&mut tape, step, pois, &cats, &ForwardOptions::eval(), &mut RngState::new(0))
        .unwrap();
    (
        tape.value(f.probs).data().to_vec(),
        f.intra.map(|e| tape.value(e).data().to_vec()),
        tape.value(f.inter).data().to_vec(),
    )
}

#[test]
fn query_layout() {
    let m = toy_model(VariantSpec::full(), 1, 1.0);
    let mut tape = Tape::new(&m.store);
    let a = m.embed_queries(&mut tape, &[3], &[1], 2, 7, 1).unwrap();
    let b = m.embed_queries(&mut tape, &[3], &[1], 2, 8, 1).unwrap();
    let (a, b) = (tape.value(a).data(), tape.value(b).data());
    assert_eq!(a.len(), QUERY_DIM);
    assert_eq!(QUERY_DIM, 152);
    assert_eq!(a, &query_oracle(&m, 3, 1, 2, 7, 1)[..]);
    for i in 0..QUERY_DIM {
        assert_eq!(a[i] != b[i], (SLOT_OFFSET..SLOT_OFFSET + SLOT_DIM).contains(&i), "position {i}");
    }
    assert_eq!(SLOT_OFFSET, 104);

    let z = Model::zeros(VOCAB, VariantSpec::full()).unwrap();
    let mut tape = Tape::new(&z.store);
    let q = z.embed_queries(&mut tape, &[0, 24], &[0, 3], 7, 23, 2).unwrap();
    assert!(tape.value(q).data().iter().all(|v| *v == 0.0));
    assert!(z.embed_queries(&mut tape, &[25], &[0], 1, 0, 0).is_err());
    assert!(z.embed_queries(&mut tape, &[0], &[0], 8, 0, 0).is_err());
}

#[test]
fn daily_patterns_cases() {
    let m = toy_model(VariantSpec::full(), 2, 4.0);
    let b: Vec<f64> = leaf(&m, "daily.b").data().to_vec();
    let tanh_b: Vec<f64> = b.iter().map(|v| v.tanh()).collect();

    let mut tape = Tape::new(&m.store);
    let empty = crate::context::build_daily_masks(&[], 0);
    let l = m.daily_patterns(&mut tape, None, &empty).unwrap();
    for j in 0..7 {
        assert_eq!(tape.value(l).row_slice(j), &tanh_b[..]);
    }

    let h = vec![CheckIn {
        poi: 4,
        category: 0,
        dow: 1,
        slot: 9,
        area: 2,
        timestamp: 0,
    }];
    let mut tape = Tape::new(&m.store);
    let rows = m.history_rows(&mut tape, &h).unwrap();
    let l = m.daily_patterns(&mut tape, rows, &crate::context::build_daily_masks(&h, 1)).unwrap();
    let expect = daily_oracle(&m, &h);
    assert!(tape.value(l).row_slice(0).iter().zip(&expect[0]).all(|(a, b)| close(*a, *b, 1e-13)));
    for j in 1..7 {
        assert_eq!(tape.value(l).row_slice(j), &tanh_b[..]);
    }

    let mut rng = RngState::new(5);
    for _ in 0..10 {
        let h = toy_history(&mut rng, 12);
        let mut tape = Tape::new(&m.store);
        let rows = m.history_rows(&mut tape, &h).unwrap();
        let l = m.daily_patterns(&mut tape, rows, &crate::context::build_daily_masks(&h, 12)).unwrap();
        for (j, e) in daily_oracle(&m, &h).iter().enumerate() {
            for (a, b) in tape.value(l).row_slice(j).iter().zip(e) {
                assert!(close(*a, *b, 1e-13));
            }
        }
    }
}

#[test]
fn intra_attention_cases() {
    let m = toy_model(VariantSpec::full(), 3, 3.0);
    let mut tape = Tape::new(&m.store);
    let q = m.embed_queries(&mut tape, &[1, 2], &[1, 2], 3, 4, 0).unwrap();
    let v: Vec<f64> = (0..HIDDEN).map(|i| (i as f64 * 0.37).sin()).collect();
    let rows = tape.input(Tensor::matrix(7, HIDDEN, v.repeat(7)).unwrap());
    let (l, e) = m.intra_attention(&mut tape, q, rows).unwrap();
    for r in 0..2 {
        assert!(tape.value(e).row_slice(r).iter().all(|w| (w - 1.0 / 7.0).abs() < 1e-15));
        assert!(tape.value(l).row_slice(r).iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    // one dominant day: softmax saturates onto it
    let scores = [0.3, -0.2, 1000.3, 0.0, 0.1, 0.2, -1.0];
    let w = softmax(&scores).unwrap();
    assert!((w[2] - 1.0).abs() < 1e-12);
    let shifted: Vec<f64> = scores.iter().map(|s| s + 17.5).collect();
    let ws = softmax(&shifted).unwrap();
    assert!(w.iter().zip(&ws).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn intra_weights_follow_row_permutation() {
    let m = toy_model(VariantSpec::full(), 4, 3.0);
    let mut rng = RngState::new(9);
    let data: Vec<f64> = (0..7 * HIDDEN).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let permuted: Vec<f64> = perm.iter().flat_map(|&p| data[p * HIDDEN..(p + 1) * HIDDEN].to_vec()).collect();
    let mut tape = Tape::new(&m.store);
    let q = m.embed_queries(&mut tape, &[5], &[1], 6, 20, 2).unwrap();
    let a = tape.input(Tensor::matrix(7, HIDDEN, data).unwrap());
    let b = tape.input(Tensor::matrix(7, HIDDEN, permuted).unwrap());
    let (la, ea) = m.intra_attention(&mut tape, q, a).unwrap();
    let (lb, eb) = m.intra_attention(&mut tape, q, b).unwrap();
    let (ea, eb) = (tape.value(ea).data(), tape.value(eb).data());
    for (j, &p) in perm.iter().enumerate() {
        assert!((eb[j] - ea[p]).abs() < 1e-15);
    }
    assert!((ea.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(tape.value(la).data().iter().zip(tape.value(lb).data()).all(|(x, y)| (x - y).abs() < 1e-14));
}

#[test]
fn short_interests_cases() {
    let m = toy_model(VariantSpec::full(), 6, 4.0);
    let mut tape = Tape::new(&m.store);
    let s = m.short_interests(&mut tape, &ShortTermSeqs::default()).unwrap();
    for v in s {
        assert!(tape.value(v.unwrap()).data().iter().all(|x| *x == 0.0));
    }
    let mut rng = RngState::new(2);
    for _ in 0..5 {
        let h = toy_history(&mut rng, 30);
        let seqs = crate::context::build_short_term(&h, 29, h[29].area, h[29].slot, &SeqConfig::default());
        let mut tape = Tape::new(&m.store);
        let s = m.short_interests(&mut tape, &seqs).unwrap();
        for k in 0..4 {
            let got = tape.value(s[k].unwrap()).data();
            let want = lstm_oracle(&m, k + 1, &seqs.get(k).pois);
            assert!(got.iter().zip(&want).all(|(a, b)| close(*a, *b, 1e-13)), "S{}", k + 1);
        }
    }
    // a single step equals one cell from the zero state
    let one = ShortTermSeqs {
        s1: crate::context::Sequence {
            positions: vec![0],
            pois: vec![7],
        },
        ..Default::default()
    };
    let mut tape = Tape::new(&m.store);
    let s = m.short_interests(&mut tape, &one).unwrap();
    let p = m.ids.lstm[0].unwrap();
    let x = tape.gather(m.ids.poi, &[7]).unwrap();
    let (h0, c0) = (tape.zeros(1, HIDDEN), tape.zeros(1, HIDDEN));
    let (h1, _) = crate::numerics::lstm_cell(&mut tape, &p, x, h0, c0).unwrap();
    assert_eq!(tape.value(s[0].unwrap()).data(), tape.value(h1).data());
}

#[test]
fn inter_attention_cases() {
    let mut m = toy_model(VariantSpec::full(), 7, 3.0);
    let va = m.param("inter.v_a").unwrap();
    m.store.leaf_mut(va).value.data_mut().fill(0.0);
    let mut tape = Tape::new(&m.store);
    let q = m.embed_queries(&mut tape, &[1, 2, 3], &[1, 2, 3], 1, 1, 1).unwrap();
    let l = tape.input(Tensor::matrix(3, HIDDEN, vec![0.5; 3 * HIDDEN]).unwrap());
    let s = m.short_interests(&mut tape, &ShortTermSeqs::default()).unwrap();
    let mut ints = vec![l];
    ints.extend(s.into_iter().flatten());
    let opts = ForwardOptions::train(0.3, 0.0);
    let (x, a) = m.inter_attention(&mut tape, q, &ints, &opts, &mut RngState::new(1)).unwrap();
    assert_eq!(tape.value(x).shape(), &[3, 320]);
    assert!(tape.value(x).data().iter().all(|v| *v == 0.0));
    assert!(tape.value(a).data().iter().all(|v| *v == 0.0));
}

#[test]
fn zero_mlp_predicts_half_and_bias_is_monotone() {
    let mut m = toy_model(VariantSpec::full(), 8, 1.0);
    for k in 1..=3 {
        let w = m.param(&format!("mlp{k}.w")).unwrap();
        m.store.leaf_mut(w).value.data_mut().fill(0.0);
    }
    let h = toy_history(&mut RngState::new(1), 6);
    let step = StepInput::new(&h, 5, &SeqConfig::default()).unwrap();
    let (p, _, _) = eval_forward(&m, &step, &[0, 1]);
    assert_eq!(p, vec![0.5, 0.5]);

    let m = toy_model(VariantSpec::full(), 8, 3.0);
    let b3 = m.param("mlp3.b").unwrap();
    let mut last = 0.0;
    for bias in [-2.0, -0.5, 0.0, 0.7, 3.0] {
        let mut mm = m.clone();
        mm.store.leaf_mut(b3).value.data_mut()[0] = bias;
        let (p, _, _) = eval_forward(&mm, &step, &[3]);
        assert!(p[0] > last);
        last = p[0];
    }
}

#[test]
fn forward_matches_direct_formulas() {
    let variants = [
        VariantSpec::full(),
        VariantSpec::full().with_setting(LongSetting::AttK),
        VariantSpec::full().with_setting(LongSetting::SeqAvg),
        VariantSpec::long_only(),
        VariantSpec::short_only(),
        VariantSpec::parse("s1").unwrap(),
        VariantSpec::parse("l+s3").unwrap(),
    ];
    let mut rng = RngState::new(31);
    for (vi, v) in variants.iter().enumerate() {
        let m = toy_model(*v, 100 + vi as u64, 4.0);
        for len in [1usize, 2, 5, 14] {
            let h = toy_history(&mut rng, len);
            let step = StepInput::new(&h, len - 1, &SeqConfig { s1_window: 6, cap: 4 }).unwrap();
            let pois: Vec<usize> = (0..VOCAB.pois).collect();
            let (probs, intra, inter) = eval_forward(&m, &step, &pois);
            let k = v.num_interests();
            for &p in &pois {
                let o = forward_oracle(&m, &step, p);
                assert!(close(probs[p], o.prob, 1e-12), "{v} len {len} poi {p}: {} vs {}", probs[p], o.prob);
                for (a, b) in inter[p * k..(p + 1) * k].iter().zip(&o.inter) {
                    assert!(close(*a, *b, 1e-12));
                }
                if let Some(e) = &intra {
                    for (a, b) in e[p * 7..(p + 1) * 7].iter().zip(&o.intra) {
                        assert!(close(*a, *b, 1e-12));
                    }
                }
            }
        }
    }
}

#[test]
fn eval_forward_is_bit_identical() {
    let m = toy_model(VariantSpec::full(), 9, 2.0);
    let h = toy_history(&mut RngState::new(4), 9);
    let step = StepInput::new(&h, 8, &SeqConfig::default()).unwrap();
    let a = eval_forward(&m, &step, &[0, 5, 9]);
    let b = eval_forward(&m, &step, &[0, 5, 9]);
    assert_eq!(a.0, b.0);
    // scoring in chunks gives the same numbers as one batch
    let cats: Vec<usize> = (0..VOCAB.pois).map(poi_category).collect();
    let all: Vec<usize> = (0..VOCAB.pois).collect();
    assert_eq!(m.score(&step, &all, &cats, 4).unwrap(), m.score(&step, &all, &cats, 100).unwrap());
}

#[test]
fn train_mode_dropout_changes_output_eval_does_not() {
    let m = toy_model(VariantSpec::full(), 10, 2.0);
    let h = toy_history(&mut RngState::new(4), 9);
    let step = StepInput::new(&h, 8, &SeqConfig::default()).unwrap();
    let run = |opts: ForwardOptions, seed| {
        let mut tape = Tape::new(&m.store);
        let f = m.forward(&mut tape, &step, &[1, 2], &[1, 2], &opts, &mut RngState::new(seed)).unwrap();
        tape.value(f.probs).data().to_vec()
    };
    let eval = ForwardOptions {
        mode: Mode::Eval,
        dropout_inter: 0.5,
        dropout_mlp: 0.5,
    };
    assert_eq!(run(eval, 1), run(eval, 2));
    assert_eq!(run(eval, 1), run(ForwardOptions::eval(), 3));
    let train = ForwardOptions::train(0.5, 0.5);
    assert_eq!(run(train, 1), run(train, 1));
    assert_ne!(run(train, 1), run(train, 2));
}

#[test]
fn bce_cases() {
    let m = toy_model(VariantSpec::full(), 11, 1.0);
    let mut tape = Tape::new(&m.store);
    let p = tape.input(Tensor::matrix(1, 1, vec![1.0 - LOSS_EPS]).unwrap());
    let l = tape.bce(p, &[1.0], LOSS_EPS).unwrap();
    assert!(tape.value(l).item() < 1e-11);
    let p = tape.input(Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap());
    let l = tape.bce(p, &[1.0, 0.0], LOSS_EPS).unwrap();
    assert!((tape.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert!(tape.bce(p, &[], LOSS_EPS).is_err());

    // compensated summation with log1p as the reference
    let mut rng = RngState::new(12);
    for _ in 0..20 {
        let n = 21;
        let probs: Vec<f64> = (0..n).map(|_| rng.uniform_range(1e-6, 1.0 - 1e-6)).collect();
        let labels: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (y, p) in labels.iter().zip(&probs) {
            let term = if *y == 1.0 { -p.ln() } else { -(-p).ln_1p() };
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
        let reference = sum + comp;
        let got = crate::numerics::bce(&labels, &probs, LOSS_EPS).unwrap();
        assert!((got - reference).abs() <= 1e-13 * reference.abs());
    }
}

pub(crate) fn gradient_report(variant: VariantSpec, seed: u64, len: usize, scale: f64, per_leaf: usize) -> f64 {
    let mut model = toy_model(variant, seed, scale);
    let mut rng = RngState::new(seed ^ 0xabc);
    let h = toy_history(&mut rng, len);
    let step = StepInput::new(&h, len - 1, &SeqConfig { s1_window: 5, cap: 4 }).unwrap();
    let positive = h[len - 1].poi;
    let mut pois = vec![positive];
    pois.extend(crate::train::sample_negatives(VOCAB.pois, positive, &mut rng, 20).unwrap());
    let cats: Vec<usize> = pois.iter().map(|&p| poi_category(p)).collect();
    let mut labels = vec![0.0; pois.len()];
    labels[0] = 1.0;
    let opts = ForwardOptions::eval();
    let loss_of = |m: &Model, store: &ParamStore| -> Result<(f64, Option<crate::numerics::Gradients>)> {
        let mut tape = Tape::new(store);
        let l = m.step_loss(&mut tape, &step, &pois, &cats, &labels, &opts, &mut RngState::new(0))?;
        Ok((tape.value(l).item(), Some(tape.backward(l)?)))
    };
    let layout = model.clone();
    let grads = loss_of(&layout, &model.store).unwrap().1.unwrap();
    let report = finite_diff_check_piecewise(
        |s| {
            let mut tape = Tape::new(s);
            let l = layout.step_loss(&mut tape, &step, &pois, &cats, &labels, &opts, &mut RngState::new(0))?;
            Ok((tape.value(l).item(), tape.relu_pattern()))
        },
        &mut model.store,
        &grads,
        1e-5,
        per_leaf,
        &mut rng,
    )
    .unwrap();
    assert!(report.skipped * 20 < report.coordinates, "{report:?}");
    report.max_rel_error
}

#[test]
fn end_to_end_gradient_three_checkins() {
    let err = gradient_report(VariantSpec::full(), 21, 3, 6.0, 40);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn variant_gradients() {
    for (i, v) in [
        VariantSpec::full().with_setting(LongSetting::AttK),
        VariantSpec::full().with_setting(LongSetting::SeqAvg),
        VariantSpec::parse("s2+s4").unwrap(),
    ]
    .into_iter()
    .enumerate()
    {
        let err = gradient_report(v, 40 + i as u64, 8, 6.0, 15);
        assert!(err < 1e-4, "{v}: max relative error {err:e}");
    }
}

#[test]
fn variant_names_and_dims() {
    assert_eq!(VariantSpec::full().mlp_input_dim(), 472);
    assert_eq!(VariantSpec::long_only().mlp_input_dim(), 152 + 64);
    assert_eq!(VariantSpec::parse("s1").unwrap().mlp_input_dim(), 216);
    for s in ["full", "long", "short", "S1", "L+S2+S4", "full/att-k", "long/seq-avg", "L+S1/att-k"] {
        let v: VariantSpec = s.parse().unwrap();
        assert_eq!(v.name(), s);
    }
    assert!(VariantSpec::parse("").is_err());
    assert!(VariantSpec::parse("s5").is_err());
    assert!("full/avg".parse::<VariantSpec>().is_err());
    let m = Model::new(VOCAB, VariantSpec::long_only().with_setting(LongSetting::SeqAvg), &mut RngState::new(0)).unwrap();
    assert!(m.param("intra.v1").is_none() && m.param("intra.v2").is_none() && m.param("lstm1.w_ih").is_none());
    assert_eq!(leaf(&m, "mlp1.w").shape(), &[MLP_H1, 216]);
}

#[test]
fn init_ranges() {
    let m = Model::new(VOCAB, VariantSpec::full(), &mut RngState::new(3)).unwrap();
    for l in m.store.leaves() {
        let d = l.value.data();
        if l.id.starts_with("lstm") && l.id.ends_with(".b") {
            assert!(d[..HIDDEN].iter().all(|v| *v == 0.0));
            assert!(d[HIDDEN..2 * HIDDEN].iter().all(|v| *v == 1.0));
            assert!(d[2 * HIDDEN..].iter().all(|v| *v == 0.0));
        } else if l.id.ends_with(".b") {
            assert!(d.iter().all(|v| *v == 0.0), "{}", l.id);
        } else {
            assert!(d.iter().all(|v| v.abs() <= INIT_RANGE), "{}", l.id);
        }
    }
    assert_eq!(leaf(&m, "emb.poi").shape(), &[25, 64]);
    assert_eq!(leaf(&m, "emb.slot").shape(), &[24, 16]);
    assert_eq!(leaf(&m, "intra.v1").shape(), &[64, 152]);
    assert_eq!(leaf(&m, "inter.v4").shape(), &[64, 64]);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = toy_model(VariantSpec::parse("l+s1").unwrap().with_setting(LongSetting::AttK), 12, 1.0);
    let mut opt = crate::train::OptimizerState::new(&m.store);
    opt.step = 17;
    opt.m[3][5] = 0.25;
    opt.v[0][0] = 1e-9;
    save_checkpoint(&path, &m, Some(&opt), "abc123").unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.config_hash, "abc123");
    assert_eq!(ck.model.variant, m.variant);
    assert_eq!(ck.optimizer.as_ref(), Some(&opt));
    for (a, b) in ck.model.store.leaves().iter().zip(m.store.leaves()) {
        assert_eq!(a.id, b.id);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[8] = 9;
    std::fs::write(&path, &bad).unwrap();
    let err = load_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");
    std::fs::write(&path, b"hello").unwrap();
    assert!(load_checkpoint(&path).is_err());

    let err = m
        .check_vocab(&VocabSizes {
            pois: 40,
            ..VOCAB
        })
        .unwrap_err()
        .to_string();
    assert!(err.contains("25") && err.contains("40"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn intra_weights_are_a_distribution(seed in 0u64..1000, len in 1usize..20) {
        let m = toy_model(VariantSpec::full(), seed, 5.0);
        let h = toy_history(&mut RngState::new(seed + 1), len);
        let step = StepInput::new(&h, len - 1, &SeqConfig::default()).unwrap();
        let (probs, intra, inter) = eval_forward(&m, &step, &[0, 7, 24]);
        let e = intra.unwrap();
        for r in 0..3 {
            let w = &e[r * 7..(r + 1) * 7];
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(inter.len(), 3 * 5);
        prop_assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }
}
