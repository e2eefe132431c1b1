// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass against an independent loop implementation, plus the
//! ablation identities the importance scores rely on.

use std::collections::BTreeMap;

use causal_gap::autograd::Tape;
use causal_gap::importance::{causal_importance, EvalConfig, OodSelection};
use causal_gap::tasks::TokenBatch;
use causal_gap::trainer::{train, TrainConfig};
use causal_gap::{AblationPlan, ComponentId, Model, ModelConfig, Replacement, TaskKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        ..ModelConfig::default()
    }
}

/// A model with weights large enough that every component matters.
fn busy_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn tokens(rng: &mut ChaCha8Rng, batch: usize, seq: usize) -> TokenBatch {
    let rows: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..seq).map(|_| rng.random_range(0..103)).collect())
        .collect();
    TokenBatch::new(&rows).unwrap()
}

fn param<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    m.params()[m.param_index(name).unwrap()].data()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * g[j] + b[j])
        .collect()
}

/// `x [n] · w [n, m]` with `w` row-major.
fn vecmat(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..m {
            out[j] += xi * w[i * m + j];
        }
    }
    out
}

struct OracleOut {
    /// `[batch][pos][vocab]`
    logits: Vec<Vec<Vec<f64>>>,
    /// Per component, `[batch * pos][d_model]`.
    components: BTreeMap<ComponentId, Vec<Vec<f64>>>,
}

/// Straight-line forward pass, one sequence and one position at a time.
fn oracle_forward(m: &Model, toks: &TokenBatch, zero: &[ComponentId]) -> OracleOut {
    let c = *m.config();
    let (d, dh, v) = (c.d_model, c.d_head(), c.vocab_size);
    let mut logits = Vec::new();
    let mut components: BTreeMap<ComponentId, Vec<Vec<f64>>> = BTreeMap::new();
    for b in 0..toks.batch {
        let ids = toks.row(b);
        let s = ids.len();
        let mut x: Vec<Vec<f64>> = (0..s)
            .map(|t| {
                let tok = &param(m, "embed.tok")[ids[t] * d..(ids[t] + 1) * d];
                let pos = &param(m, "embed.pos")[t * d..(t + 1) * d];
                tok.iter().zip(pos).map(|(a, p)| a + p).collect()
            })
            .collect();
        for l in 0..c.n_layers {
            let p = |n: &str| param(m, &format!("layer{l}.{n}"));
            let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, p("ln1.gain"), p("ln1.bias"), c.ln_eps)).collect();
            let q: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, p("attn.q"), d)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, p("attn.k"), d)).collect();
            let vv: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, p("attn.v"), d)).collect();
            let mut add = vec![vec![0.0; d]; s];
            for head in 0..c.n_heads {
                let id = ComponentId::Head { layer: l, head };
                let sl = head * dh..(head + 1) * dh;
                for t in 0..s {
                    let scores: Vec<f64> = (0..=t)
                        .map(|u| {
                            q[t][sl.clone()].iter().zip(&k[u][sl.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|z| (z - mx).exp()).collect();
                    let tot: f64 = e.iter().sum();
                    let mut z = vec![0.0; dh];
                    for u in 0..=t {
                        for j in 0..dh {
                            z[j] += e[u] / tot * vv[u][head * dh + j];
                        }
                    }
                    let wo = &p("attn.o")[head * dh * d..(head + 1) * dh * d];
                    let mut out = vecmat(&z, wo, d);
                    if zero.contains(&id) {
                        out = vec![0.0; d];
                    }
                    for j in 0..d {
                        add[t][j] += out[j];
                    }
                    components.entry(id).or_default().push(out);
                }
            }
            for t in 0..s {
                for j in 0..d {
                    x[t][j] += add[t][j];
                }
            }
            let id = ComponentId::Mlp { layer: l };
            for t in 0..s {
                let h2 = layer_norm(&x[t], p("ln2.gain"), p("ln2.bias"), c.ln_eps);
                let a: Vec<f64> = vecmat(&h2, p("mlp.w1"), c.d_ff)
                    .iter()
                    .zip(p("mlp.b1"))
                    .map(|(a, b)| (a + b).max(0.0))
                    .collect();
                let mut out: Vec<f64> = vecmat(&a, p("mlp.w2"), d).iter().zip(p("mlp.b2")).map(|(a, b)| a + b).collect();
                if zero.contains(&id) {
                    out = vec![0.0; d];
                }
                for j in 0..d {
                    x[t][j] += out[j];
                }
                components.entry(id).or_default().push(out);
            }
        }
        logits.push(
            x.iter()
                .map(|r| {
                    let h = layer_norm(r, param(m, "final_ln.gain"), param(m, "final_ln.bias"), c.ln_eps);
                    vecmat(&h, param(m, "unembed"), v)
                })
                .collect(),
        );
    }
    OracleOut { logits, components }
}

fn max_logit_diff(a: &Tensor, oracle: &[Vec<Vec<f64>>]) -> f64 {
    let flat: Vec<f64> = oracle.iter().flatten().flatten().copied().collect();
    a.data().iter().zip(&flat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_loop_oracle() {
    let m = busy_model(small(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let toks = tokens(&mut rng, 3, 7);
    let ids = m.components();
    let out = m.forward(&toks, None, &ids).unwrap();
    let oracle = oracle_forward(&m, &toks, &[]);
    assert!(max_logit_diff(&out.logits, &oracle.logits) < 1e-10);
    for id in &ids {
        let got = out.captured[id].data();
        let want: Vec<f64> = oracle.components[id].iter().flatten().copied().collect();
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{id}: {diff}");
    }
}

#[test]
fn residual_stream_is_the_sum_of_component_outputs() {
    let m = busy_model(small(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let toks = tokens(&mut rng, 2, 9);
    let mut tape = Tape::new();
    let g = m.build(&mut tape, &toks, None, &m.components(), false).unwrap();
    for (layer, [pre, mid, post]) in g.residuals.iter().enumerate() {
        let mut expect = tape.value(*pre).data().to_vec();
        for head in 0..m.config().n_heads {
            let out = tape.value(g.captured[&ComponentId::Head { layer, head }]);
            for (e, o) in expect.iter_mut().zip(out.data()) {
                *e += o;
            }
        }
        assert!(tape.value(*mid).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-10));
        let mlp = tape.value(g.captured[&ComponentId::Mlp { layer }]);
        for (e, o) in expect.iter_mut().zip(mlp.data()) {
            *e += o;
        }
        assert!(tape.value(*post).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

#[test]
fn replacing_with_own_output_is_identity() {
    let m = busy_model(ModelConfig::default(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let toks = tokens(&mut rng, 2, 11);
    let ids = m.components();
    let base = m.forward(&toks, None, &ids).unwrap();
    let mut all = AblationPlan::new();
    for id in &ids {
        let rep = Replacement::Exact(base.captured[id].clone());
        all.insert(*id, rep.clone());
        let plan: AblationPlan = [(*id, rep)].into_iter().collect();
        let out = m.forward(&toks, Some(&plan), &[]).unwrap();
        assert!(out.logits.max_abs_diff(&base.logits) <= 1e-10, "{id}");
    }
    let out = m.forward(&toks, Some(&all), &[]).unwrap();
    assert!(out.logits.max_abs_diff(&base.logits) <= 1e-10);
}

#[test]
fn zeroing_everything_leaves_the_embedding_path() {
    let m = busy_model(ModelConfig::default(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let toks = tokens(&mut rng, 2, 6);
    let plan: AblationPlan = m.components().into_iter().map(|id| (id, Replacement::Zero)).collect();
    let out = m.forward(&toks, Some(&plan), &[]).unwrap();
    // embedding -> final norm -> unembed, with no blocks at all
    let d = m.config().d_model;
    let v = m.config().vocab_size;
    let mut worst: f64 = 0.0;
    for b in 0..toks.batch {
        for (t, &id) in toks.row(b).iter().enumerate() {
            let x: Vec<f64> = param(&m, "embed.tok")[id * d..(id + 1) * d]
                .iter()
                .zip(&param(&m, "embed.pos")[t * d..(t + 1) * d])
                .map(|(a, p)| a + p)
                .collect();
            let h = layer_norm(&x, param(&m, "final_ln.gain"), param(&m, "final_ln.bias"), m.config().ln_eps);
            let want = vecmat(&h, param(&m, "unembed"), v);
            let row = b * toks.seq + t;
            for j in 0..v {
                worst = worst.max((out.logits.data()[row * v + j] - want[j]).abs());
            }
        }
    }
    assert!(worst < 1e-10, "{worst}");
    // the loop oracle agrees when told to zero the same components
    let oracle = oracle_forward(&busy_model(small(), 7), &toks, &small().components());
    let m_small = busy_model(small(), 7);
    let plan: AblationPlan = m_small.components().into_iter().map(|id| (id, Replacement::Zero)).collect();
    let out = m_small.forward(&toks, Some(&plan), &[]).unwrap();
    assert!(max_logit_diff(&out.logits, &oracle.logits) < 1e-10);
}

#[test]
fn later_tokens_never_affect_earlier_logits() {
    let m = busy_model(small(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let toks = tokens(&mut rng, 1, 10);
        let t = rng.random_range(1..10);
        let mut changed = toks.clone();
        changed.ids[t] = (changed.ids[t] + 1 + rng.random_range(0..101)) % 103;
        let a = m.forward(&toks, None, &[]).unwrap().logits;
        let b = m.forward(&changed, None, &[]).unwrap().logits;
        let v = m.config().vocab_size;
        assert_eq!(a.data()[..t * v], b.data()[..t * v]);
        assert_ne!(a.data()[t * v..], b.data()[t * v..]);
    }
}

fn quick_sort_model() -> Model {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        max_steps: 400,
        eval_every: 400,
        eval_size: 20,
        train_max_len: 4,
        // fixed positions learn short sorts fastest
        random_offsets: false,
        seed: 3,
        ..TrainConfig::default()
    };
    train(TaskKind::Sort, cfg, &tc, |_| {}).unwrap().0
}

#[test]
fn constant_output_components_have_zero_importance() {
    let mut m = quick_sort_model();
    let d = m.config().d_model;
    let dh = m.config().d_head();
    // head 1 of layer 0 writes nothing; layer 1's MLP writes its bias only
    let o = m.param_index("layer0.attn.o").unwrap();
    for v in &mut m.params_mut()[o].data_mut()[dh * d..2 * dh * d] {
        *v = 0.0;
    }
    let w2 = m.param_index("layer1.mlp.w2").unwrap();
    for v in m.params_mut()[w2].data_mut() {
        *v = 0.0;
    }
    let eval = EvalConfig {
        ood_lengths: vec![3],
        eval_size: 60,
        ..EvalConfig::default()
    };
    let examples = eval.ood_examples(TaskKind::Sort, 3).unwrap();
    let base = causal_gap::tasks::exact_match_accuracy(&m.decoder(None), &examples, eval.match_opts).unwrap();
    assert!(base > 0.1, "model should solve some short sorts, got {base}");
    let sel = OodSelection {
        chosen_length: Some(3),
        accuracies: vec![],
        acc_base: Some(base),
    };
    let c = causal_importance(&m, TaskKind::Sort, &sel, &eval).unwrap();
    assert_eq!(c.importance[&ComponentId::Head { layer: 0, head: 1 }], 0.0);
    assert_eq!(c.importance[&ComponentId::Mlp { layer: 1 }], 0.0);
    // a component that does write something usually matters
    assert!(c.importance.values().any(|&v| v != 0.0));
}
