// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance checks, one line per criterion.
//!
//! Criteria 1-3 and 9 are computed here and fail the target when they do
//! not hold. Criteria 4-8 are read from a finished ten-seed sweep
//! (`results/full`, or the directory in `ACCEPTANCE_RESULTS`); they are
//! empirical, so they are reported without failing the target unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use causal_gap::importance::{causal_importance, classify, Category, EvalConfig, OodSelection};
use causal_gap::tasks::{exact_match_accuracy, generate, make_batch, SampleSpec, TokenBatch};
use causal_gap::trainer::{train, TrainConfig};
use causal_gap::{ComponentId, Model, ModelConfig, Replacement, TaskKind};
use lab::pipeline::RunManifest;
use lab::report::SeedReport;
use lab::summary::SummaryReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Warn,
    Fail,
}

struct Line {
    id: &'static str,
    status: Status,
    hard: bool,
    detail: String,
}

fn emit(line: &Line) {
    let tag = match line.status {
        Status::Pass => "PASS",
        Status::Warn => "WARN",
        Status::Fail => "FAIL",
    };
    // written directly so the lines show even when output is captured
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} [{}] {}", line.id, line.detail);
    let _ = out.flush();
}

fn verdict(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        ..ModelConfig::default()
    }
}

fn perturbed(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

/// 1: every parameter of a two-layer model against central differences.
fn autograd() -> Line {
    let start = Instant::now();
    let mut model = perturbed(toy_config(), 7);
    let examples = generate(&SampleSpec {
        task: TaskKind::Sort,
        min_len: 3,
        max_len: 5,
        count: 3,
        seed: 9,
    })
    .unwrap();
    let batch = make_batch(&examples).unwrap();
    let (_, grads) = model.loss_and_grads(&batch, None).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        for j in 0..model.params()[i].len() {
            let orig = model.params()[i].data()[j];
            model.params_mut()[i].data_mut()[j] = orig + h;
            let up = model.loss(&batch, None).unwrap();
            model.params_mut()[i].data_mut()[j] = orig - h;
            let down = model.loss(&batch, None).unwrap();
            model.params_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i][j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: "1 autograd",
        status: verdict(worst < 1e-4 && secs < 60.0),
        hard: true,
        detail: format!(
            "{} parameters, worst relative error {worst:.2e} (< 1e-4), {secs:.1} s (< 60 s)",
            model.parameter_count()
        ),
    }
}

fn brute_average_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn brute_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (brute_average_ranks(a), brute_average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Ordinal ranks worked out by hand: count smaller values, then tied
/// values earlier in canonical order.
fn hand_ranks(v: &[f64]) -> Vec<usize> {
    (0..v.len())
        .map(|i| 1 + (0..v.len()).filter(|&j| v[j] < v[i] || (v[j] == v[i] && j < i)).count())
        .collect()
}

/// 2: classify against independent ranking on random vectors.
fn classification() -> Line {
    let ids = ModelConfig::default().components();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    let mut worst_rho: f64 = 0.0;
    for _ in 0..100 {
        let g: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..3.0)).collect();
        let c: Vec<f64> = (0..20)
            .map(|_| f64::from(rng.random_range(-20i32..60)) / 200.0)
            .collect();
        let gm: BTreeMap<ComponentId, f64> = ids.iter().copied().zip(g.iter().copied()).collect();
        let cm: BTreeMap<ComponentId, f64> = ids.iter().copied().zip(c.iter().copied()).collect();
        let cl = classify(&gm, &cm, 6).unwrap();
        match (cl.rho, brute_spearman(&g, &c)) {
            (Some(a), Some(b)) => worst_rho = worst_rho.max((a - b).abs()),
            (None, None) => {}
            _ => mismatches += 1,
        }
        let (rg, rc) = (hand_ranks(&g), hand_ranks(&c));
        let mut sum = 0;
        for (i, r) in cl.records.iter().enumerate() {
            let delta = rg[i] as i64 - rc[i] as i64;
            let cat = match delta {
                d if d <= -6 => Category::Hero,
                d if d >= 6 => Category::Bloat,
                _ => Category::Aligned,
            };
            if (r.rank_g, r.rank_c, r.delta, r.category) != (rg[i], rc[i], delta, cat) {
                mismatches += 1;
            }
            sum += r.delta;
        }
        if sum != 0 {
            mismatches += 1;
        }
    }
    Line {
        id: "2 classify",
        status: verdict(mismatches == 0 && worst_rho < 1e-12),
        hard: true,
        detail: format!("100 random 20-vectors: {mismatches} rank/delta/category mismatches, max |rho - brute| {worst_rho:.1e}, sum of deltas 0"),
    }
}

/// 3: replacing components with their own outputs is exact, and a
/// constant-output component has zero importance.
fn ablation() -> Line {
    let model = perturbed(toy_config(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let rows: Vec<Vec<usize>> = (0..3).map(|_| (0..9).map(|_| rng.random_range(0..103)).collect()).collect();
    let toks = TokenBatch::new(&rows).unwrap();
    let all = model.components();
    let base = model.forward(&toks, None, &all).unwrap();
    let mut worst: f64 = 0.0;
    for id in &all {
        let plan = [(*id, Replacement::Exact(base.captured[id].clone()))].into_iter().collect();
        let out = model.forward(&toks, Some(&plan), &[]).unwrap();
        for (a, b) in out.logits.data().iter().zip(base.logits.data()) {
            worst = worst.max((a - b).abs());
        }
    }

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
    let mut m = train(TaskKind::Sort, cfg, &tc, |_| {}).unwrap().0;
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let o = m.param_index("layer0.attn.o").unwrap();
    for v in &mut m.params_mut()[o].data_mut()[dh * d..2 * dh * d] {
        *v = 0.0;
    }
    let eval = EvalConfig {
        ood_lengths: vec![3],
        eval_size: 60,
        ..EvalConfig::default()
    };
    let examples = eval.ood_examples(TaskKind::Sort, 3).unwrap();
    let acc = exact_match_accuracy(&m.decoder(None), &examples, eval.match_opts).unwrap();
    let sel = OodSelection {
        chosen_length: Some(3),
        accuracies: vec![],
        acc_base: Some(acc),
    };
    let c = causal_importance(&m, TaskKind::Sort, &sel, &eval).unwrap();
    let c_const = c.importance[&ComponentId::Head { layer: 0, head: 1 }];
    Line {
        id: "3 ablation",
        status: verdict(worst < 1e-10 && c_const == 0.0),
        hard: true,
        detail: format!("identity max |logit diff| {worst:.1e} (< 1e-10), constant-output head C = {c_const}"),
    }
}

/// Every `.json` and `.csv` file under `dir` except the timing manifests
/// and the resolved config (it names the output directory).
fn deterministic_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            if p.is_dir() {
                stack.push(p);
            } else if (name.ends_with(".json") || name.ends_with(".csv"))
                && name != "run_manifest.json"
                && name != "experiment.json"
            {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn smoke_run(out: &Path) -> (bool, Duration) {
    let start = Instant::now();
    let config = workspace().join("configs/smoke.json");
    let status = Command::new(env!("CARGO_BIN_EXE_lab"))
        .args(["run", "--config"])
        .arg(&config)
        .arg("--output-dir")
        .arg(out)
        .env_remove("LAB_OUT")
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    (status.success(), start.elapsed())
}

/// 9, plus the smoke timing part of 4.
fn smoke() -> (Line, Line) {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (ok_a, t_a) = smoke_run(&a);
    let (ok_b, _) = smoke_run(&b);
    let (fa, fb) = (deterministic_files(&a), deterministic_files(&b));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let timing = Line {
        id: "4 smoke time",
        status: verdict(ok_a && t_a < Duration::from_secs(600)),
        hard: true,
        detail: format!("smoke config finished in {:.0} s (< 600 s)", t_a.as_secs_f64()),
    };
    let det = Line {
        id: "9 determinism",
        status: verdict(ok_a && ok_b && differing.is_empty() && !fa.is_empty()),
        hard: true,
        detail: if differing.is_empty() {
            format!("two smoke runs: {} JSON/CSV files byte-identical", fa.len())
        } else {
            format!("files differ: {}", differing.join(", "))
        },
    };
    (timing, det)
}

struct Sweep {
    summary: SummaryReport,
    reports: Vec<SeedReport>,
    manifests: Vec<(String, RunManifest)>,
}

fn load_sweep(dir: &Path) -> Option<Sweep> {
    let summary = serde_json::from_slice(&fs::read(dir.join("summary.json")).ok()?).ok()?;
    let reports = lab::summary::load_reports(dir).ok()?;
    let mut manifests = Vec::new();
    for r in &reports {
        let p = lab::config::run_dir(dir, r.task, r.seed).join(lab::pipeline::RUN_MANIFEST);
        if let Some(m) = fs::read(&p).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
            manifests.push((format!("{}-{}", r.task, r.seed), m));
        }
    }
    Some(Sweep {
        summary,
        reports,
        manifests,
    })
}

fn fmt_rho(r: Option<f64>) -> String {
    r.map_or("undefined".into(), |v| format!("{v:.3}"))
}

fn sweep_lines(sweep: &Sweep) -> Vec<Line> {
    let rev = sweep.summary.task(TaskKind::Reverse);
    let sort = sweep.summary.task(TaskKind::Sort);
    let mut lines = Vec::new();

    let conv = |t: TaskKind| {
        let all: Vec<&SeedReport> = sweep.reports.iter().filter(|r| r.task == t).collect();
        let ok = all.iter().filter(|r| r.train.converged).count();
        (ok, all.len())
    };
    let (rc, rn) = conv(TaskKind::Reverse);
    let (sc, sn) = conv(TaskKind::Sort);
    lines.push(Line {
        id: "4 convergence",
        status: verdict(rn == 10 && sn == 10 && rc >= 8 && sc >= 7),
        hard: false,
        detail: format!("reversal {rc}/{rn} seeds reach 90% (need 8/10), sorting {sc}/{sn} (need 7/10)"),
    });
    let slowest = sweep
        .manifests
        .iter()
        .map(|(name, m)| {
            let secs: f64 = m.stages.iter().filter(|s| !s.reused).map(|s| s.seconds).sum();
            (name.clone(), secs)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1));
    lines.push(Line {
        id: "4 seed time",
        status: verdict(slowest.as_ref().is_some_and(|(_, s)| *s <= 1800.0)),
        hard: false,
        detail: match &slowest {
            Some((name, s)) => format!("slowest seed {name} took {:.0} s (<= 1800 s)", s),
            None => "no run manifests".into(),
        },
    });

    let (rr, sr) = (rev.and_then(|t| t.rho.clone()), sort.and_then(|t| t.rho.clone()));
    let rev_seed_rhos: Vec<Option<f64>> = sweep
        .reports
        .iter()
        .filter(|r| r.task == TaskKind::Reverse && !r.is_excluded())
        .map(|r| r.rho)
        .collect();
    let clauses = [
        match (&rr, &sr) {
            (Some(a), Some(b)) => a.mean - b.mean >= 0.2,
            _ => false,
        },
        !rev_seed_rhos.is_empty() && rev_seed_rhos.iter().all(|r| r.is_some_and(|v| v > 0.0)),
        match (&rr, &sr) {
            (Some(a), Some(b)) => b.std > a.std,
            _ => false,
        },
    ];
    let failing = clauses.iter().filter(|c| !**c).count();
    lines.push(Line {
        id: "5 gap direction",
        status: match failing {
            0 => Status::Pass,
            1 => Status::Warn,
            _ => Status::Fail,
        },
        hard: false,
        detail: format!(
            "rho reversal {} (std {}, {} seeds), sorting {} (std {}, {} seeds); clauses [mean gap >= 0.2, all reversal rho > 0, sort std > rev std] = {clauses:?}",
            fmt_rho(rr.as_ref().map(|m| m.mean)),
            fmt_rho(rr.as_ref().map(|m| m.std)),
            rr.as_ref().map_or(0, |m| m.n),
            fmt_rho(sr.as_ref().map(|m| m.mean)),
            fmt_rho(sr.as_ref().map(|m| m.std)),
            sr.as_ref().map_or(0, |m| m.n),
        ),
    });

    let included = |t: Option<&lab::summary::TaskSummary>| t.map_or(0, |t| t.seeds.len() - t.excluded_seeds.len());
    let (rh, sh) = (rev.map_or(0, |t| t.hero_total), sort.map_or(0, |t| t.hero_total));
    lines.push(Line {
        id: "6 hero counts",
        status: verdict(included(rev) > 0 && included(sort) > 0 && sh >= 2 * rh),
        hard: false,
        detail: format!(
            "sorting heroes {sh} over {} seeds, reversal heroes {rh} over {} seeds (need sorting >= 2x reversal, both measured)",
            included(sort),
            included(rev)
        ),
    });

    let paired = sort.and_then(|t| t.paired_pruning.clone());
    lines.push(Line {
        id: "7 pruning gap",
        status: verdict(paired.as_ref().is_some_and(|p| p.gap >= 0.10)),
        hard: false,
        detail: match &paired {
            Some(p) => format!(
                "sorting seeds {:?}: hero-prune drop {:.1} pts, bloat-prune drop {:.1} pts, gap {:.1} pts (need >= 10)",
                p.seeds,
                100.0 * p.hero_drop.mean,
                100.0 * p.bloat_drop.mean,
                100.0 * p.gap
            ),
            None => "no sorting seed with both heroes and bloats".into(),
        },
    });

    let bloat = sort.map(|t| t.bloat_id.clone());
    let bimodal = bloat.as_ref().is_some_and(|b| b.bimodal(0.02, 0.05));
    lines.push(Line {
        id: "8 bloat ID sweep",
        status: if bimodal { Status::Pass } else { Status::Warn },
        hard: false,
        detail: match &bloat {
            Some(b) => format!(
                "sorting all-bloat ID drops (pts) {:?}; need one <= -2 and one >= +5",
                b.rows.iter().map(|r| (r.seed, (1000.0 * r.drop).round() / 10.0)).collect::<Vec<_>>()
            ),
            None => "no sorting summary".into(),
        },
    });
    lines
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` style arguments are accepted and ignored
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let results = std::env::var_os("ACCEPTANCE_RESULTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("results/full"));

    let mut lines = Vec::new();
    for f in [autograd, classification, ablation] {
        let l = f();
        emit(&l);
        lines.push(l);
    }
    match load_sweep(&results) {
        Some(sweep) => {
            for l in sweep_lines(&sweep) {
                emit(&l);
                lines.push(l);
            }
        }
        None => {
            for id in ["4 convergence", "4 seed time", "5 gap direction", "6 hero counts", "7 pruning gap", "8 bloat ID sweep"] {
                let l = Line {
                    id,
                    status: Status::Fail,
                    hard: false,
                    detail: format!("no sweep results in {}", results.display()),
                };
                emit(&l);
                lines.push(l);
            }
        }
    }
    let (timing, det) = smoke();
    emit(&timing);
    emit(&det);
    lines.push(timing);
    lines.push(det);

    let blocking = lines
        .iter()
        .filter(|l| l.status == Status::Fail && (l.hard || strict))
        .count();
    let _ = writeln!(
        std::io::stdout(),
        "acceptance: {} pass, {} warn, {} fail ({} blocking)",
        lines.iter().filter(|l| l.status == Status::Pass).count(),
        lines.iter().filter(|l| l.status == Status::Warn).count(),
        lines.iter().filter(|l| l.status == Status::Fail).count(),
        blocking
    );
    if blocking == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
