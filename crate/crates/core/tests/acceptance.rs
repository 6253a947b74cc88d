//! Acceptance suite. Every criterion runs inside one test so that the
//! timing budgets are measured without other tests competing for the CPU.
//! Each prints a PASS or FAIL line; the test fails if any criterion does.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fewshot_rec::corpus::{self, InputFormat, Interaction, SplitBundle, SplitConfig, SplitOrder};
use fewshot_rec::directrec::{bpr_triple_loss, evaluate, init_model, train, CandidatePolicy, Init, InjectionMode, RankConfig, RankerKind};
use fewshot_rec::embedsvc::{build_variant, ControlOptions, Embedder, EmbeddingPair, EmbeddingSet, Provenance, Variant, VariantSource};
use fewshot_rec::evalmetrics::{classification_metrics, ranking_metrics};
use fewshot_rec::harness::{
    aggregate, improvement_pct, render_markdown, CellKey, CellReport, ExperimentConfig, Inputs, RepResult, RunReport, Settings, Task,
    Workspace,
};
use fewshot_rec::neuralcore::{LayerSpec, Mode, Network, NetworkSpec, OptimizerConfig, Tensor};
use fewshot_rec::promptgen::{build_all_prompts, PromptConfig, SubjectKind};
use fewshot_rec::repgen::{generate_all, Backend, GenerationConfig};
use fewshot_rec::semdist::{compare_sets, pair_distance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(actual: f64, expected: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((actual - expected).abs() <= tol, format!("{what}: {actual:.6} vs {expected} ± {tol}"))
}

fn run(id: usize, name: &str, limit: Duration, body: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let took = start.elapsed();
    let (pass, detail) = match outcome {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; over the {limit:?} budget")),
        Err(d) => (false, d),
    };
    println!("{} #{id} {name} [{:.2}s / {}s]: {detail}", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64(), limit.as_secs());
    pass
}

fn fixture_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reviews.csv")
}

fn fixture_split_config() -> SplitConfig {
    SplitConfig { cohort: 40, user_cap: 5, item_cap: 10, seed: 42, order: SplitOrder::TestLast }
}

fn row(user: &str, item: &str) -> Interaction {
    Interaction { user_id: user.into(), item_id: item.into(), rating: None, timestamp: 0, review: String::new() }
}

fn pair_from(d: usize, users: &[(String, Vec<f64>)], items: &[(String, Vec<f64>)]) -> EmbeddingPair {
    let prov = Provenance { embedder: "test".into(), chunk_limit: None, merge: None };
    let mut eu = EmbeddingSet::with_dim(Variant::RepBert, SubjectKind::User, d, prov.clone());
    let mut ei = EmbeddingSet::with_dim(Variant::RepBert, SubjectKind::Item, d, prov);
    for (id, v) in users {
        eu.insert(id, v.clone()).unwrap();
    }
    for (id, v) in items {
        ei.insert(id, v.clone()).unwrap();
    }
    EmbeddingPair { users: eu, items: ei }
}

fn rep_with(metrics: &[(&str, f64)]) -> RepResult {
    RepResult {
        seed: 0,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        diverged: false,
        divergence: None,
        error: None,
        seconds: None,
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

// 1

fn degenerate_classifier_anchor() -> Check {
    let labels: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
    let all_pos = classification_metrics(&vec![1; labels.len()], &labels).map_err(|e| e.to_string())?;
    let all_neg = classification_metrics(&vec![0; labels.len()], &labels).map_err(|e| e.to_string())?;
    close(all_pos.accuracy, 0.500, 0.001, "all-positive accuracy")?;
    close(all_pos.precision, 0.500, 0.001, "all-positive precision")?;
    close(all_pos.f1, 0.667, 0.001, "all-positive F1")?;

    let as_rep = |m: &fewshot_rec::evalmetrics::ClassificationMetrics| {
        rep_with(&[("accuracy", m.accuracy), ("precision", m.precision), ("f1", m.f1)])
    };
    let key = CellKey { model: "linear".into(), variant: "v".into(), mode: "input".into() };
    let cell = aggregate(key, vec![as_rep(&all_pos), as_rep(&all_neg)], &names(&["accuracy", "precision", "f1"]));
    let (a, p, f) = (cell.mean["accuracy"], cell.mean["precision"], cell.mean["f1"]);
    close(a, 0.500, 0.001, "collapse-average accuracy")?;
    close(p, 0.250, 0.001, "collapse-average precision")?;
    close(f, 0.335, 0.001, "collapse-average F1")?;
    Ok(format!("all-positive {:.3}/{:.3}/{:.3}, collapse average {a:.3}/{p:.3}/{f:.4}", all_pos.accuracy, all_pos.precision, all_pos.f1))
}

// 2

fn improvement_anchor() -> Check {
    let a = improvement_pct(0.011, 0.002).ok_or("no ratio for 0.011/0.002")?;
    let b = improvement_pct(0.210, 0.051).ok_or("no ratio for 0.210/0.051")?;
    ensure(format!("{a:.0}") == "550", format!("0.011 vs 0.002 gives {a}"))?;
    ensure(format!("{b:.0}") == "412", format!("0.210 vs 0.051 gives {b}"))?;

    let metric = names(&["hr@10"]);
    let cell = |variant: &str, mode: &str, v: f64| {
        let key = CellKey { model: "ncf-mlp".into(), variant: variant.into(), mode: mode.into() };
        aggregate(key, vec![rep_with(&[("hr@10", v)])], &metric)
    };
    let mut cells: Vec<CellReport> = vec![cell("random", "random", 0.051), cell("rep+bert", "fixed", 0.210)];
    fewshot_rec::harness::attach_improvements(&mut cells);
    let report = RunReport { settings: Settings::default(), variants: vec!["rep+bert".into()], metric_names: metric, cells };
    let md = render_markdown(&report);
    ensure(md.contains("0.210 **412%**"), format!("markdown lacks the highlighted 412%:\n{md}"))?;
    Ok(format!("{a:.0}% and {b:.0}%, rendered as \"0.210 **412%**\""))
}

// 3

fn naive_rank(scores: &[f64], ids: &[String], truth: usize) -> usize {
    let mut r = 1;
    for c in 0..scores.len() {
        if c != truth && (scores[c] > scores[truth] || (scores[c] == scores[truth] && ids[c] < ids[truth])) {
            r += 1;
        }
    }
    r
}

fn ranking_case(rng: &mut ChaCha8Rng, ks: &[usize]) -> Result<(), String> {
    let (nu, ni) = (50, 200);
    let uids: Vec<String> = (0..nu).map(|u| format!("u{u:02}")).collect();
    let iids: Vec<String> = (0..ni).map(|i| format!("c{i:03}")).collect();
    let levels = rng.gen_range(2..12);
    let scores: Vec<Vec<f64>> = (0..nu)
        .map(|_| {
            (0..ni).map(|_| if rng.gen_bool(0.8) { rng.gen_range(0..levels) as f64 * 0.25 } else { rng.gen_range(-1.0..3.0) }).collect()
        })
        .collect();
    let truth: Vec<usize> = (0..nu).map(|_| rng.gen_range(0..ni)).collect();

    let mut splits = SplitBundle::default();
    for (u, id) in uids.iter().enumerate() {
        splits.user_train.insert(id.clone(), Vec::new());
        splits.test.insert(id.clone(), iids[truth[u]].clone());
    }
    for id in &iids {
        splits.item_train.insert(id.clone(), Vec::new());
    }
    // One-hot users against score columns make the BPR dot product the score.
    let users: Vec<(String, Vec<f64>)> =
        uids.iter().enumerate().map(|(u, id)| (id.clone(), (0..nu).map(|k| if k == u { 1.0 } else { 0.0 }).collect())).collect();
    let items: Vec<(String, Vec<f64>)> =
        iids.iter().enumerate().map(|(i, id)| (id.clone(), (0..nu).map(|u| scores[u][i]).collect())).collect();
    let emb = pair_from(nu, &users, &items);
    let model = init_model(RankerKind::BprMf, &splits, Init::Injected(&emb), InjectionMode::FIXED, &RankConfig::default(), 0)
        .map_err(|e| e.to_string())?;
    let eval = evaluate(&model, &splits, CandidatePolicy::Full, ks, 0).map_err(|e| e.to_string())?;

    let ranks: Vec<usize> = (0..nu).map(|u| naive_rank(&scores[u], &iids, truth[u])).collect();
    for (u, id) in uids.iter().enumerate() {
        ensure(eval.ranks[id] == ranks[u], format!("user {id}: rank {} vs oracle {}", eval.ranks[id], ranks[u]))?;
    }
    let mut ascending = ranks.clone();
    ascending.sort_unstable();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count() as f64 / nu as f64;
        let mut rr = 0.0;
        for &r in ascending.iter().filter(|&&r| r <= k) {
            rr += 1.0 / r as f64;
        }
        let mrr = rr / nu as f64;
        ensure(eval.metrics.hr[&k] == hits, format!("HR@{k}: {} vs {hits}", eval.metrics.hr[&k]))?;
        ensure(eval.metrics.mrr[&k] == mrr, format!("MRR@{k}: {} vs {mrr}", eval.metrics.mrr[&k]))?;
    }
    let direct = ranking_metrics(&ranks, ks).map_err(|e| e.to_string())?;
    ensure(direct == eval.metrics, "metrics from oracle ranks differ")
}

fn classification_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..300);
    let (p_pos, p_pred) = (rng.gen_range(0.0..=1.0), [0.0, 1.0, rng.gen_range(0.0..=1.0)][rng.gen_range(0..3)]);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(p_pos) as u8).collect();
    let preds: Vec<u8> = (0..n).map(|_| rng.gen_bool(p_pred) as u8).collect();
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        match (preds[i], labels[i]) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / n as f64;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let m = classification_metrics(&preds, &labels).map_err(|e| e.to_string())?;
    ensure(
        (m.accuracy, m.precision, m.f1, m.tp, m.fp, m.tn, m.fn_) == (accuracy, precision, f1, tp, fp, tn, fn_),
        format!("{m:?} vs oracle ({accuracy}, {precision}, {f1})"),
    )
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ks = [1, 5, 10, 50, 100, 200];
    for case in 0..1000 {
        ranking_case(&mut rng, &ks).map_err(|e| format!("ranking case {case}: {e}"))?;
    }
    for case in 0..1000 {
        classification_case(&mut rng).map_err(|e| format!("classification case {case}: {e}"))?;
    }
    Ok("1000 ranking cases (50 users x 200 candidates) and 1000 classification cases identical to brute force".into())
}

// 4

fn distance_oracle() -> Check {
    let d = 1024;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let scale = 10f64.powi(rng.gen_range(-3..3));
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-scale..scale)).collect();
        let (mut l1, mut l2, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..d {
            l1 += (a[i] - b[i]).abs();
            l2 += (a[i] - b[i]) * (a[i] - b[i]);
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let cos = dot / (na.sqrt() * nb.sqrt());
        let got = pair_distance("x", &a, &b);
        let errs = [(got.manhattan - l1).abs(), (got.euclidean - l2.sqrt()).abs(), (got.cosine.ok_or("undefined cosine")? - cos).abs()];
        for e in errs {
            ensure(e <= 1e-9, format!("case {case}: absolute error {e}"))?;
            worst = worst.max(e);
        }
    }
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let same = pair_distance("x", &v, &v);
    ensure(
        same.manhattan == 0.0 && same.euclidean == 0.0 && same.cosine == Some(1.0),
        format!("identity gives ({}, {}, {:?})", same.manhattan, same.euclidean, same.cosine),
    )?;
    let set: Vec<(String, Vec<f64>)> = (0..20).map(|k| (format!("s{k}"), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
    let pair = pair_from(d, &set, &set);
    let report = compare_sets(&pair.users, &pair.items).map_err(|e| e.to_string())?;
    ensure(
        (report.mean_manhattan, report.mean_euclidean, report.mean_cosine) == (0.0, 0.0, 1.0),
        format!("identical sets give ({}, {}, {})", report.mean_manhattan, report.mean_euclidean, report.mean_cosine),
    )?;
    Ok(format!("100 pairs at d=1024, worst absolute error {worst:.1e}; identity exact"))
}

// 5

const EPS: f64 = 1e-5;
const PROBES: usize = 24;

fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

fn slot(net: &mut Network, l: usize, is_w: bool, i: usize) -> &mut f64 {
    if is_w {
        &mut net.params[l].w[i]
    } else {
        &mut net.params[l].b[i]
    }
}

/// Central differences of Σ c·output. Every pass reseeds the training-mode
/// generator so dropout draws the same mask each time.
fn check_network(spec: NetworkSpec, seed: u64) -> Result<(f64, usize), String> {
    let mut net = Network::new(spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 3;
    let x = Tensor::matrix(batch, net.input_dim(), (0..batch * net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .map_err(|e| e.to_string())?;
    let forward = |n: &Network, x: &Tensor| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        n.forward(x, Mode::Train(&mut mask_rng)).unwrap()
    };
    let out_len = forward(&net, &x).output().values.len();
    let c: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |n: &Network, x: &Tensor| -> f64 { forward(n, x).output().values.iter().zip(&c).map(|(a, b)| a * b).sum() };
    let cache = forward(&net, &x);
    let upstream = Tensor::matrix(batch, out_len / batch, c.clone()).map_err(|e| e.to_string())?;
    let grads = net.backward(&cache, &upstream).map_err(|e| e.to_string())?;
    let dx = grads.input.clone().ok_or("no input gradient")?;

    let mut slots: Vec<(usize, bool, usize)> = Vec::new();
    for (l, p) in net.params.iter().enumerate() {
        slots.extend((0..p.w.len()).map(|i| (l, true, i)));
        slots.extend((0..p.b.len()).map(|i| (l, false, i)));
    }
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for k in 0..PROBES {
        if k % 2 == 0 && !slots.is_empty() {
            let (l, is_w, i) = slots[rng.gen_range(0..slots.len())];
            let orig = *slot(&mut net, l, is_w, i);
            *slot(&mut net, l, is_w, i) = orig + EPS;
            let up = loss(&net, &x);
            *slot(&mut net, l, is_w, i) = orig - EPS;
            let down = loss(&net, &x);
            *slot(&mut net, l, is_w, i) = orig;
            let analytic = if is_w { grads.params[l].w[i] } else { grads.params[l].b[i] };
            worst = worst.max(rel_err((up - down) / (2.0 * EPS), analytic));
        } else {
            let j = rng.gen_range(0..x.values.len());
            let mut xp = x.clone();
            xp.values[j] += EPS;
            let up = loss(&net, &xp);
            xp.values[j] -= 2.0 * EPS;
            let down = loss(&net, &xp);
            worst = worst.max(rel_err((up - down) / (2.0 * EPS), dx.values[j]));
        }
        probes += 1;
    }
    Ok((worst, probes))
}

fn check_bpr(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let mut v: Vec<f64> = (0..3 * d + 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lambda = 0.05;
    let eval = |v: &[f64]| bpr_triple_loss(&v[..d], &v[d..2 * d], &v[2 * d..3 * d], v[3 * d], v[3 * d + 1], lambda);
    let g = eval(&v);
    let analytic: Vec<f64> = g.d_pu.iter().chain(&g.d_qi).chain(&g.d_qj).copied().chain([g.d_bi, g.d_bj]).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let j = rng.gen_range(0..v.len());
        let orig = v[j];
        v[j] = orig + EPS;
        let up = eval(&v).loss;
        v[j] = orig - EPS;
        let down = eval(&v).loss;
        v[j] = orig;
        worst = worst.max(rel_err((up - down) / (2.0 * EPS), analytic[j]));
    }
    (worst, PROBES)
}

fn gradient_checks() -> Check {
    let dense = |i, o| LayerSpec::Dense { input: i, output: o };
    let cases: Vec<(&str, NetworkSpec)> = vec![
        ("dense", NetworkSpec { input_dim: 6, layers: vec![dense(6, 4)], seed: 1 }),
        ("relu", NetworkSpec { input_dim: 6, layers: vec![dense(6, 5), LayerSpec::Relu, dense(5, 2)], seed: 2 }),
        ("sigmoid", NetworkSpec { input_dim: 6, layers: vec![dense(6, 3), LayerSpec::Sigmoid], seed: 3 }),
        (
            "conv1d",
            NetworkSpec {
                input_dim: 14,
                layers: vec![
                    LayerSpec::Conv1d { channels_in: 1, channels_out: 3, kernel: 4, stride: 2 },
                    LayerSpec::Conv1d { channels_in: 3, channels_out: 2, kernel: 3, stride: 1 },
                ],
                seed: 4,
            },
        ),
        (
            "flatten",
            NetworkSpec {
                input_dim: 10,
                layers: vec![LayerSpec::Conv1d { channels_in: 1, channels_out: 2, kernel: 3, stride: 1 }, LayerSpec::Flatten, dense(16, 2)],
                seed: 5,
            },
        ),
        ("dropout", NetworkSpec { input_dim: 6, layers: vec![dense(6, 8), LayerSpec::Dropout { p: 0.3 }, dense(8, 2)], seed: 6 }),
    ];
    let mut summary = Vec::new();
    for (k, (name, spec)) in cases.into_iter().enumerate() {
        let (worst, probes) = check_network(spec, 50 + k as u64)?;
        ensure(probes >= 20 && worst < 1e-4, format!("{name}: relative error {worst:.2e} over {probes} probes"))?;
        summary.push(format!("{name} {worst:.0e}"));
    }
    let (worst, probes) = check_bpr(7);
    ensure(probes >= 20 && worst < 1e-4, format!("bpr triple: relative error {worst:.2e}"))?;
    summary.push(format!("bpr {worst:.0e}"));
    Ok(format!("worst relative errors over {PROBES} probes each: {}", summary.join(", ")))
}

// 6

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen_range(0.0..1.0));
    (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()
}

/// Users and items with 16-d Gaussian factors; each user's training items
/// are drawn from their top 50 and the test item is the best unseen one.
fn latent_world(seed: u64) -> (SplitBundle, EmbeddingPair) {
    let (nu, ni, d) = (300, 1000, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users: Vec<Vec<f64>> = (0..nu).map(|_| (0..d).map(|_| gauss(&mut rng)).collect()).collect();
    let items: Vec<Vec<f64>> = (0..ni)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let uid = |u: usize| format!("u{u:03}");
    let iid = |i: usize| format!("i{i:04}");
    let mut s = SplitBundle::default();
    for (u, pu) in users.iter().enumerate() {
        let score = |i: usize| pu.iter().zip(&items[i]).map(|(a, b)| a * b).sum::<f64>();
        let mut order: Vec<usize> = (0..ni).collect();
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
        let train: Vec<usize> = rand::seq::index::sample(&mut rng, 50, 5).into_iter().map(|k| order[k]).collect();
        let test = *order.iter().find(|i| !train.contains(i)).unwrap();
        s.user_train.insert(uid(u), train.iter().map(|&i| row(&uid(u), &iid(i))).collect());
        s.test.insert(uid(u), iid(test));
        s.history.insert(uid(u), train.iter().chain([&test]).map(|&i| iid(i)).collect());
    }
    for i in 0..ni {
        s.item_train.insert(iid(i), Vec::new());
    }
    let eu: Vec<(String, Vec<f64>)> = users.into_iter().enumerate().map(|(u, v)| (uid(u), v)).collect();
    let ei: Vec<(String, Vec<f64>)> = items.into_iter().enumerate().map(|(i, v)| (iid(i), v)).collect();
    (s, pair_from(d, &eu, &ei))
}

fn in_memory_config(task: Task, models: &[&str], variant: &str, settings: Settings) -> ExperimentConfig {
    ExperimentConfig {
        inputs: Inputs {
            splits: "in-memory".into(),
            store: None,
            embeddings: BTreeMap::from([(variant.to_string(), PathBuf::from("in-memory"))]),
        },
        settings: Settings { task, models: names(models), ..settings },
    }
}

fn direction_of_effect() -> Check {
    let (splits, truth) = latent_world(2024);
    let settings = Settings {
        modes: vec![InjectionMode::FIXED, InjectionMode::FINE_TUNED],
        repetitions: 10,
        base_seed: 100,
        ks: vec![10],
        optimizer: OptimizerConfig { epochs: 20, ..Default::default() },
        ..Default::default()
    };
    let cfg = in_memory_config(Task::Rank, &["ncf-mlp"], "truth", settings);
    let ws = Workspace::new(cfg, splits, BTreeMap::from([("truth".to_string(), truth)])).map_err(|e| e.to_string())?;
    let report = ws.run().map_err(|e| e.to_string())?;
    ensure(report.all_completed(), "some repetitions failed")?;
    let hr = |variant: &str, mode: &str| -> Result<f64, String> {
        let c = report.cell("ncf-mlp", variant, mode).ok_or(format!("missing cell {variant}/{mode}"))?;
        ensure(c.contributing == 10, format!("{variant}/{mode}: {} of 10 repetitions contributed", c.contributing))?;
        c.mean.get("hr@10").copied().ok_or(format!("{variant}/{mode} has no HR@10"))
    };
    let (random, fixed, tuned) = (hr("random", "random")?, hr("truth", "fixed")?, hr("truth", "fine-tuned")?);
    let detail = format!("HR@10 random {random:.3}, fixed {fixed:.3} ({:.0}%), fine-tuned {tuned:.3}", 100.0 * fixed / random);
    ensure(fixed >= 2.0 * random, format!("{detail}: fixed is below twice the baseline"))?;
    ensure(fixed >= tuned, format!("{detail}: fine-tuned beats fixed"))?;
    Ok(detail)
}

// 7

fn fixed_mode_contract() -> Check {
    let d = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let uids: Vec<String> = (0..30).map(|u| format!("u{u:02}")).collect();
    let iids: Vec<String> = (0..60).map(|i| format!("i{i:02}")).collect();
    let mut s = SplitBundle::default();
    for u in &uids {
        let picks = rand::seq::index::sample(&mut rng, iids.len(), 4).into_vec();
        s.user_train.insert(u.clone(), picks[..3].iter().map(|&i| row(u, &iids[i])).collect());
        s.test.insert(u.clone(), iids[picks[3]].clone());
        s.history.insert(u.clone(), picks.iter().map(|&i| iids[i].clone()).collect());
    }
    for i in &iids {
        s.item_train.insert(i.clone(), Vec::new());
    }
    let vecs = |ids: &[String], rng: &mut ChaCha8Rng| -> Vec<(String, Vec<f64>)> {
        ids.iter().map(|id| (id.clone(), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
    };
    let (eu, ei) = (vecs(&uids, &mut rng), vecs(&iids, &mut rng));
    let emb = pair_from(d, &eu, &ei);
    let mut runs = 0;
    for kind in RankerKind::ALL {
        for item_bias in [false, true] {
            if item_bias && kind != RankerKind::BprMf {
                continue;
            }
            let cfg = RankConfig { optimizer: OptimizerConfig { epochs: 3, ..Default::default() }, item_bias, ..Default::default() };
            let mut model = init_model(kind, &s, Init::Injected(&emb), InjectionMode::FIXED, &cfg, 11).map_err(|e| e.to_string())?;
            let (users, items) = (model.users.clone(), model.items.clone());
            let tower = model.tower.clone();
            train(&mut model, &s, &cfg).map_err(|e| format!("{kind}: {e}"))?;
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(bits(&users.values) == bits(&model.users.values), format!("{kind}: user table changed"))?;
            ensure(bits(&items.values) == bits(&model.items.values), format!("{kind}: item table changed"))?;
            if let (Some(before), Some(after)) = (&tower, &model.tower) {
                ensure(before.params != after.params, format!("{kind}: tower did not train"))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} fixed-mode runs left both tables bitwise unchanged"))
}

// 8

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fewshot-rec"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("fewshot-rec {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn offline_pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let csv = fixture_csv();
    cli(dir, &["ingest", "--in", csv.to_str().unwrap(), "--format", "csv", "--out", "store.bin"])?;
    cli(dir, &["split", "--store", "store.bin", "--cohort", "40", "--cap", "5", "--item-cap", "10", "--seed", "42", "--out", "splits"])?;
    cli(dir, &["gen-prompts", "--splits", "splits", "--out", "prompts.jsonl"])?;
    cli(dir, &["gen-reps", "--prompts", "prompts.jsonl", "--backend", "offline", "--out", "reps.jsonl"])?;
    cli(dir, &["embed", "--reps", "reps.jsonl", "--splits", "splits", "--variant", "rep+bert", "--backend", "fallback", "--out", "emb"])?;
    let config = serde_json::json!({
        "splits": "splits",
        "store": "store.bin",
        "embeddings": {"rep+bert": "emb"},
        "task": "rank",
        "models": ["bpr-mf", "ncf-mlp"],
        "repetitions": 2,
        "base_seed": 5,
        "optimizer": {"epochs": 5},
    });
    fs::write(dir.join("experiment.json"), config.to_string()).map_err(|e| e.to_string())?;
    cli(dir, &["report", "--config", "experiment.json", "--out", "report.md"])?;
    cli(dir, &["report", "--config", "experiment.json", "--out", "report.json"])?;
    let read = |f: &str| fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
    Ok((read("report.md")?, read("report.json")?))
}

fn offline_determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let first = offline_pipeline(a.path())?;
    let second = offline_pipeline(b.path())?;
    ensure(first.0 == second.0, "markdown reports differ")?;
    ensure(first.1 == second.1, "json reports differ")?;
    let report: RunReport = serde_json::from_slice(&first.1).map_err(|e| e.to_string())?;
    ensure(report.cells.len() == 6 && report.all_completed(), "unexpected report contents")?;
    Ok(format!(
        "two runs, {} cells, byte-identical markdown ({} bytes) and json ({} bytes)",
        report.cells.len(),
        first.0.len(),
        first.1.len()
    ))
}

// 9

fn split_invariants() -> Check {
    let (store, _) = corpus::ingest(&fixture_csv(), InputFormat::Csv).map_err(|e| e.to_string())?;
    let cfg = fixture_split_config();
    let (s, _) = corpus::build_splits(&store, &cfg).map_err(|e| e.to_string())?;
    ensure(!s.test.is_empty(), "empty cohort")?;
    let when = |u: &str, item: &str| -> Result<(u64, String), String> {
        store
            .user_history(u)
            .into_iter()
            .filter(|r| r.item_id == item)
            .map(|r| (r.timestamp, r.item_id.clone()))
            .max()
            .ok_or(format!("{u} never rated {item}"))
    };
    for (u, rows) in &s.user_train {
        let test = s.test.get(u).ok_or(format!("{u} has no test item"))?;
        let valid = s.validation.get(u).ok_or(format!("{u} has no validation item"))?;
        let (t, v) = (when(u, test)?, when(u, valid)?);
        ensure(t >= v, format!("{u}: test precedes validation"))?;
        let latest = rows.iter().map(|r| (r.timestamp, r.item_id.clone())).max().ok_or(format!("{u} has no training rows"))?;
        ensure(v >= latest, format!("{u}: validation precedes a training row"))?;
        let mut history: Vec<(u64, String)> = store.user_history(u).into_iter().map(|r| (r.timestamp, r.item_id.clone())).collect();
        history.sort();
        ensure(
            history.last() == Some(&t) && history.iter().rev().nth(1) == Some(&v),
            format!("{u}: held-out items are not the two most recent"),
        )?;
        ensure((1..=cfg.user_cap).contains(&rows.len()), format!("{u}: {} training rows", rows.len()))?;
    }
    ensure(s.user_train.len() == s.test.len() && s.test.len() == s.validation.len(), "cohort tables differ in size")?;
    let referenced = s.user_train.values().flatten().map(|r| &r.item_id).chain(s.validation.values()).chain(s.test.values());
    for item in referenced {
        ensure(s.item_train.contains_key(item), format!("{item} missing from item_train"))?;
    }
    for (item, rows) in &s.item_train {
        ensure(rows.len() <= cfg.item_cap, format!("{item}: {} rows over the cap", rows.len()))?;
    }
    let (again, _) = corpus::build_splits(&store, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    s.save(a.path()).map_err(|e| e.to_string())?;
    again.save(b.path()).map_err(|e| e.to_string())?;
    for f in [corpus::USER_TRAIN_FILE, corpus::VALID_FILE, corpus::TEST_FILE, corpus::ITEM_TRAIN_FILE, corpus::HISTORY_FILE] {
        ensure(fs::read(a.path().join(f)).ok() == fs::read(b.path().join(f)).ok(), format!("{f} differs between runs"))?;
    }
    Ok(format!("{} users, {} items: chronology, coverage, floor, caps and determinism hold", s.test.len(), s.item_train.len()))
}

// 10

fn non_convergence_reporting() -> Check {
    let (store, _) = corpus::ingest(&fixture_csv(), InputFormat::Csv).map_err(|e| e.to_string())?;
    let (splits, _) = corpus::build_splits(&store, &fixture_split_config()).map_err(|e| e.to_string())?;
    let prompts = build_all_prompts(&splits, &PromptConfig::default()).map_err(|e| e.to_string())?;
    let reps = generate_all(&prompts, &Backend::Offline, &GenerationConfig::default()).representations;
    let emb = build_variant(
        &splits,
        &VariantSource::Representations(&reps),
        &Embedder::HashFallback,
        Variant::RepBert,
        &ControlOptions::default(),
    )
    .map_err(|e| e.to_string())?
    .pair;

    let mut settings =
        Settings { repetitions: 3, base_seed: 1, optimizer: OptimizerConfig { epochs: 30, ..Default::default() }, ..Default::default() };
    settings.overrides.insert("cnn".into(), serde_json::json!({"learning_rate": 10.0}));
    let cfg = in_memory_config(Task::Interact, &["linear", "mlp", "cnn"], "rep+bert", settings);
    let ws = Workspace::new(cfg, splits, BTreeMap::from([("rep+bert".to_string(), emb)])).map_err(|e| e.to_string())?;
    let report = ws.run().map_err(|e| e.to_string())?;
    ensure(report.cells.len() == 6, format!("{} cells", report.cells.len()))?;
    ensure(report.all_completed(), "the grid did not complete")?;
    let mut flagged = Vec::new();
    for c in &report.cells {
        let label = format!("{}/{}", c.key.model, c.key.variant);
        if c.key.model == "cnn" {
            ensure(c.diverged > 0, format!("{label} is not flagged"))?;
            flagged.push(format!("{label} {}/{}", c.diverged, c.reps.len()));
        } else {
            ensure(
                c.diverged == 0,
                format!("{label} is flagged: {:?}", c.reps.iter().filter_map(|r| r.divergence.as_ref()).collect::<Vec<_>>()),
            )?;
            ensure(c.contributing == c.reps.len() && c.mean.len() == 3, format!("{label} lacks metrics"))?;
            ensure(c.mean.values().all(|v| v.is_finite() && (0.0..=1.0).contains(v)), format!("{label} has invalid metrics"))?;
        }
    }
    Ok(format!("grid completed; flagged {}", flagged.join(", ")))
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let results = [
        run(1, "degenerate-classifier anchor", s(1), degenerate_classifier_anchor),
        run(2, "improvement-percentage anchor", s(1), improvement_anchor),
        run(3, "metric oracle equivalence", s(10), metric_oracles),
        run(4, "distance oracle equivalence", s(5), distance_oracle),
        run(5, "gradient checks", s(30), gradient_checks),
        run(6, "direction of effect", s(300), direction_of_effect),
        run(7, "fixed-mode contract", s(10), fixed_mode_contract),
        run(8, "end-to-end offline determinism", s(120), offline_determinism),
        run(9, "split invariants", s(1), split_invariants),
        run(10, "non-convergence reporting", s(60), non_convergence_reporting),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
