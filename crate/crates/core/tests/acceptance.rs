//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 8, 9, 10 and 12 train the reference configuration and take
//! several minutes on one core; their runs are shared between criteria.
//! Criterion numbers given as arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 5 11`.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};

use mnn_core::diagnostics::{inconsistency, weight_entropy};
use mnn_core::exec::Execution;
use mnn_core::harness::{emit_report, generate_dataset, train, DatasetSpec, Method, RunConfig, RunManifest, Selection, Trainer};
use mnn_core::model::{Architecture, EncoderPair, LrSchedule};
use mnn_core::objective::{
    evaluate_loss, mix_with, mnn_loss, row_objective, simplified_loss, weights_wse, Lambda, TargetNorm,
    WeightScheme,
};
use mnn_core::rng::Rng as ChaRng;
use mnn_core::support_set::{Neighbor, NeighborOrder, NeighborSet, SupportSet};
use mnn_core::vecmath::{dot, normalized, sq_dist, EmbeddingBatch};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaRng {
    ChaRng::seed_from_u64(seed)
}

fn unit(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        if let Ok(u) = normalized(&v) {
            return u;
        }
    }
}

fn neighbor_set(anchor: &[f64], members: &[Vec<f64>]) -> NeighborSet {
    NeighborSet {
        anchor: anchor.to_vec(),
        members: members
            .iter()
            .enumerate()
            .map(|(i, e)| Neighbor {
                embedding: e.clone(),
                similarity: dot(anchor, e),
                support_index: i as u64,
                label: None,
            })
            .collect(),
        order: NeighborOrder::CosineDesc,
        shortfall: false,
    }
}

// 1
fn byol_equivalence() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dim = r.random_range(2..33);
        let (p, z) = (unit(&mut r, dim), unit(&mut r, dim));
        let loss = mnn_loss(&p, &z, &[], &[1.0]).unwrap().total;
        worst = worst.max((loss - (2.0 - 2.0 * dot(&p, &z))).abs());
    }
    outcome(worst <= 1e-9, format!("max |L - (2 - 2cos)| = {worst:.2e} over 1000 pairs (tol 1e-9)"))
}

/// Small dataset and toy stack so one step costs milliseconds.
fn toy_config(method: Method, k: usize, seed: u64) -> RunConfig {
    let dataset = DatasetSpec {
        n_train: 256,
        n_test: 20,
        ambient_dim: 12,
        latent_dim: 4,
        hidden_dim: 16,
        seed,
        ..DatasetSpec::default()
    };
    RunConfig {
        architecture: Architecture::toy(12),
        dataset,
        method,
        k,
        support_capacity: 64,
        batch_size: 16,
        epochs: 40,
        warmup_epochs: 1,
        seed,
        ..RunConfig::default()
    }
}

fn toy_trainer(method: Method, k: usize, seed: u64) -> Trainer {
    let c = toy_config(method, k, seed);
    let data = generate_dataset(&c.dataset).unwrap();
    Trainer::new(c, data).unwrap()
}

/// Mean of squared distances from the prediction to the positive and to the
/// `k` most similar support entries, averaged over rows and both view
/// directions.
fn mean_sq_distance_loss(t: &Trainer, x1: &[Vec<f64>], x2: &[Vec<f64>], k: usize) -> f64 {
    let entries: Vec<_> = t.support.entries().collect();
    let mut total = 0.0;
    for (xs, xt) in [(x1, x2), (x2, x1)] {
        let teacher = t.pair.teacher.embed_batch(xt, Execution::Sequential).unwrap();
        let pass = t.pair.student.forward_batch(xs, Execution::Sequential).unwrap();
        let mut sum = 0.0;
        for (zt, p) in teacher.iter().zip(&pass.predictions) {
            let z = normalized(zt).unwrap();
            let p = normalized(p).unwrap();
            let mut ranked: Vec<(f64, u64, &[f64])> =
                entries.iter().map(|e| (dot(&z, &e.embedding), e.age, e.embedding.as_slice())).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut d = sq_dist(&p, &z);
            for (_, _, n) in &ranked[..k] {
                d += sq_dist(&p, n);
            }
            sum += d / (k + 1) as f64;
        }
        total += sum / teacher.len() as f64;
    }
    total / 2.0
}

// 2
fn msf_equivalence() -> Outcome {
    let spec = Method::Msf.spec();
    if spec.scheme != WeightScheme::Mse || spec.mixing || spec.selection != Selection::Cosine {
        return outcome(false, "method table does not map msf to (MSE, no mix, cosine)");
    }
    let mut t = toy_trainer(Method::Msf, 5, 3);
    let mut r = rng(2);
    // fill the support set so every step uses the full K
    for _ in 0..4 {
        let idx: Vec<usize> = (0..16).map(|_| r.random_range(0..256)).collect();
        t.step(&idx, None).unwrap();
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let idx: Vec<usize> = (0..16).map(|_| r.random_range(0..256)).collect();
        let batch = t.make_batch(t.global_step, &idx);
        let expected = mean_sq_distance_loss(&t, &batch.x1, &batch.x2, 5);
        let got = t.step(&idx, None).unwrap();
        worst = worst.max((got - expected).abs());
    }
    outcome(worst <= 1e-12, format!("max per-step |loss - mean sq distance| = {worst:.2e} over 100 batches (tol 1e-12)"))
}

// 3
fn mixture_decomposition() -> Outcome {
    let mut r = rng(3);
    let (mut worst_b2, mut worst_b4): (f64, f64) = (0.0, 0.0);
    for _ in 0..10_000 {
        let dim = r.random_range(2..17);
        let k = r.random_range(1..6);
        let lambda: f64 = r.random_range(0.0..1.0);
        let p = unit(&mut r, dim);
        let z = unit(&mut r, dim);
        let zs: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut r, dim)).collect();
        let nb = neighbor_set(&z, &zs);
        let mixed = mix_with(&z, &nb, Some(&Lambda::Shared(lambda)));
        let full = evaluate_loss(&p, &z, &mixed, &weights_wse(k), TargetNorm::Raw).unwrap();
        let mut cross_sum = 0.0;
        for (zi, term) in zs.iter().zip(&full.neighbor_terms) {
            let a = sq_dist(&p, zi);
            let b = sq_dist(&p, &z);
            let di: Vec<f64> = p.iter().zip(zi).map(|(x, y)| x - y).collect();
            let d: Vec<f64> = p.iter().zip(&z).map(|(x, y)| x - y).collect();
            let cross = 2.0 * lambda * (1.0 - lambda) * dot(&di, &d);
            cross_sum += cross;
            let split = lambda * lambda * a + (1.0 - lambda).powi(2) * b + cross;
            worst_b2 = worst_b2.max((term - split).abs());
        }
        let closed = simplified_loss(&p, &z, &zs, lambda).unwrap();
        worst_b4 = worst_b4.max((closed - (full.total - cross_sum / k as f64)).abs());
    }
    outcome(
        worst_b2 <= 1e-12 && worst_b4 <= 1e-9,
        format!("per-neighbor split residual {worst_b2:.2e} (tol 1e-12), closed form residual {worst_b4:.2e} (tol 1e-9)"),
    )
}

// 4
fn lambda_endpoints() -> Outcome {
    let mut r = rng(4);
    let (mut worst0, mut worst1): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let dim = r.random_range(2..17);
        let k = r.random_range(1..8);
        let p: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let z = unit(&mut r, dim);
        let zs: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut r, dim)).collect();
        let nb = neighbor_set(&z, &zs);
        let at0 = row_objective(&p, &z, &nb, &WeightScheme::Wse, Some(Lambda::Shared(0.0)), None).unwrap();
        let pn = normalized(&p).unwrap();
        worst0 = worst0.max((at0.breakdown.total - 2.0 * sq_dist(&pn, &z)).abs());
        let at1 = row_objective(&p, &z, &nb, &WeightScheme::Wse, Some(Lambda::Shared(1.0)), None).unwrap();
        let mut unmixed = sq_dist(&pn, &z);
        for zi in &zs {
            unmixed += sq_dist(&pn, zi) / k as f64;
        }
        worst1 = worst1.max((at1.breakdown.total - unmixed).abs());
    }
    outcome(
        worst0 <= 1e-9 && worst1 <= 1e-9,
        format!("lambda=0 residual {worst0:.2e}, lambda=1 residual {worst1:.2e} (tol 1e-9)"),
    )
}

// 5
fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 1..=3 {
        let mut t = toy_trainer(Method::Mnn, 3, seed);
        let mut r = rng(50 + seed);
        for _ in 0..3 {
            let idx: Vec<usize> = (0..16).map(|_| r.random_range(0..256)).collect();
            t.step(&idx, None).unwrap();
        }
        let idx: Vec<usize> = (0..8).map(|_| r.random_range(0..256)).collect();
        let batch = t.make_batch(t.global_step, &idx);
        let plan = t.plan(t.global_step);
        assert_eq!(plan.k, 3);
        let analytic = t.objective(&batch, &plan, false).unwrap().grads.flat();
        let h = 1e-6;
        for i in 0..t.pair.student.n_params() {
            let orig = t.pair.student.flat_params()[i];
            *t.pair.student.param_mut(i) = orig + h;
            let up = t.objective(&batch, &plan, false).unwrap().loss;
            *t.pair.student.param_mut(i) = orig - h;
            let dn = t.objective(&batch, &plan, false).unwrap().loss;
            *t.pair.student.param_mut(i) = orig;
            let fd = (up - dn) / (2.0 * h);
            // exact zeros (biases feeding batch norm) leave only round-off in fd
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-5);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over {checked} parameters in 3 instances (tol 1e-4)"))
}

// 6
fn topk_oracle() -> Outcome {
    let mut r = rng(6);
    let mut mismatches = 0;
    let mut total = 0;
    for k in [1, 5, 10] {
        for _ in 0..334 {
            let mut set = SupportSet::new(256, 16).unwrap();
            let rows: Vec<Vec<f64>> = (0..256).map(|_| unit(&mut r, 16)).collect();
            set.refresh(&EmbeddingBatch::from_rows(16, &rows).unwrap(), None).unwrap();
            let q = unit(&mut r, 16);
            let got = set.topk_neighbors(&q, k).unwrap().indices();
            let mut all: Vec<(f64, u64)> = set.entries().map(|e| (dot(&q, &e.embedding), e.age)).collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<u64> = all[..k].iter().map(|x| x.1).collect();
            mismatches += usize::from(got != want);
            total += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} index mismatches in {total} queries"))
}

// 7
fn diagnostics_analytics() -> Outcome {
    let uniform = weight_entropy(&[0.2; 5]).unwrap();
    let one_hot = weight_entropy(&[0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let a: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
    let s = neighbor_set(&[1.0, 0.0], &a);
    let same = inconsistency(&s, &s).unwrap();
    let pair = neighbor_set(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mut reversed = pair.clone();
    reversed.members.reverse();
    let flip = inconsistency(&pair, &reversed).unwrap();
    let pass = (uniform - 5f64.ln()).abs() <= 1e-12 && one_hot == 0.0 && same == 0.0 && flip == 1.0;
    outcome(
        pass,
        format!("uniform {uniform:.15} (ln 5), one-hot {one_hot}, identical {same}, reversed {flip}"),
    )
}

// 11
fn ema_and_schedule() -> Outcome {
    let arch = Architecture::toy(6);
    let mut r = rng(11);
    let mut copy = EncoderPair::init(&arch, 0.0, &mut r).unwrap();
    let mut frozen = EncoderPair::init(&arch, 1.0, &mut r).unwrap();
    for i in 0..copy.student.n_params() {
        *copy.student.param_mut(i) += r.random_range(-1.0..1.0);
        *frozen.student.param_mut(i) += r.random_range(-1.0..1.0);
    }
    let before = frozen.teacher.clone();
    copy.ema_update();
    frozen.ema_update();
    let copied = copy.teacher.backbone.params() == copy.student.backbone.params()
        && copy.teacher.projector.params() == copy.student.projector.params();
    let unchanged = frozen.teacher.backbone.params() == before.backbone.params()
        && frozen.teacher.projector.params() == before.projector.params();
    let c = RunConfig::default();
    let s = LrSchedule::new(c.base_lr, c.warmup_epochs, 50, c.steps_per_epoch()).unwrap();
    let at_warm = s.lr_at(s.warmup_steps() - 1).unwrap();
    let last = s.lr_at(s.total_steps() - 1).unwrap();
    let pass = copied && unchanged && at_warm == c.base_lr && last <= 1e-3 * c.base_lr;
    outcome(
        pass,
        format!(
            "m=0 copies: {copied}, m=1 frozen: {unchanged}, lr at warmup end {at_warm} (base {}), final lr / base = {:.2e}",
            c.base_lr,
            last / c.base_lr
        ),
    )
}

/// Reference-config runs, keyed by (method, K, seed).
#[derive(Default)]
struct Runs {
    cache: HashMap<(Method, usize, u64), RunManifest>,
}

impl Runs {
    fn get(&mut self, method: Method, k: usize, seed: u64) -> &RunManifest {
        self.cache.entry((method, k, seed)).or_insert_with(|| {
            let c = RunConfig { method, k, seed, ..RunConfig::default() };
            let start = Instant::now();
            let m = train(&c).expect("reference run").manifest;
            eprintln!(
                "  trained {} in {:.0}s: knn {:.4}, purity {:?}",
                m.run_id,
                start.elapsed().as_secs_f64(),
                m.final_eval.knn_acc,
                m.epochs.last().and_then(|e| e.purity)
            );
            m
        })
    }

    fn mean(&mut self, method: Method, k: usize, f: impl Fn(&RunManifest) -> f64) -> f64 {
        SEEDS.iter().map(|&s| f(self.get(method, k, s))).sum::<f64>() / SEEDS.len() as f64
    }
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn knn(m: &RunManifest) -> f64 {
    m.final_eval.knn_acc
}

// 8
fn purity_vs_k(runs: &mut Runs) -> Outcome {
    let purity = |m: &RunManifest| m.epochs.last().and_then(|e| e.purity).unwrap_or(f64::NAN);
    let p1 = runs.mean(Method::Mnn, 1, purity);
    let p10 = runs.mean(Method::Mnn, 10, purity);
    outcome(p1 >= p10 + 0.02, format!("final purity K=1 {p1:.4}, K=10 {p10:.4}, margin {:.4} (need >= 0.02)", p1 - p10))
}

// 9
fn mixture_benefit(runs: &mut Runs) -> Outcome {
    let k = RunConfig::default().k;
    let mnn = runs.mean(Method::Mnn, k, knn);
    let no_mix = runs.mean(Method::MnnNoMix, k, knn);
    let msf = runs.mean(Method::Msf, k, knn);
    outcome(
        mnn >= no_mix + 0.01 && mnn >= msf + 0.01,
        format!("knn mnn {mnn:.4}, no-mix {no_mix:.4}, msf {msf:.4} (need mnn ahead of both by >= 0.01)"),
    )
}

// 10
fn selection_ordering(runs: &mut Runs) -> Outcome {
    let k = RunConfig::default().k;
    let oracle = runs.mean(Method::MnnOracle, k, knn);
    let cosine = runs.mean(Method::Mnn, k, knn);
    let random = runs.mean(Method::MnnRandom, k, knn);
    outcome(
        oracle >= cosine && cosine >= random && oracle - random >= 0.02,
        format!("knn oracle {oracle:.4}, cosine {cosine:.4}, random {random:.4} (need ordered, oracle - random >= 0.02)"),
    )
}

// 12
fn determinism(runs: &mut Runs) -> Outcome {
    let first = runs.get(Method::Mnn, RunConfig::default().k, 1).clone();
    let second = train(&RunConfig::default()).expect("reference run").manifest;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = emit_report(&[first], a.path()).unwrap();
    let fb = emit_report(&[second], b.path()).unwrap();
    let same = std::fs::read(fa.metrics).unwrap() == std::fs::read(fb.metrics).unwrap();
    outcome(same, format!("metrics.csv byte-identical across two seed-1 runs: {same}"))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut runs = Runs::default();
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !only.is_empty() && !only.contains(&id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        println!(
            "{} {id:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    };
    report(1, "byol degenerate loss", &mut byol_equivalence);
    report(2, "msf degenerate loss", &mut msf_equivalence);
    report(3, "mixture loss decomposition", &mut mixture_decomposition);
    report(4, "lambda endpoints", &mut lambda_endpoints);
    report(5, "end-to-end gradients", &mut gradient_check);
    report(6, "neighbor query vs full sort", &mut topk_oracle);
    report(7, "entropy and inconsistency", &mut diagnostics_analytics);
    report(8, "purity decreases with K", &mut || purity_vs_k(&mut runs));
    report(9, "mixing beats no mixing and msf", &mut || mixture_benefit(&mut runs));
    report(10, "oracle >= cosine >= random selection", &mut || selection_ordering(&mut runs));
    report(11, "ema extremes and lr schedule", &mut ema_and_schedule);
    report(12, "deterministic metrics.csv", &mut || determinism(&mut runs));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
