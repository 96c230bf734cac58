//! Acceptance checks, runnable from the binary and from the test suite.
//!
//! Each check returns a [`CheckOutcome`] whose `detail` holds only
//! deterministic measurements, so [`outcomes_csv`] is byte-stable across
//! invocations. Wall-clock time is reported separately.

use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::ExperimentConfig;
use crate::datagen::{draw_base_pool, Sample, World};
use crate::diffusion::{
    ancestral_sample, guided_epsilon, loss_and_grads_on, make_schedule, pair_conditions, pretrain,
    DenoiseExample, Denoiser, DenoiserShape, DiffusionHP, Generator, NoiseSchedule,
    SurrogateGenerator,
};
use crate::encoder::{class_mean_embeddings, FrozenEncoder};
use crate::error::Result;
use crate::experiment::{run_experiment, sweep, SweepAxis, SweepOutput};
use crate::orchestrator::{run_method, Benchmark, BenchmarkSpec, GeneratorKind, MethodId, RunConfig};
use crate::seeding::{self, Rng};
use crate::ssr::{importance_score, select_exemplars, top_p_indices, ScoreKind};
use crate::trainer::{
    ce_loss_and_grads, estimate_fisher, ewc_penalty, proximal_penalty, train_joint, train_naive,
    train_osifl, train_regularized, AnchorState, Classifier, TrainHP,
};

pub const CHECK_COUNT: usize = 11;
const SELFTEST_SEED: u64 = 20_240_601;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {}  {}  ({:.2}s)",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn outcome(id: usize, name: &'static str, start: Instant, limit: Option<f64>, passed: bool, mut detail: String) -> CheckOutcome {
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed.as_secs_f64() < l);
    if !in_time {
        let _ = write!(detail, "; over the {}s budget", limit.unwrap_or_default());
    }
    CheckOutcome {
        id,
        name,
        passed: passed && in_time,
        detail,
        elapsed,
    }
}

fn rng(tag: u64) -> Rng {
    seeding::stream(SELFTEST_SEED, &[tag])
}

fn normal_vec(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn random_classifier(rng: &mut Rng, dim_x: usize, dim_e: usize, classes: usize) -> Classifier {
    let enc = Arc::new(FrozenEncoder::new(dim_x, dim_e, rng.random()).expect("valid encoder"));
    let ids: Vec<usize> = (0..classes).collect();
    let mut c = Classifier::with_classes(enc, &ids).expect("valid classes");
    let p = normal_vec(c.param_count(), 1.0, rng);
    c.set_params(p).expect("matching length");
    c
}

fn random_samples(rng: &mut Rng, n: usize, dim_x: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            x: normal_vec(dim_x, 2.0, rng),
            y: rng.random_range(0..classes),
            domain: None,
            task: None,
        })
        .collect()
}

/// Lexicographically first size-`p` subset with the maximal score sum.
fn exhaustive_best(scores: &[f64], p: usize) -> Vec<usize> {
    let n = scores.len();
    let p = p.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut combo: Vec<usize> = (0..p).collect();
    loop {
        let sum: f64 = combo.iter().map(|&i| scores[i]).sum();
        if best.as_ref().is_none_or(|(b, _)| sum > *b) {
            best = Some((sum, combo.clone()));
        }
        let Some(i) = (0..p).rev().find(|&i| combo[i] < n - p + i) else {
            break;
        };
        combo[i] += 1;
        for j in i + 1..p {
            combo[j] = combo[j - 1] + 1;
        }
    }
    best.map(|(_, c)| c).unwrap_or_default()
}

/// 1: top-p selection equals the exhaustive subset argmax.
pub fn check_selection_optimality() -> CheckOutcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let (mut cases, mut mismatches) = (0usize, 0usize);
    for n in 1..=8 {
        for p in 0..=3 {
            for trial in 0..40 {
                // Integer scores force ties; real scores exercise the scorer.
                let scores: Vec<f64> = if trial % 2 == 0 {
                    (0..n).map(|_| rng.random_range(0..4) as f64).collect()
                } else {
                    (0..n).map(|_| rng.random::<f64>()).collect()
                };
                cases += 1;
                mismatches += usize::from(top_p_indices(&scores, p) != exhaustive_best(&scores, p));
            }
            let c = random_classifier(&mut rng, 4, 6, 3);
            let samples = random_samples(&mut rng, n, 4, 3);
            let scores: Vec<f64> = samples
                .iter()
                .map(|s| importance_score(&c, s).expect("covered class"))
                .collect();
            let chosen: Vec<usize> = select_exemplars(&c, &samples, p, ScoreKind::GradientNorm)
                .expect("valid selection")
                .iter()
                .map(|s| s.index)
                .collect();
            cases += 1;
            mismatches += usize::from(chosen != exhaustive_best(&scores, p));
        }
    }
    outcome(
        1,
        "selection optimality",
        start,
        Some(5.0),
        mismatches == 0,
        format!("{cases} cases; {mismatches} mismatches"),
    )
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn max_fd_error(params: &mut [f64], grad: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..params.len() {
        let orig = params[j];
        params[j] = orig + h;
        let up = f(params);
        params[j] = orig - h;
        let down = f(params);
        params[j] = orig;
        worst = worst.max(relative_error(grad[j], (up - down) / (2.0 * h)));
    }
    worst
}

/// 2: analytic gradients against central differences.
pub fn check_gradients() -> CheckOutcome {
    let start = Instant::now();
    let mut rng = rng(2);
    let instances = 100;
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let classes = rng.random_range(2..5);
        let dim_e = rng.random_range(2..5);
        let mut c = random_classifier(&mut rng, 3, dim_e, classes);
        let n = rng.random_range(1..6);
        let batch = random_samples(&mut rng, n, 3, classes);
        let (_, g) = ce_loss_and_grads(&c, &batch).expect("valid batch");
        let mut p = c.params().to_vec();
        let e = max_fd_error(&mut p, &g, |q| {
            c.set_params(q.to_vec()).expect("same length");
            ce_loss_and_grads(&c, &batch).expect("valid batch").0
        });
        worst[0] = worst[0].max(e);

        let n = c.param_count();
        let anchor = AnchorState {
            params: normal_vec(n, 1.0, &mut rng),
            fisher: (0..n).map(|_| rng.random::<f64>()).collect(),
        };
        let lambda = rng.random_range(0.01..2.0);
        let mut theta = normal_vec(n, 1.0, &mut rng);
        let (_, g) = ewc_penalty(&anchor, &theta, lambda).expect("same length");
        let e = max_fd_error(&mut theta, &g, |q| ewc_penalty(&anchor, q, lambda).expect("same length").0);
        worst[1] = worst[1].max(e);

        let center = normal_vec(n, 1.0, &mut rng);
        let mu = rng.random_range(0.001..1.0);
        let (_, g) = proximal_penalty(&center, &theta, mu).expect("same length");
        let e = max_fd_error(&mut theta, &g, |q| proximal_penalty(&center, q, mu).expect("same length").0);
        worst[2] = worst[2].max(e);

        let shape = DenoiserShape {
            dim_x: rng.random_range(1..4),
            dim_e: rng.random_range(1..4),
            hidden: rng.random_range(1..5),
            time_dim: 2 * rng.random_range(0..3),
        };
        let sched = make_schedule(rng.random_range(2..20), 1e-4, 0.2).expect("valid schedule");
        let mut d = Denoiser::new(shape, &mut rng).expect("valid shape");
        let examples: Vec<DenoiseExample> = (0..rng.random_range(1..4))
            .map(|_| DenoiseExample {
                x0: normal_vec(shape.dim_x, 1.0, &mut rng),
                z: rng.random_range(1..=sched.len()),
                eps: normal_vec(shape.dim_x, 1.0, &mut rng),
                cond: normal_vec(shape.dim_e, 1.0, &mut rng),
                dropped: false,
            })
            .collect();
        let (_, g) = loss_and_grads_on(&d, &sched, &examples).expect("valid batch");
        let mut p = d.params().to_vec();
        let e = max_fd_error(&mut p, &g, |q| {
            d.params_mut().copy_from_slice(q);
            loss_and_grads_on(&d, &sched, &examples).expect("valid batch").0
        });
        worst[3] = worst[3].max(e);
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        2,
        "gradient correctness",
        start,
        Some(30.0),
        max < 1e-4,
        format!(
            "{instances} instances each; max rel err ce {:.2e} ewc {:.2e} prox {:.2e} denoiser {:.2e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn moments(draws: &[Vec<f64>], j: usize) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n;
    let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn sequential_noise(schedule: &NoiseSchedule, x0: &[f64], z: usize, rng: &mut Rng) -> Vec<f64> {
    let mut x = x0.to_vec();
    for step in 1..=z {
        let (a, b) = (
            schedule.alpha(step).expect("in range").sqrt(),
            schedule.beta(step).expect("in range").sqrt(),
        );
        for xi in &mut x {
            let e: f64 = rng.sample(StandardNormal);
            *xi = a * *xi + b * e;
        }
    }
    x
}

/// 3: closed-form noising agrees with the step-by-step chain.
pub fn check_forward_consistency() -> CheckOutcome {
    let start = Instant::now();
    let mut rng = rng(3);
    let draws = 10_000;
    let (mut worst, mut failures, mut comparisons) = (0.0f64, 0usize, 0usize);
    for _ in 0..5 {
        let steps = rng.random_range(5..60);
        let lo = rng.random_range(1e-4..0.01);
        let hi = rng.random_range(lo..0.3);
        let sched = make_schedule(steps, lo, hi).expect("valid schedule");
        let z = rng.random_range(1..=steps);
        let x0 = normal_vec(3, 2.0, &mut rng);
        let closed: Vec<Vec<f64>> = (0..draws)
            .map(|_| {
                let eps = normal_vec(3, 1.0, &mut rng);
                crate::diffusion::forward_noise(&sched, &x0, z, &eps).expect("valid step")
            })
            .collect();
        let chain: Vec<Vec<f64>> = (0..draws).map(|_| sequential_noise(&sched, &x0, z, &mut rng)).collect();
        let n = draws as f64;
        for j in 0..3 {
            let (m1, v1) = moments(&closed, j);
            let (m2, v2) = moments(&chain, j);
            let se_mean = (v1 / n + v2 / n).sqrt();
            let se_var = (2.0 * v1 * v1 / (n - 1.0) + 2.0 * v2 * v2 / (n - 1.0)).sqrt();
            for dev in [(m1 - m2).abs() / se_mean, (v1 - v2).abs() / se_var] {
                comparisons += 1;
                worst = worst.max(dev);
                failures += usize::from(dev > 3.0);
            }
        }
    }
    outcome(
        3,
        "diffusion forward consistency",
        start,
        Some(30.0),
        failures == 0,
        format!("{comparisons} comparisons over 5 schedules; max deviation {worst:.3} SE"),
    )
}

/// 4: guidance with `w = 1` is conditional, with a null condition is
/// unconditional.
pub fn check_guidance_identities() -> CheckOutcome {
    let start = Instant::now();
    let mut rng = rng(4);
    let (mut worst_w1, mut worst_null) = (0.0f64, 0.0f64);
    let cases = 200;
    for _ in 0..cases {
        let shape = DenoiserShape {
            dim_x: rng.random_range(1..6),
            dim_e: rng.random_range(1..6),
            hidden: rng.random_range(1..9),
            time_dim: 2 * rng.random_range(0..4),
        };
        let mut d = Denoiser::new(shape, &mut rng).expect("valid shape");
        let p = normal_vec(d.param_count(), 1.5, &mut rng);
        d.params_mut().copy_from_slice(&p);
        let x = normal_vec(shape.dim_x, 1.0, &mut rng);
        let cond = normal_vec(shape.dim_e, 1.0, &mut rng);
        let z = rng.random_range(1..50);
        let conditional = d.predict(&x, z, &cond).expect("valid input");
        let guided = guided_epsilon(&d, &x, z, &cond, 1.0).expect("w = 1");
        for (a, b) in guided.iter().zip(&conditional) {
            worst_w1 = worst_w1.max((a - b).abs());
        }
        let w = 1.0 + rng.random::<f64>() * 9.0;
        let null = d.null_condition();
        let uncond = d.predict(&x, z, &null).expect("valid input");
        let guided = guided_epsilon(&d, &x, z, &null, w).expect("w >= 1");
        for (a, b) in guided.iter().zip(&uncond) {
            worst_null = worst_null.max((a - b).abs());
        }
    }
    outcome(
        4,
        "guidance identities",
        start,
        None,
        worst_w1 <= 1e-12 && worst_null <= 1e-12,
        format!("{cases} random denoisers; max |w=1 - cond| {worst_w1:.1e}; max |null - uncond| {worst_null:.1e}"),
    )
}

/// 5: the replay, naive, joint and regularized objectives coincide in
/// their degenerate cases.
pub fn check_reduction_chain() -> CheckOutcome {
    let start = Instant::now();
    let mut rng = rng(5);
    let hp = TrainHP {
        epochs_per_task: 5,
        batch_size: 8,
        ..TrainHP::default()
    };
    let mut worst = 0.0f64;
    let trials = 10;
    for trial in 0..trials {
        let base = random_classifier(&mut rng, 5, 8, 3);
        let data = random_samples(&mut rng, 40, 5, 3);
        let anchor = estimate_fisher(&base, &data[..10]).expect("non-empty");
        let seed = 1000 + trial;
        let run = |f: &dyn Fn(&mut Classifier, &mut Rng)| {
            let mut c = base.clone();
            f(&mut c, &mut seeding::stream(seed, &[]));
            c.params().to_vec()
        };
        let naive = run(&|c, r| {
            train_naive(c, &data, &hp, r).expect("trains");
        });
        let variants = [
            run(&|c, r| {
                train_osifl(c, &data, &[], &hp, r).expect("trains");
            }),
            run(&|c, r| {
                train_joint(c, &[&data], &hp, r).expect("trains");
            }),
            run(&|c, r| {
                train_regularized(c, &data, &anchor, 0.0, &hp, r).expect("trains");
            }),
        ];
        for v in &variants {
            for (a, b) in v.iter().zip(&naive) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(
        5,
        "reduction chain",
        start,
        None,
        worst <= 1e-12,
        format!("{trials} shared-rng trials; max parameter gap {worst:.1e}"),
    )
}

/// Surrogate-generator studies shared by checks 6, 7 and 9.
#[derive(Debug, Clone)]
pub struct TrendStudy {
    pub p_sweep: SweepOutput,
    pub client_sweep: SweepOutput,
}

/// The default benchmark with the oracle generator.
pub fn trend_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.bench.generator.kind = GeneratorKind::Surrogate;
    cfg
}

pub const P_VALUES: [usize; 4] = [0, 2, 5, 10];

pub fn compute_trend_study() -> Result<TrendStudy> {
    let mut cfg = trend_config();
    cfg.methods = vec![MethodId::Osifl, MethodId::OscarIl, MethodId::OscarCeiling];
    let values: Vec<String> = P_VALUES.iter().map(usize::to_string).collect();
    let p_sweep = sweep(&cfg, SweepAxis::P, &values)?;
    cfg.methods = vec![MethodId::Osifl];
    let client_sweep = sweep(&cfg, SweepAxis::ClientsPerTask, &["1".into(), "6".into()])?;
    Ok(TrendStudy { p_sweep, client_sweep })
}

static TREND: OnceLock<std::result::Result<(TrendStudy, Duration), String>> = OnceLock::new();

/// The shared study, computed once per process.
pub fn trend_study() -> std::result::Result<&'static (TrendStudy, Duration), &'static str> {
    TREND
        .get_or_init(|| {
            let start = Instant::now();
            compute_trend_study()
                .map(|s| (s, start.elapsed()))
                .map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(String::as_str)
}

fn study_failure(id: usize, name: &'static str, start: Instant, err: &str) -> CheckOutcome {
    outcome(id, name, start, None, false, format!("study failed: {err}"))
}

/// 6: replay beats naive fine-tuning and more exemplars never hurt.
pub fn check_forgetting_mitigation() -> CheckOutcome {
    let start = Instant::now();
    let name = "forgetting mitigation";
    let (study, study_time) = match trend_study() {
        Ok(s) => s,
        Err(e) => return study_failure(6, name, start, e),
    };
    let osifl = study.p_sweep.mean_final_accuracy(MethodId::Osifl);
    let naive = study.p_sweep.mean_final_accuracy(MethodId::OscarIl)[2];
    let gap = osifl[2] - naive;
    let monotone = osifl.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let curve: Vec<String> = P_VALUES
        .iter()
        .zip(&osifl)
        .map(|(p, a)| format!("p{p}={a:.4}"))
        .collect();
    let mut o = outcome(
        6,
        name,
        start,
        None,
        gap >= 0.10 && monotone,
        format!("OSIFL(p=5) - OSCAR_IL = {:.2} pts; {}", gap * 100.0, curve.join(" ")),
    );
    // The study is timed on first use; charge it here.
    o.elapsed = o.elapsed.max(*study_time);
    if o.elapsed.as_secs_f64() >= 300.0 {
        o.passed = false;
        o.detail.push_str("; over the 300s budget");
    }
    o
}

/// 7: ceiling >= OSI-FL >= naive.
pub fn check_ceiling_ordering() -> CheckOutcome {
    let start = Instant::now();
    let name = "ceiling ordering";
    let (study, _) = match trend_study() {
        Ok(s) => s,
        Err(e) => return study_failure(7, name, start, e),
    };
    let s = &study.p_sweep;
    let osifl = s.mean_final_accuracy(MethodId::Osifl)[2];
    let naive = s.mean_final_accuracy(MethodId::OscarIl)[2];
    let ceiling = s.mean_final_accuracy(MethodId::OscarCeiling)[2];
    outcome(
        7,
        name,
        start,
        None,
        ceiling >= osifl - 0.02 && osifl >= naive - 0.02,
        format!("ceiling {ceiling:.4}; osifl {osifl:.4}; naive {naive:.4}"),
    )
}

/// ResNet-18 parameter count used for upload accounting.
pub const RESNET18_PARAMS: u64 = 11_689_512;

/// 8: upload ledgers for the federated and one-shot protocols.
pub fn check_communication_accounting() -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(u64, u64, u64, u64)> {
        let spec = BenchmarkSpec {
            dim_x: 8,
            num_classes: 10,
            num_domains: 2,
            dim_e: 512,
            tasks: 1,
            classes_per_task: 10,
            n_per_class: 5,
            test_per_class: 5,
            generator: crate::orchestrator::GeneratorSpec {
                kind: GeneratorKind::Surrogate,
                pool_per_pair: 2,
                ..Default::default()
            },
            ..BenchmarkSpec::default()
        };
        let bench = Benchmark::build(&spec, SELFTEST_SEED)?;
        let cfg = RunConfig {
            rounds: 20,
            reported_param_count: Some(RESNET18_PARAMS),
            z_per_class: 5,
            train: TrainHP {
                epochs_per_task: 1,
                ..TrainHP::default()
            },
            ..RunConfig::default()
        };
        let fed = run_method(MethodId::FedAvg, &bench, &cfg, SELFTEST_SEED)?;
        let one = run_method(MethodId::Osifl, &bench, &cfg, SELFTEST_SEED)?;
        let f = fed.comms.per_client.values().next().copied().unwrap_or_default();
        let o = one.comms.per_client.values().next().copied().unwrap_or_default();
        Ok((f.floats, f.messages, o.floats, o.messages))
    };
    let (passed, detail) = match run() {
        Ok((fed, fed_msgs, one, one_msgs)) => {
            let rel = (fed as f64 - 233e6).abs() / 233e6;
            (
                fed == 233_790_240 && rel < 0.01 && fed_msgs == 20 && one == 5_120 && one_msgs == 1,
                format!(
                    "FedAvg {fed} floats in {fed_msgs} uploads ({:.3}% from 233M); OSIFL {one} floats in {one_msgs} upload",
                    rel * 100.0
                ),
            )
        }
        Err(e) => (false, e.to_string()),
    };
    outcome(8, "communication accounting", start, None, passed, detail)
}

/// 9: more clients per task barely moves OSI-FL accuracy.
pub fn check_client_scaling() -> CheckOutcome {
    let start = Instant::now();
    let name = "client scaling";
    let (study, _) = match trend_study() {
        Ok(s) => s,
        Err(e) => return study_failure(9, name, start, e),
    };
    let acc = study.client_sweep.mean_final_accuracy(MethodId::Osifl);
    let delta = (acc[1] - acc[0]).abs();
    outcome(
        9,
        name,
        start,
        None,
        delta < 0.05,
        format!("1 client {:.4}; 6 clients {:.4}; delta {:.2} pts", acc[0], acc[1], delta * 100.0),
    )
}

/// Fraction of draws whose nearest true centroid belongs to `class`.
fn nearest_centroid_rate(world: &World, draws: &[(usize, Vec<f64>)]) -> f64 {
    let centroids: Vec<(usize, Vec<f64>)> = (0..world.num_classes)
        .flat_map(|k| (0..world.num_domains).map(move |d| (k, d)))
        .map(|(k, d)| (k, world.cluster_mean(k, d)))
        .collect();
    let hits = draws
        .iter()
        .filter(|(k, x)| {
            let best = centroids
                .iter()
                .map(|(c, m)| (c, m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| *c);
            best == Some(*k)
        })
        .count();
    hits as f64 / draws.len() as f64
}

/// 10: conditional samples land in the right class.
pub fn check_generator_sanity() -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(f64, f64)> {
        let seed = SELFTEST_SEED + 10;
        let world = World::build(16, 2, 1, 0.5, seed)?;
        let encoder = FrozenEncoder::new(16, 64, seed)?;
        let pool = draw_base_pool(&world, 400, seed)?;
        let mut client_rng = seeding::stream(seed, &[99]);
        let shard: Vec<Sample> = (0..2)
            .flat_map(|k| (0..50).map(|_| world.draw(k, 0, &mut client_rng)).collect::<Vec<_>>())
            .collect();
        let means = class_mean_embeddings(&encoder, &shard)?;

        let schedule = make_schedule(100, 1e-4, 0.05)?;
        let model = pretrain(&pool, &encoder, &schedule, &DiffusionHP::default(), seed)?;
        let surrogate = Generator::Surrogate(SurrogateGenerator {
            world: world.clone(),
            conditions: pair_conditions(&encoder, &pool)?,
        });
        let mut ddpm_draws = Vec::new();
        let mut sur_draws = Vec::new();
        let mut gen_rng = seeding::stream(seed, &[seeding::SYNTHESIS]);
        for (&k, cm) in &means {
            for x in ancestral_sample(&model, &cm.mean, 2.0, 100, &mut gen_rng)? {
                ddpm_draws.push((k, x));
            }
            for d in surrogate.generate(&cm.mean, 100, &mut gen_rng)? {
                sur_draws.push((k, d.x));
            }
        }
        Ok((
            nearest_centroid_rate(&world, &ddpm_draws),
            nearest_centroid_rate(&world, &sur_draws),
        ))
    };
    let (passed, detail) = match run() {
        Ok((ddpm, sur)) => (
            ddpm >= 0.70 && sur >= 0.95,
            format!("200 draws each; ddpm {:.1}% correct; surrogate {:.1}% correct", ddpm * 100.0, sur * 100.0),
        ),
        Err(e) => (false, e.to_string()),
    };
    outcome(10, "generator sanity", start, None, passed, detail)
}

/// The small configuration used for the determinism check.
pub fn determinism_config() -> ExperimentConfig {
    let mut cfg = trend_config();
    let b = &mut cfg.bench;
    b.num_classes = 12;
    b.num_domains = 3;
    b.tasks = 3;
    b.classes_per_task = 4;
    b.n_per_class = 20;
    b.test_per_class = 20;
    cfg.run.z_per_class = 20;
    cfg.run.train.epochs_per_task = 3;
    cfg.run.rounds = 3;
    cfg
}

/// 11: identical inputs give byte-identical CSVs.
pub fn check_determinism() -> CheckOutcome {
    let start = Instant::now();
    let cfg = determinism_config();
    let render = || -> Result<String> {
        let out = run_experiment(&cfg)?;
        let mut text = out.summary_csv();
        for r in &out.reports {
            text.push_str(&r.to_csv());
        }
        text.push_str(&sweep(&cfg, SweepAxis::P, &["0".into(), "3".into()])?.to_csv());
        Ok(text)
    };
    let (passed, detail) = match (render(), render()) {
        (Ok(a), Ok(b)) => (
            a == b,
            format!("{} bytes; checksum {:016x}; identical {}", a.len(), fnv(a.as_bytes()), a == b),
        ),
        (Err(e), _) | (_, Err(e)) => (false, e.to_string()),
    };
    outcome(11, "determinism", start, None, passed, detail)
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn run_check(id: usize) -> Option<CheckOutcome> {
    Some(match id {
        1 => check_selection_optimality(),
        2 => check_gradients(),
        3 => check_forward_consistency(),
        4 => check_guidance_identities(),
        5 => check_reduction_chain(),
        6 => check_forgetting_mitigation(),
        7 => check_ceiling_ordering(),
        8 => check_communication_accounting(),
        9 => check_client_scaling(),
        10 => check_generator_sanity(),
        11 => check_determinism(),
        _ => return None,
    })
}

pub fn run_all() -> Vec<CheckOutcome> {
    (1..=CHECK_COUNT).filter_map(run_check).collect()
}

/// `criterion,name,passed,detail` rows without timings.
pub fn outcomes_csv(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::from("criterion,name,passed,detail\n");
    for o in outcomes {
        let _ = writeln!(out, "{},{},{},\"{}\"", o.id, o.name, o.passed, o.detail.replace('"', "'"));
    }
    out
}
