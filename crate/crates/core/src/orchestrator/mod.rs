//! End-to-end protocols over a task suite: the one-shot family (OSI-FL and
//! the OSCAR variants) and the multi-round federated baselines.

pub mod metrics;
pub mod report;

use std::sync::Arc;

pub use metrics::{evaluate, forgetting, AccuracyRow, Forgetting};
pub use report::{ClientComms, CommsLedger, RunReport, CSV_HEADER};

use crate::datagen::{
    draw_base_pool, draw_client_shards, make_class_suite, make_task_suite, ClientShard,
    IncrementMode, Sample, TaskSpec, TaskSuite, TestSet, World,
};
use crate::diffusion::{
    make_schedule, pair_conditions, pretrain, synthesize_task_data, DiffusionHP, Generator,
    SurrogateGenerator, SynthSet,
};
use crate::encoder::{ClientMessage, FrozenEncoder};
use crate::error::{Error, Result};
use crate::ledger::{ComputeLedger, OpKind};
use crate::seeding;
use crate::ssr::{select_exemplars, ExemplarMemory, ScoreKind, ScoringPoint};
use crate::trainer::{
    estimate_fisher, train_joint, train_naive, train_osifl, train_regularized, train_weighted,
    AnchorState, Classifier, Penalty, TrainHP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodId {
    Osifl,
    OscarIl,
    OscarR,
    OscarCeiling,
    FedAvg,
    FedProx,
    FedEwc,
}

impl MethodId {
    pub const ALL: [MethodId; 7] = [
        MethodId::Osifl,
        MethodId::OscarIl,
        MethodId::OscarR,
        MethodId::OscarCeiling,
        MethodId::FedAvg,
        MethodId::FedProx,
        MethodId::FedEwc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Osifl => "OSIFL",
            MethodId::OscarIl => "OSCAR_IL",
            MethodId::OscarR => "OSCAR_R",
            MethodId::OscarCeiling => "OSCAR_CEILING",
            MethodId::FedAvg => "FEDAVG",
            MethodId::FedProx => "FEDPROX",
            MethodId::FedEwc => "FEDEWC",
        }
    }

    /// Methods whose clients upload once and never train.
    pub fn is_one_shot(self) -> bool {
        matches!(
            self,
            MethodId::Osifl | MethodId::OscarIl | MethodId::OscarR | MethodId::OscarCeiling
        )
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Ddpm,
    Surrogate,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::Ddpm => "ddpm",
            GeneratorKind::Surrogate => "surrogate",
        }
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(GeneratorKind::Ddpm),
            "surrogate" => Ok(GeneratorKind::Surrogate),
            other => Err(Error::Config(format!("unknown generator `{other}`"))),
        }
    }
}

/// Server generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub guidance: f64,
    pub hp: DiffusionHP,
    /// Expected base-pool samples per `(class, domain)` pair.
    pub pool_per_pair: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Ddpm,
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.05,
            guidance: 2.0,
            hp: DiffusionHP::default(),
            pool_per_pair: 100,
        }
    }
}

/// Shape of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub dim_x: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub within_std: f64,
    pub dim_e: usize,
    pub mode: IncrementMode,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Explicit class count per task (class-incremental only); overrides
    /// `tasks` and `classes_per_task`.
    pub class_sizes: Option<Vec<usize>>,
    pub clients_per_task: usize,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub generator: GeneratorSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dim_x: 16,
            num_classes: 30,
            num_domains: 6,
            within_std: 0.5,
            dim_e: 64,
            mode: IncrementMode::ClassIncremental,
            tasks: 6,
            classes_per_task: 5,
            class_sizes: None,
            clients_per_task: 1,
            n_per_class: 50,
            test_per_class: 50,
            generator: GeneratorSpec::default(),
        }
    }
}

/// A fully materialized benchmark for one seed.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub world: World,
    pub suite: TaskSuite,
    pub shards: Vec<ClientShard>,
    pub tests: Vec<TestSet>,
    pub encoder: Arc<FrozenEncoder>,
    pub generator: Arc<Generator>,
}

impl Benchmark {
    pub fn build(spec: &BenchmarkSpec, seed: u64) -> Result<Self> {
        let world = World::build(
            spec.dim_x,
            spec.num_classes,
            spec.num_domains,
            spec.within_std,
            seed,
        )?;
        let suite = match (&spec.class_sizes, spec.mode) {
            (Some(sizes), IncrementMode::ClassIncremental) => make_class_suite(&world, sizes)?,
            (Some(_), IncrementMode::DomainIncremental) => {
                return Err(Error::Config("class_sizes applies to class-incremental suites".into()))
            }
            (None, mode) => make_task_suite(&world, mode, spec.tasks, spec.classes_per_task)?,
        };
        let (shards, tests) = draw_client_shards(
            &world,
            &suite,
            spec.clients_per_task,
            spec.n_per_class,
            spec.test_per_class,
            seed,
        )?;
        let encoder = Arc::new(FrozenEncoder::new(spec.dim_x, spec.dim_e, seed)?);
        let g = &spec.generator;
        if g.pool_per_pair == 0 {
            return Err(Error::Config("pool_per_pair must be positive".into()));
        }
        let pool = draw_base_pool(
            &world,
            world.num_classes * world.num_domains * g.pool_per_pair,
            seed,
        )?;
        let generator = match g.kind {
            GeneratorKind::Surrogate => Generator::Surrogate(SurrogateGenerator {
                world: world.clone(),
                conditions: pair_conditions(&encoder, &pool)?,
            }),
            GeneratorKind::Ddpm => {
                if !(g.guidance >= 1.0 && g.guidance.is_finite()) {
                    return Err(Error::Config(format!("guidance must be >= 1, got {}", g.guidance)));
                }
                let schedule = make_schedule(g.steps, g.beta_min, g.beta_max)?;
                Generator::Ddpm {
                    model: pretrain(&pool, &encoder, &schedule, &g.hp, seed)?,
                    guidance: g.guidance,
                }
            }
        };
        Ok(Self {
            world,
            suite,
            shards,
            tests,
            encoder,
            generator: Arc::new(generator),
        })
    }

    pub fn shards_of(&self, task: usize) -> Vec<&ClientShard> {
        self.shards.iter().filter(|s| s.task_id == task).collect()
    }
}

/// Per-run protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainHP,
    pub z_per_class: usize,
    /// Retained exemplars per (task, class).
    pub p: usize,
    pub scoring_point: ScoringPoint,
    pub score_kind: ScoreKind,
    /// Global rounds per task for the federated baselines.
    pub rounds: usize,
    pub local_epochs: usize,
    /// Charge federated uploads as this many parameters instead of the
    /// simulated head size.
    pub reported_param_count: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainHP::default(),
            z_per_class: 50,
            p: 5,
            scoring_point: ScoringPoint::PreUpdate,
            score_kind: ScoreKind::GradientNorm,
            rounds: 20,
            local_epochs: 1,
            reported_param_count: None,
        }
    }
}

/// Audit trail of one OSI-FL task phase.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseEvent {
    Synthesized { task: usize, samples: usize },
    HeadExpanded { task: usize, new_classes: usize },
    Scored { task: usize, point: ScoringPoint },
    Trained { task: usize, steps: usize, replay_sets: usize },
    MemoryUpdated { task: usize, added: usize },
}

/// Server-side state of a one-shot run.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub classifier: Classifier,
    pub memory: ExemplarMemory,
    pub compute: ComputeLedger,
    pub events: Vec<PhaseEvent>,
    /// Synthetic data of every finished task (kept for the joint ceiling).
    pub history: Vec<Vec<Sample>>,
    pub anchor: Option<AnchorState>,
}

impl ServerState {
    pub fn new(encoder: Arc<FrozenEncoder>, p: usize) -> Self {
        Self {
            classifier: Classifier::new(encoder),
            memory: ExemplarMemory::new(p),
            compute: ComputeLedger::default(),
            events: Vec::new(),
            history: Vec::new(),
            anchor: None,
        }
    }
}

fn check_messages(task: &TaskSpec, messages: &[ClientMessage]) -> Result<()> {
    if messages.is_empty() {
        return Err(Error::Protocol(format!("no uploads for task {}", task.id)));
    }
    if let Some(m) = messages.iter().find(|m| m.task_id as usize != task.id) {
        return Err(Error::Protocol(format!(
            "client {} uploaded for task {} during task {}",
            m.client_id, m.task_id, task.id
        )));
    }
    Ok(())
}

fn synthesize(
    state: &mut ServerState,
    generator: &Generator,
    task: &TaskSpec,
    messages: &[ClientMessage],
    cfg: &RunConfig,
    seed: u64,
) -> Result<SynthSet> {
    check_messages(task, messages)?;
    let mut rng = seeding::stream(seed, &[seeding::SYNTHESIS, task.id as u64]);
    let synth = synthesize_task_data(generator, messages, cfg.z_per_class, &mut rng)?;
    state.compute.record(OpKind::Sampling {
        samples: synth.len() as u64,
        madds_per_sample: generator.sampling_madds_per_sample(),
    });
    state.events.push(PhaseEvent::Synthesized {
        task: task.id,
        samples: synth.len(),
    });
    Ok(synth)
}

fn register_classes(state: &mut ServerState, task: &TaskSpec) -> Result<()> {
    let fresh: Vec<usize> = task
        .classes
        .iter()
        .copied()
        .filter(|&k| !state.classifier.has_class(k))
        .collect();
    state.classifier.expand_head(&fresh)?;
    state.events.push(PhaseEvent::HeadExpanded {
        task: task.id,
        new_classes: fresh.len(),
    });
    Ok(())
}

fn train_rng(seed: u64, task: usize) -> seeding::Rng {
    seeding::stream(seed, &[seeding::SERVER_TRAIN, task as u64])
}

fn charge_scoring(state: &mut ServerState, samples: usize) {
    let c = &state.classifier;
    let (batch, classes, dim) = (samples as u64, c.num_classes() as u64, c.dim_e() as u64);
    state.compute.record(OpKind::HeadForward {
        batch,
        classes,
        dim,
    });
    state.compute.record(OpKind::HeadBackward {
        batch,
        classes,
        dim,
    });
}

/// One OSI-FL arrival: synthesize, grow the head, train on the new task
/// plus replayed exemplars, then retain the top-p samples of each class.
pub fn osifl_task_phase(
    state: &mut ServerState,
    generator: &Generator,
    task: &TaskSpec,
    messages: &[ClientMessage],
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    let synth = synthesize(state, generator, task, messages, cfg, seed)?;
    register_classes(state, task)?;
    let current = synth.samples();
    if current.is_empty() {
        return Err(Error::Protocol(format!("task {} produced no synthetic data", task.id)));
    }

    let snapshot = match cfg.scoring_point {
        ScoringPoint::PreUpdate => {
            state.events.push(PhaseEvent::Scored {
                task: task.id,
                point: ScoringPoint::PreUpdate,
            });
            Some(state.classifier.clone())
        }
        ScoringPoint::PostUpdate => None,
    };

    let replay = state.memory.replay_sets(task.id);
    let summary = train_osifl(
        &mut state.classifier,
        &current,
        &replay,
        &cfg.train,
        &mut train_rng(seed, task.id),
    )?;
    state.compute.absorb(&summary.compute);
    state.events.push(PhaseEvent::Trained {
        task: task.id,
        steps: summary.steps,
        replay_sets: replay.len(),
    });

    if cfg.scoring_point == ScoringPoint::PostUpdate {
        state.events.push(PhaseEvent::Scored {
            task: task.id,
            point: ScoringPoint::PostUpdate,
        });
    }
    let scorer = snapshot.as_ref().unwrap_or(&state.classifier);
    let mut sets = std::collections::BTreeMap::new();
    for &k in synth.per_class.keys() {
        let chosen = select_exemplars(scorer, &synth.class_samples(k), cfg.p, cfg.score_kind)?;
        sets.insert(k, chosen);
    }
    if cfg.p > 0 {
        charge_scoring(state, current.len());
    }
    let added = sets.values().map(Vec::len).sum();
    state.memory.update_memory(task.id, sets)?;
    state.events.push(PhaseEvent::MemoryUpdated {
        task: task.id,
        added,
    });
    state.history.push(current);
    Ok(())
}

fn one_shot_phase(
    method: MethodId,
    state: &mut ServerState,
    generator: &Generator,
    task: &TaskSpec,
    messages: &[ClientMessage],
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    if method == MethodId::Osifl {
        return osifl_task_phase(state, generator, task, messages, cfg, seed);
    }
    let synth = synthesize(state, generator, task, messages, cfg, seed)?;
    register_classes(state, task)?;
    let current = synth.samples();
    let mut rng = train_rng(seed, task.id);
    let summary = match method {
        MethodId::OscarIl => train_naive(&mut state.classifier, &current, &cfg.train, &mut rng)?,
        MethodId::OscarR => match &state.anchor {
            Some(anchor) => train_regularized(
                &mut state.classifier,
                &current,
                anchor,
                cfg.train.lambda_ewc,
                &cfg.train,
                &mut rng,
            )?,
            None => train_naive(&mut state.classifier, &current, &cfg.train, &mut rng)?,
        },
        MethodId::OscarCeiling => {
            state.classifier.reinitialize();
            let mut all: Vec<&[Sample]> = state.history.iter().map(Vec::as_slice).collect();
            all.push(&current);
            train_joint(&mut state.classifier, &all, &cfg.train, &mut rng)?
        }
        other => {
            return Err(Error::Config(format!("{other} is not a one-shot method")));
        }
    };
    state.compute.absorb(&summary.compute);
    if method == MethodId::OscarR {
        state.anchor = Some(estimate_fisher(&state.classifier, &current)?);
        charge_scoring(state, current.len());
    }
    state.history.push(current);
    Ok(())
}

/// Global model of a federated baseline.
#[derive(Debug, Clone)]
pub struct FederatedState {
    pub global: Classifier,
    /// EWC anchor taken at the end of the previous task.
    pub anchor: Option<AnchorState>,
    pub comms: CommsLedger,
    pub compute: ComputeLedger,
}

impl FederatedState {
    pub fn new(encoder: Arc<FrozenEncoder>) -> Self {
        Self {
            global: Classifier::new(encoder),
            anchor: None,
            comms: CommsLedger::default(),
            compute: ComputeLedger::default(),
        }
    }
}

/// Sample-count-weighted parameter average.
pub fn aggregate(updates: &[(Vec<f64>, usize)]) -> Result<Vec<f64>> {
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let len = updates
        .first()
        .map(|(p, _)| p.len())
        .ok_or_else(|| Error::Protocol("no client updates to aggregate".into()))?;
    if total == 0 {
        return Err(Error::Protocol("client updates carry no samples".into()));
    }
    let mut out = vec![0.0; len];
    for (params, n) in updates {
        crate::error::check_dim(len, params.len())?;
        let w = *n as f64 / total as f64;
        out.iter_mut().zip(params).for_each(|(o, p)| *o += w * p);
    }
    Ok(out)
}

/// `rounds` of broadcast, local training on the task's clients and
/// weighted averaging.
#[allow(clippy::too_many_arguments)]
pub fn federated_task_phase(
    state: &mut FederatedState,
    task: &TaskSpec,
    shards: &[&ClientShard],
    variant: MethodId,
    rounds: usize,
    local_epochs: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    if !matches!(variant, MethodId::FedAvg | MethodId::FedProx | MethodId::FedEwc) {
        return Err(Error::Config(format!("{variant} is not a federated baseline")));
    }
    if shards.is_empty() {
        return Err(Error::Protocol(format!("task {} has no clients", task.id)));
    }
    if rounds == 0 || local_epochs == 0 {
        return Err(Error::Config("rounds and local_epochs must be positive".into()));
    }
    if let Some(s) = shards.iter().find(|s| s.task_id != task.id) {
        return Err(Error::Protocol(format!(
            "client {} belongs to task {}, not {}",
            s.client_id, s.task_id, task.id
        )));
    }
    let fresh: Vec<usize> = task
        .classes
        .iter()
        .copied()
        .filter(|&k| !state.global.has_class(k))
        .collect();
    state.global.expand_head(&fresh)?;
    let anchor = match (&state.anchor, variant) {
        (Some(a), MethodId::FedEwc) => Some(a.padded_to(state.global.param_count())?),
        _ => None,
    };
    let local_hp = TrainHP {
        epochs_per_task: local_epochs,
        reset_moments: true,
        ..cfg.train.clone()
    };
    let upload = cfg
        .reported_param_count
        .unwrap_or(state.global.param_count() as u64);

    for round in 0..rounds {
        let broadcast = state.global.params().to_vec();
        let mut updates = Vec::with_capacity(shards.len());
        for shard in shards {
            let mut local = state.global.clone();
            let penalty = match (variant, &anchor) {
                (MethodId::FedProx, _) => Penalty::Proximal {
                    center: &broadcast,
                    mu: cfg.train.mu_prox,
                },
                (MethodId::FedEwc, Some(a)) if cfg.train.lambda_ewc > 0.0 => Penalty::Ewc {
                    anchor: a,
                    lambda: cfg.train.lambda_ewc,
                },
                _ => Penalty::None,
            };
            let mut rng = seeding::stream(
                seed,
                &[
                    seeding::CLIENT_TRAIN,
                    task.id as u64,
                    round as u64,
                    u64::from(shard.client_id),
                ],
            );
            let summary = train_weighted(&mut local, &[&shard.samples], penalty, &local_hp, &mut rng)?;
            state.compute.absorb(&summary.compute);
            state.comms.record_upload(shard.client_id, upload);
            updates.push((local.params().to_vec(), shard.samples.len()));
        }
        state.global.set_params(aggregate(&updates)?)?;
    }

    if variant == MethodId::FedEwc {
        let union: Vec<Sample> = shards.iter().flat_map(|s| s.samples.iter().cloned()).collect();
        state.anchor = Some(estimate_fisher(&state.global, &union)?);
    }
    Ok(())
}

/// Runs `method` over every task of the benchmark, evaluating on all seen
/// tasks after each one.
pub fn run_method(
    method: MethodId,
    bench: &Benchmark,
    cfg: &RunConfig,
    seed: u64,
) -> Result<RunReport> {
    cfg.train.validate()?;
    for shard in &bench.shards {
        bench.suite.task(shard.task_id)?;
    }
    if bench.tests.len() != bench.suite.len() {
        return Err(Error::Protocol("one test set per task is required".into()));
    }
    let mut report = RunReport::new(method, seed);
    let mut server = ServerState::new(bench.encoder.clone(), cfg.p);
    let mut fed = FederatedState::new(bench.encoder.clone());

    for (t, task) in bench.suite.tasks.iter().enumerate() {
        let shards = bench.shards_of(task.id);
        let classifier = if method.is_one_shot() {
            let messages = shards
                .iter()
                .map(|s| ClientMessage::from_shard(&bench.encoder, s.client_id, task.id as u32, &s.samples))
                .collect::<Result<Vec<_>>>()?;
            for m in &messages {
                report.comms.record_upload(m.client_id, m.upload_floats());
            }
            one_shot_phase(method, &mut server, &bench.generator, task, &messages, cfg, seed)?;
            report.compute = server.compute;
            &server.classifier
        } else {
            federated_task_phase(
                &mut fed,
                task,
                &shards,
                method,
                cfg.rounds,
                cfg.local_epochs,
                cfg,
                seed,
            )?;
            report.comms = fed.comms.clone();
            report.compute = fed.compute;
            &fed.global
        };
        let row = evaluate(classifier, &bench.tests[..=t])?;
        report.push_row(row.per_task, row.mean, row.pooled)?;
    }
    Ok(report)
}
