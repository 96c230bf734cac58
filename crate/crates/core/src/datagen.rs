//! Deterministic synthetic worlds: Gaussian class/domain clusters, task
//! suites, client shards and the generator pretraining pool.
//!
//! The cluster for `(class k, domain d)` is `N(anchor_k + offset_d, σ² I)`.
//! Class anchors are uniform in `[-4, 4]^dim_x` and domain offsets are
//! standard normal, all drawn from the world seed.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding::{self, Rng};

pub const ANCHOR_RANGE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub dim_x: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub class_anchors: Vec<Vec<f64>>,
    pub domain_offsets: Vec<Vec<f64>>,
    pub within_std: f64,
    pub seed: u64,
}

/// One labelled feature vector.
///
/// `domain` is `None` for samples produced by a generator that does not know
/// which domain it imitated.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: Option<usize>,
    pub task: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IncrementMode {
    ClassIncremental,
    DomainIncremental,
}

impl IncrementMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IncrementMode::ClassIncremental => "class_incremental",
            IncrementMode::DomainIncremental => "domain_incremental",
        }
    }
}

impl std::str::FromStr for IncrementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_incremental" | "class" => Ok(IncrementMode::ClassIncremental),
            "domain_incremental" | "domain" => Ok(IncrementMode::DomainIncremental),
            other => Err(Error::Config(format!("unknown increment mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// 1-based task id.
    pub id: usize,
    pub classes: Vec<usize>,
    pub domains: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub mode: IncrementMode,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: usize) -> Result<&TaskSpec> {
        id.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or_else(|| Error::OutOfRange(format!("task {id} not in suite of {}", self.len())))
    }
}

/// Local data of a single client. Each client belongs to exactly one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: u32,
    pub task_id: usize,
    pub samples: Vec<Sample>,
}

/// Held-out evaluation data for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub task_id: usize,
    pub samples: Vec<Sample>,
}

impl World {
    pub fn build(
        dim_x: usize,
        num_classes: usize,
        num_domains: usize,
        within_std: f64,
        seed: u64,
    ) -> Result<World> {
        if dim_x == 0 {
            return Err(Error::Config("dim_x must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if num_domains < 1 {
            return Err(Error::Config("need at least 1 domain".into()));
        }
        if !(within_std > 0.0 && within_std.is_finite()) {
            return Err(Error::Config(format!("within_std must be positive, got {within_std}")));
        }
        let mut rng = seeding::stream(seed, &[seeding::WORLD]);
        let class_anchors = (0..num_classes)
            .map(|_| {
                (0..dim_x)
                    .map(|_| rng.random_range(-ANCHOR_RANGE..=ANCHOR_RANGE))
                    .collect()
            })
            .collect();
        let domain_offsets = (0..num_domains)
            .map(|_| (0..dim_x).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(World {
            dim_x,
            num_classes,
            num_domains,
            class_anchors,
            domain_offsets,
            within_std,
            seed,
        })
    }

    pub fn cluster_mean(&self, class: usize, domain: usize) -> Vec<f64> {
        self.class_anchors[class]
            .iter()
            .zip(&self.domain_offsets[domain])
            .map(|(a, o)| a + o)
            .collect()
    }

    pub fn draw(&self, class: usize, domain: usize, rng: &mut Rng) -> Sample {
        let x = self.class_anchors[class]
            .iter()
            .zip(&self.domain_offsets[domain])
            .map(|(a, o)| {
                let n: f64 = rng.sample(StandardNormal);
                a + o + self.within_std * n
            })
            .collect();
        Sample {
            x,
            y: class,
            domain: Some(domain),
            task: None,
        }
    }

    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.x.len() != self.dim_x {
            return Err(Error::DimensionMismatch {
                expected: self.dim_x,
                actual: s.x.len(),
            });
        }
        if s.y >= self.num_classes || s.domain.is_some_and(|d| d >= self.num_domains) {
            return Err(Error::OutOfRange(format!(
                "sample label ({}, {:?}) outside world",
                s.y, s.domain
            )));
        }
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("non-finite sample".into()));
        }
        Ok(())
    }
}

/// Same as [`World::build`].
pub fn build_world(
    dim_x: usize,
    num_classes: usize,
    num_domains: usize,
    within_std: f64,
    seed: u64,
) -> Result<World> {
    World::build(dim_x, num_classes, num_domains, within_std, seed)
}

/// Builds `m` equally sized tasks.
///
/// Class mode draws a seeded disjoint class partition and every task spans
/// all domains; domain mode assigns one distinct domain per task and every
/// task spans all classes.
pub fn make_task_suite(
    world: &World,
    mode: IncrementMode,
    m: usize,
    classes_per_task: usize,
) -> Result<TaskSuite> {
    if m == 0 {
        return Err(Error::Config("task count must be positive".into()));
    }
    match mode {
        IncrementMode::ClassIncremental => {
            if classes_per_task == 0 {
                return Err(Error::Config("classes_per_task must be positive".into()));
            }
            make_class_suite(world, &vec![classes_per_task; m])
        }
        IncrementMode::DomainIncremental => {
            if m > world.num_domains {
                return Err(Error::Config(format!(
                    "{m} domain-incremental tasks need {m} domains, world has {}",
                    world.num_domains
                )));
            }
            let mut rng = seeding::stream(world.seed, &[seeding::SUITE]);
            let mut domains: Vec<usize> = (0..world.num_domains).collect();
            domains.shuffle(&mut rng);
            let tasks = domains[..m]
                .iter()
                .enumerate()
                .map(|(i, &d)| TaskSpec {
                    id: i + 1,
                    classes: (0..world.num_classes).collect(),
                    domains: vec![d],
                })
                .collect();
            Ok(TaskSuite { mode, tasks })
        }
    }
}

/// Class-incremental suite with an explicit class count per task, for
/// benchmarks whose tasks are not all the same size.
pub fn make_class_suite(world: &World, sizes: &[usize]) -> Result<TaskSuite> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("every task needs at least one class".into()));
    }
    if total > world.num_classes {
        return Err(Error::Config(format!(
            "partition needs {total} classes, world has {}",
            world.num_classes
        )));
    }
    let mut rng = seeding::stream(world.seed, &[seeding::SUITE]);
    let mut classes: Vec<usize> = (0..world.num_classes).collect();
    classes.shuffle(&mut rng);
    let mut start = 0;
    let tasks = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut set = classes[start..start + n].to_vec();
            set.sort_unstable();
            start += n;
            TaskSpec {
                id: i + 1,
                classes: set,
                domains: (0..world.num_domains).collect(),
            }
        })
        .collect();
    Ok(TaskSuite {
        mode: IncrementMode::ClassIncremental,
        tasks,
    })
}

fn draw_task_samples(
    world: &World,
    task: &TaskSpec,
    per_class: usize,
    domain_offset: usize,
    rng: &mut Rng,
) -> Vec<Sample> {
    let mut out = Vec::with_capacity(per_class * task.classes.len());
    for &k in &task.classes {
        for i in 0..per_class {
            let d = task.domains[(i + domain_offset) % task.domains.len()];
            let mut s = world.draw(k, d, rng);
            s.task = Some(task.id);
            out.push(s);
        }
    }
    out
}

/// Draws `clients_per_task` shards per task plus one test set per task.
///
/// Client ids run consecutively over tasks. Each client cycles through the
/// task's domains starting at its index within the task. Train and test
/// draws come from separate substreams of `seed`.
pub fn draw_client_shards(
    world: &World,
    suite: &TaskSuite,
    clients_per_task: usize,
    n_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(Vec<ClientShard>, Vec<TestSet>)> {
    if clients_per_task == 0 || n_per_class == 0 || test_per_class == 0 {
        return Err(Error::Config(
            "clients_per_task, n_per_class and test_per_class must be positive".into(),
        ));
    }
    let mut shards = Vec::with_capacity(clients_per_task * suite.len());
    let mut tests = Vec::with_capacity(suite.len());
    let mut next_id: u32 = 0;
    for task in &suite.tasks {
        for local in 0..clients_per_task {
            let mut rng = seeding::stream(seed, &[seeding::TRAIN_SHARD, u64::from(next_id)]);
            shards.push(ClientShard {
                client_id: next_id,
                task_id: task.id,
                samples: draw_task_samples(world, task, n_per_class, local, &mut rng),
            });
            next_id += 1;
        }
        let mut rng = seeding::stream(seed, &[seeding::TEST_SET, task.id as u64]);
        tests.push(TestSet {
            task_id: task.id,
            samples: draw_task_samples(world, task, test_per_class, 0, &mut rng),
        });
    }
    Ok((shards, tests))
}

/// Labelled samples drawn uniformly over all `(class, domain)` pairs.
pub fn draw_base_pool(world: &World, n_total: usize, seed: u64) -> Result<Vec<Sample>> {
    if n_total == 0 {
        return Err(Error::Config("base pool size must be positive".into()));
    }
    let mut rng = seeding::stream(seed, &[seeding::BASE_POOL]);
    Ok((0..n_total)
        .map(|_| {
            let k = rng.random_range(0..world.num_classes);
            let d = rng.random_range(0..world.num_domains);
            world.draw(k, d, &mut rng)
        })
        .collect())
}
