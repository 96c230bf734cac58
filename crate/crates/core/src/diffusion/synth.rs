use std::collections::BTreeMap;

use super::model::{ancestral_sample, DiffusionModel, PairConditions};
use crate::datagen::{Sample, World};
use crate::encoder::ClientMessage;
use crate::error::{Error, Result};
use crate::seeding::Rng;

/// Oracle sampler: snaps a condition to the nearest pretraining pair and
/// draws from that pair's true cluster.
#[derive(Debug, Clone)]
pub struct SurrogateGenerator {
    pub world: World,
    pub conditions: PairConditions,
}

/// Server-side source of synthetic data.
#[derive(Debug, Clone)]
pub enum Generator {
    Ddpm { model: DiffusionModel, guidance: f64 },
    Surrogate(SurrogateGenerator),
}

/// A generated feature vector; `domain` is known only to the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub x: Vec<f64>,
    pub domain: Option<usize>,
}

impl Generator {
    pub fn generate(&self, cond: &[f64], n: usize, rng: &mut Rng) -> Result<Vec<Draw>> {
        match self {
            Generator::Ddpm { model, guidance } => Ok(ancestral_sample(model, cond, *guidance, n, rng)?
                .into_iter()
                .map(|x| Draw { x, domain: None })
                .collect()),
            Generator::Surrogate(s) => {
                let (k, d) = s.conditions.nearest(cond)?;
                Ok((0..n)
                    .map(|_| {
                        let s = s.world.draw(k, d, rng);
                        Draw {
                            x: s.x,
                            domain: s.domain,
                        }
                    })
                    .collect())
            }
        }
    }

    pub fn sampling_madds_per_sample(&self) -> u64 {
        match self {
            Generator::Ddpm { model, .. } => model.sampling_madds(),
            Generator::Surrogate(s) => s.world.dim_x as u64,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Generator::Ddpm { .. } => "ddpm",
            Generator::Surrogate(_) => "surrogate",
        }
    }
}

/// A synthetic sample and the client whose condition produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub source_client: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSet {
    pub task_id: usize,
    pub per_class: BTreeMap<usize, Vec<SynthSample>>,
}

impl SynthSet {
    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples, class by class in ascending class order.
    pub fn samples(&self) -> Vec<Sample> {
        self.per_class
            .values()
            .flatten()
            .map(|s| s.sample.clone())
            .collect()
    }

    pub fn class_samples(&self, class: usize) -> Vec<Sample> {
        self.per_class
            .get(&class)
            .map(|v| v.iter().map(|s| s.sample.clone()).collect())
            .unwrap_or_default()
    }
}

/// Generates `z_per_class` samples for every class in the task's uploads.
///
/// When several clients hold a class, sample `i` of that class is
/// conditioned on holder `i mod h` (holders ordered by client id), so the
/// per-class list alternates between client conditions.
pub fn synthesize_task_data(
    generator: &Generator,
    messages: &[ClientMessage],
    z_per_class: usize,
    rng: &mut Rng,
) -> Result<SynthSet> {
    let first = messages
        .first()
        .ok_or_else(|| Error::Protocol("no client messages for synthesis".into()))?;
    let task_id = first.task_id;
    if let Some(m) = messages.iter().find(|m| m.task_id != task_id) {
        return Err(Error::Protocol(format!(
            "message from client {} is for task {}, expected {task_id}",
            m.client_id, m.task_id
        )));
    }
    let mut ordered: Vec<&ClientMessage> = messages.iter().collect();
    ordered.sort_by_key(|m| m.client_id);

    let mut holders: BTreeMap<usize, Vec<&ClientMessage>> = BTreeMap::new();
    for m in &ordered {
        for &k in m.class_means.keys() {
            holders.entry(k).or_default().push(m);
        }
    }

    let mut per_class = BTreeMap::new();
    for (k, hs) in holders {
        let h = hs.len();
        let mut streams: Vec<std::vec::IntoIter<Draw>> = Vec::with_capacity(h);
        for (j, m) in hs.iter().enumerate() {
            let count = z_per_class / h + usize::from(j < z_per_class % h);
            streams.push(generator.generate(&m.class_means[&k], count, rng)?.into_iter());
        }
        let list = (0..z_per_class)
            .map(|i| {
                let j = i % h;
                let draw = streams[j].next().expect("holder stream sized for round-robin");
                SynthSample {
                    sample: Sample {
                        x: draw.x,
                        y: k,
                        domain: draw.domain,
                        task: Some(task_id as usize),
                    },
                    source_client: hs[j].client_id,
                }
            })
            .collect();
        per_class.insert(k, list);
    }
    Ok(SynthSet {
        task_id: task_id as usize,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::draw_base_pool;
    use crate::diffusion::model::pair_conditions;
    use crate::encoder::FrozenEncoder;
    use crate::seeding;

    fn surrogate(seed: u64) -> (Generator, FrozenEncoder, World) {
        let world = World::build(6, 10, 2, 0.5, seed).unwrap();
        let enc = FrozenEncoder::new(6, 12, seed).unwrap();
        let pool = draw_base_pool(&world, 2000, seed).unwrap();
        let conditions = pair_conditions(&enc, &pool).unwrap();
        (
            Generator::Surrogate(SurrogateGenerator {
                world: world.clone(),
                conditions,
            }),
            enc,
            world,
        )
    }

    fn message(enc: &FrozenEncoder, world: &World, client: u32, classes: &[usize]) -> ClientMessage {
        let mut rng = seeding::stream(u64::from(client), &[]);
        let shard: Vec<Sample> = classes
            .iter()
            .flat_map(|&k| (0..20).map(|_| world.draw(k, 0, &mut rng)).collect::<Vec<_>>())
            .collect();
        ClientMessage::from_shard(enc, client, 1, &shard).unwrap()
    }

    #[test]
    fn ten_classes_fifty_each() {
        let (g, enc, world) = surrogate(1);
        let msg = message(&enc, &world, 0, &(0..10).collect::<Vec<_>>());
        let set = synthesize_task_data(&g, &[msg], 50, &mut seeding::stream(2, &[])).unwrap();
        assert_eq!(set.len(), 500);
        assert!(set.per_class.values().all(|v| v.len() == 50));
        for (&k, v) in &set.per_class {
            assert!(v.iter().all(|s| s.sample.y == k && s.sample.task == Some(1)));
        }
    }

    #[test]
    fn zero_per_class_and_empty_uploads() {
        let (g, enc, world) = surrogate(1);
        let msg = message(&enc, &world, 0, &[1, 2]);
        let set = synthesize_task_data(&g, &[msg], 0, &mut seeding::stream(2, &[])).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.per_class.len(), 2);
        assert!(matches!(
            synthesize_task_data(&g, &[], 5, &mut seeding::stream(2, &[])),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn shared_class_alternates_conditions() {
        let (g, enc, world) = surrogate(3);
        let a = message(&enc, &world, 4, &[1, 2]);
        let b = message(&enc, &world, 9, &[2, 3]);
        let set = synthesize_task_data(&g, &[b, a], 7, &mut seeding::stream(5, &[])).unwrap();
        let shared: Vec<u32> = set.per_class[&2].iter().map(|s| s.source_client).collect();
        assert_eq!(shared, vec![4, 9, 4, 9, 4, 9, 4]);
        assert!(set.per_class[&1].iter().all(|s| s.source_client == 4));
        assert!(set.per_class[&3].iter().all(|s| s.source_client == 9));
    }

    #[test]
    fn foreign_task_message_is_rejected() {
        let (g, enc, world) = surrogate(3);
        let a = message(&enc, &world, 1, &[1]);
        let mut b = message(&enc, &world, 2, &[2]);
        b.task_id = 2;
        assert!(synthesize_task_data(&g, &[a, b], 3, &mut seeding::stream(5, &[])).is_err());
    }

    #[test]
    fn surrogate_draws_the_matching_cluster() {
        let (g, enc, world) = surrogate(8);
        let msg = message(&enc, &world, 0, &[5]);
        let draws = g.generate(&msg.class_means[&5], 50, &mut seeding::stream(1, &[])).unwrap();
        assert!(draws.iter().all(|d| d.domain == Some(0)));
        let target = world.cluster_mean(5, 0);
        let mean0 = draws.iter().map(|d| d.x[0]).sum::<f64>() / 50.0;
        assert!((mean0 - target[0]).abs() < 0.5);
    }
}
