//! Scores synthetic samples by gradient norm, keeps the top p per class and
//! dumps the exemplar memory.

use std::collections::BTreeMap;
use std::sync::Arc;

use osifl::datagen::{build_world, draw_base_pool, draw_client_shards, make_task_suite, IncrementMode};
use osifl::diffusion::{pair_conditions, synthesize_task_data, Generator, SurrogateGenerator};
use osifl::encoder::{ClientMessage, FrozenEncoder};
use osifl::seeding;
use osifl::ssr::{select_exemplars, ExemplarMemory, ScoreKind};
use osifl::trainer::{train_naive, Classifier, TrainHP};

fn main() -> osifl::Result<()> {
    let seed = 18;
    let world = build_world(16, 6, 2, 0.5, seed)?;
    let suite = make_task_suite(&world, IncrementMode::ClassIncremental, 2, 3)?;
    let (shards, _) = draw_client_shards(&world, &suite, 1, 50, 10, seed)?;
    let encoder = Arc::new(FrozenEncoder::new(16, 64, seed)?);
    let generator = Generator::Surrogate(SurrogateGenerator {
        world: world.clone(),
        conditions: pair_conditions(&encoder, &draw_base_pool(&world, 600, seed)?)?,
    });

    let mut classifier = Classifier::new(encoder.clone());
    let mut memory = ExemplarMemory::new(3);
    let hp = TrainHP::default();
    for shard in &shards {
        let msg = ClientMessage::from_shard(&encoder, shard.client_id, shard.task_id as u32, &shard.samples)?;
        let mut rng = seeding::stream(seed, &[seeding::SYNTHESIS, shard.task_id as u64]);
        let synth = synthesize_task_data(&generator, &[msg], 50, &mut rng)?;
        classifier.expand_head(&synth.per_class.keys().copied().collect::<Vec<_>>())?;
        let snapshot = classifier.clone();
        train_naive(&mut classifier, &synth.samples(), &hp, &mut rng)?;

        let mut sets = BTreeMap::new();
        for &k in synth.per_class.keys() {
            let chosen = select_exemplars(&snapshot, &synth.class_samples(k), memory.p(), ScoreKind::GradientNorm)?;
            let scores: Vec<String> = chosen.iter().map(|s| format!("#{}={:.3}", s.index, s.score)).collect();
            println!("task {} class {k}: {}", shard.task_id, scores.join(" "));
            sets.insert(k, chosen);
        }
        memory.update_memory(shard.task_id, sets)?;
    }
    println!("memory holds {} exemplars\n", memory.len());
    print!("{}", memory.dump_table().lines().take(4).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}
