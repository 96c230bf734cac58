//! Naive fine-tuning, exemplar replay, EWC and joint retraining on the same
//! synthetic two-task stream.

use std::sync::Arc;

use osifl::datagen::{build_world, draw_client_shards, make_task_suite, IncrementMode, Sample};
use osifl::encoder::FrozenEncoder;
use osifl::orchestrator::evaluate;
use osifl::seeding;
use osifl::trainer::{estimate_fisher, train_joint, train_naive, train_osifl, train_regularized, Classifier, TrainHP};

fn main() -> osifl::Result<()> {
    let seed = 50;
    let world = build_world(16, 10, 1, 0.5, seed)?;
    let suite = make_task_suite(&world, IncrementMode::ClassIncremental, 2, 5)?;
    let (shards, tests) = draw_client_shards(&world, &suite, 1, 50, 50, seed)?;
    let encoder = Arc::new(FrozenEncoder::new(16, 64, seed)?);
    let hp = TrainHP::default();
    let (t1, t2) = (&shards[0].samples, &shards[1].samples);
    let exemplars: Vec<Sample> = t1.iter().step_by(10).cloned().collect();

    let mut base = Classifier::with_classes(encoder, &suite.tasks[0].classes)?;
    train_naive(&mut base, t1, &hp, &mut seeding::stream(seed, &[1]))?;
    let anchor = estimate_fisher(&base, t1)?;
    base.expand_head(&suite.tasks[1].classes)?;

    for name in ["naive", "replay", "ewc", "joint"] {
        let mut c = base.clone();
        let mut rng = seeding::stream(seed, &[2]);
        match name {
            "naive" => train_naive(&mut c, t2, &hp, &mut rng)?,
            "replay" => train_osifl(&mut c, t2, std::slice::from_ref(&exemplars), &hp, &mut rng)?,
            "ewc" => train_regularized(&mut c, t2, &anchor, 100.0, &hp, &mut rng)?,
            _ => train_joint(&mut c, &[t1, t2], &hp, &mut rng)?,
        };
        let row = evaluate(&c, &tests)?;
        println!(
            "{name:>6}: task1 {:.3} task2 {:.3} mean {:.3}",
            row.per_task[0], row.per_task[1], row.mean
        );
    }
    Ok(())
}
