//! A seeded world, its task suite and the one-shot upload of each client.

use osifl::datagen::{build_world, draw_client_shards, make_task_suite, IncrementMode};
use osifl::encoder::{ClientMessage, FrozenEncoder};

fn main() -> osifl::Result<()> {
    let seed = 42;
    let world = build_world(16, 30, 6, 0.5, seed)?;
    let suite = make_task_suite(&world, IncrementMode::ClassIncremental, 6, 5)?;
    let (shards, tests) = draw_client_shards(&world, &suite, 2, 50, 50, seed)?;
    let encoder = FrozenEncoder::new(16, 64, seed)?;

    for task in &suite.tasks {
        println!("task {} classes {:?} domains {:?}", task.id, task.classes, task.domains);
    }
    println!("{} shards, {} test sets", shards.len(), tests.len());

    for shard in shards.iter().take(4) {
        let msg = ClientMessage::from_shard(&encoder, shard.client_id, shard.task_id as u32, &shard.samples)?;
        let bytes = msg.to_bytes();
        assert_eq!(ClientMessage::from_bytes(&bytes)?, msg);
        println!(
            "client {} task {}: {} samples -> {} classes, {} floats, {} bytes",
            msg.client_id,
            msg.task_id,
            shard.samples.len(),
            msg.class_means.len(),
            msg.upload_floats(),
            bytes.len()
        );
    }
    Ok(())
}
