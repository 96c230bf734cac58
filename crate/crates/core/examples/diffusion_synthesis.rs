//! Pretrains the conditional denoiser, then synthesizes data from class-mean
//! embeddings and checks which cluster each draw lands in.

use osifl::datagen::{build_world, draw_base_pool, Sample};
use osifl::diffusion::{ancestral_sample, make_schedule, pretrain, DiffusionHP, DiffusionModel};
use osifl::encoder::{class_mean_embeddings, FrozenEncoder};
use osifl::seeding;

fn main() -> osifl::Result<()> {
    let seed = 7;
    let world = build_world(16, 4, 2, 0.5, seed)?;
    let encoder = FrozenEncoder::new(16, 64, seed)?;
    let pool = draw_base_pool(&world, 800, seed)?;
    let schedule = make_schedule(100, 1e-4, 0.05)?;
    let model = pretrain(&pool, &encoder, &schedule, &DiffusionHP::default(), seed)?;
    let losses = &model.training_losses;
    println!(
        "denoising loss {:.3} -> {:.3} over {} steps",
        losses[..50].iter().sum::<f64>() / 50.0,
        losses[losses.len() - 50..].iter().sum::<f64>() / 50.0,
        losses.len()
    );

    let mut rng = seeding::stream(seed, &[seeding::SYNTHESIS]);
    let shard: Vec<Sample> = (0..4)
        .flat_map(|k| (0..30).map(|_| world.draw(k, 1, &mut rng)).collect::<Vec<_>>())
        .collect();
    for (k, cm) in class_mean_embeddings(&encoder, &shard)? {
        for w in [1.0, 2.0, 4.0] {
            let draws = ancestral_sample(&model, &cm.mean, w, 50, &mut rng)?;
            let hits = draws.iter().filter(|x| nearest_class(&world, x) == k).count();
            println!("class {k} w {w}: {hits}/50 nearest to own centroid");
        }
    }

    let path = std::env::temp_dir().join("osifl_denoiser.bin");
    model.save(&path)?;
    assert_eq!(DiffusionModel::load(&path)?.to_bytes(), model.to_bytes());
    println!("checkpoint {} ({} params)", path.display(), model.denoiser.param_count());
    Ok(())
}

fn nearest_class(world: &osifl::datagen::World, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..world.num_classes {
        for d in 0..world.num_domains {
            let dist: f64 = world.cluster_mean(k, d).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
    }
    best.1
}
