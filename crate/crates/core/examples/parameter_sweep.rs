//! Retained-sample and client-count sweeps on the default benchmark.

use osifl::config::ExperimentConfig;
use osifl::experiment::{sweep, SweepAxis};
use osifl::orchestrator::{GeneratorKind, MethodId};

fn main() -> osifl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.bench.generator.kind = GeneratorKind::Surrogate;
    cfg.methods = vec![MethodId::Osifl];

    for (axis, values) in [
        (SweepAxis::P, vec!["0", "1", "2", "5", "10"]),
        (SweepAxis::ClientsPerTask, vec!["1", "3", "6"]),
    ] {
        let values: Vec<String> = values.into_iter().map(String::from).collect();
        let result = sweep(&cfg, axis, &values)?;
        for (v, acc) in values.iter().zip(result.mean_final_accuracy(MethodId::Osifl)) {
            println!("{} = {v:>3}: mean accuracy {acc:.4}", axis.as_str());
        }
    }
    Ok(())
}
