//! Multi-round baselines next to the one-shot protocol, with upload and
//! compute ledgers.

use osifl::orchestrator::{run_method, Benchmark, BenchmarkSpec, GeneratorKind, MethodId, RunConfig};

fn main() -> osifl::Result<()> {
    let mut spec = BenchmarkSpec {
        clients_per_task: 3,
        ..BenchmarkSpec::default()
    };
    spec.generator.kind = GeneratorKind::Surrogate;
    let seed = 42;
    let bench = Benchmark::build(&spec, seed)?;
    let cfg = RunConfig::default();

    println!("{:<14} {:>8} {:>10} {:>14} {:>16}", "method", "accuracy", "forgetting", "upload floats", "madds");
    for method in MethodId::ALL {
        let r = run_method(method, &bench, &cfg, seed)?;
        println!(
            "{:<14} {:>8.4} {:>10.4} {:>14} {:>16}",
            method.as_str(),
            r.final_avg_accuracy(),
            r.forgetting.mean,
            r.comms.total_floats(),
            r.compute.total()
        );
    }

    let accounting = RunConfig {
        reported_param_count: Some(11_689_512),
        ..cfg
    };
    let r = run_method(MethodId::FedAvg, &bench, &accounting, seed)?;
    let per_client = r.comms.per_client.values().next().map(|c| c.floats).unwrap_or(0);
    println!("\nFedAvg with an 11.7M-parameter model: {per_client} floats per client");
    Ok(())
}
