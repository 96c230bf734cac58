use osifl::datagen::IncrementMode;
use osifl::diffusion::DiffusionHP;
use osifl::orchestrator::{
    run_method, Benchmark, BenchmarkSpec, GeneratorKind, GeneratorSpec, MethodId, RunConfig,
};
use osifl::trainer::TrainHP;

fn small_spec(kind: GeneratorKind) -> BenchmarkSpec {
    BenchmarkSpec {
        dim_x: 8,
        num_classes: 8,
        num_domains: 2,
        dim_e: 32,
        tasks: 4,
        classes_per_task: 2,
        n_per_class: 30,
        test_per_class: 30,
        generator: GeneratorSpec {
            kind,
            steps: 50,
            pool_per_pair: 60,
            hp: DiffusionHP {
                hidden: 64,
                train_steps: 800,
                ..DiffusionHP::default()
            },
            ..GeneratorSpec::default()
        },
        ..BenchmarkSpec::default()
    }
}

fn cfg() -> RunConfig {
    RunConfig {
        z_per_class: 30,
        train: TrainHP {
            epochs_per_task: 10,
            ..TrainHP::default()
        },
        rounds: 5,
        ..RunConfig::default()
    }
}

#[test]
fn ddpm_replay_beats_naive_fine_tuning() {
    let bench = Benchmark::build(&small_spec(GeneratorKind::Ddpm), 42).unwrap();
    let replay = run_method(MethodId::Osifl, &bench, &cfg(), 42).unwrap();
    let naive = run_method(MethodId::OscarIl, &bench, &cfg(), 42).unwrap();
    let (a, b) = (replay.final_avg_accuracy(), naive.final_avg_accuracy());
    assert!(a > b + 0.10, "replay {a} vs naive {b}");
    assert!(replay.forgetting.mean < naive.forgetting.mean);
    // Sampling cost dominates the one-shot compute ledger.
    assert!(replay.compute.sampling > replay.compute.head);
}

#[test]
fn domain_incremental_suite_runs_every_method() {
    let spec = BenchmarkSpec {
        mode: IncrementMode::DomainIncremental,
        num_classes: 4,
        num_domains: 3,
        tasks: 3,
        ..small_spec(GeneratorKind::Surrogate)
    };
    let bench = Benchmark::build(&spec, 7).unwrap();
    for t in &bench.suite.tasks {
        assert_eq!(t.classes.len(), 4);
        assert_eq!(t.domains.len(), 1);
    }
    for m in MethodId::ALL {
        let r = run_method(m, &bench, &cfg(), 7).unwrap();
        assert_eq!(r.tasks(), 3);
        assert!(r.final_avg_accuracy() > 0.25, "{m}: {}", r.final_avg_accuracy());
    }
}

#[test]
fn unequal_task_sizes() {
    let spec = BenchmarkSpec {
        class_sizes: Some(vec![1, 3, 2]),
        ..small_spec(GeneratorKind::Surrogate)
    };
    let bench = Benchmark::build(&spec, 3).unwrap();
    let sizes: Vec<usize> = bench.suite.tasks.iter().map(|t| t.classes.len()).collect();
    assert_eq!(sizes, vec![1, 3, 2]);
    let r = run_method(MethodId::Osifl, &bench, &cfg(), 3).unwrap();
    let uploads: Vec<u64> = r.comms.per_client.values().map(|c| c.floats).collect();
    assert_eq!(uploads, vec![32, 96, 64]);
}
