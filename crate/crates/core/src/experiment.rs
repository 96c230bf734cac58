//! Batch execution of (method, seed) runs and parameter sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{run_method, Benchmark, BenchmarkSpec, MethodId, RunReport, CSV_HEADER};

pub const SUMMARY_FILE: &str = "summary.csv";

/// Per-run reports of one experiment, ordered by method then seed.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub reports: Vec<RunReport>,
}

pub fn run_file_name(method: MethodId, seed: u64) -> String {
    format!("{}_seed{seed}.csv", method.as_str().to_ascii_lowercase())
}

/// Per-task summary rows of each run followed by seed means (`seed = mean`).
pub fn summary_csv(reports: &[RunReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        for t in 0..r.tasks() {
            summary_row(&mut out, r.method.as_str(), &r.seed.to_string(), t, &[r]);
        }
    }
    for (method, group) in by_method(reports) {
        let tasks = group.iter().map(|r| r.tasks()).min().unwrap_or(0);
        for t in 0..tasks {
            summary_row(&mut out, method.as_str(), "mean", t, &group);
        }
    }
    out
}

fn by_method(reports: &[RunReport]) -> Vec<(MethodId, Vec<&RunReport>)> {
    let mut groups: Vec<(MethodId, Vec<&RunReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|(m, _)| *m == r.method) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.method, vec![r])),
        }
    }
    groups
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn summary_row(out: &mut String, method: &str, seed: &str, t: usize, runs: &[&RunReport]) {
    let pooled = mean(runs.iter().map(|r| r.pooled_accuracy[t]));
    let avg = mean(runs.iter().map(|r| r.avg_accuracy[t]));
    let forget = mean(runs.iter().map(|r| r.forgetting_after_task[t]));
    let _ = write!(out, "{method},{seed},{},-1,{pooled:.6},{avg:.6},{forget:.6},", t + 1);
    if let [r] = runs {
        let _ = writeln!(out, "{},{}", r.uploads_after_task[t], r.madds_after_task[t]);
    } else {
        let up = mean(runs.iter().map(|r| r.uploads_after_task[t] as f64));
        let madds = mean(runs.iter().map(|r| r.madds_after_task[t] as f64));
        let _ = writeln!(out, "{up:.1},{madds:.1}");
    }
}

/// Builds one benchmark per seed, reusing identical specs.
struct BenchCache {
    entries: Vec<(BenchmarkSpec, u64, Arc<Benchmark>)>,
}

impl BenchCache {
    fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn prepare(&mut self, specs: &[(BenchmarkSpec, u64)]) -> Result<()> {
        let missing: Vec<&(BenchmarkSpec, u64)> = specs
            .iter()
            .filter(|(s, seed)| self.get(s, *seed).is_none())
            .collect();
        let mut unique: Vec<&(BenchmarkSpec, u64)> = Vec::new();
        for m in missing {
            if !unique.contains(&m) {
                unique.push(m);
            }
        }
        let built = unique
            .par_iter()
            .map(|(s, seed)| Benchmark::build(s, *seed).map(|b| (s.clone(), *seed, Arc::new(b))))
            .collect::<Result<Vec<_>>>()?;
        self.entries.extend(built);
        Ok(())
    }

    fn get(&self, spec: &BenchmarkSpec, seed: u64) -> Option<Arc<Benchmark>> {
        self.entries
            .iter()
            .find(|(s, sd, _)| s == spec && *sd == seed)
            .map(|(_, _, b)| b.clone())
    }
}

type RunResult = (MethodId, u64, Result<RunReport>);

fn execute(cfgs: &[&ExperimentConfig], cache: &mut BenchCache) -> Result<Vec<Vec<RunResult>>> {
    let specs: Vec<(BenchmarkSpec, u64)> = cfgs
        .iter()
        .filter(|c| !c.methods.is_empty())
        .flat_map(|c| c.seeds.iter().map(|&s| (c.bench.clone(), s)))
        .collect();
    cache.prepare(&specs)?;
    let jobs: Vec<(usize, MethodId, u64)> = cfgs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            c.methods
                .iter()
                .flat_map(move |&m| c.seeds.iter().map(move |&s| (i, m, s)))
        })
        .collect();
    let results: Vec<(usize, RunResult)> = jobs
        .par_iter()
        .map(|&(i, m, seed)| {
            let bench = cache.get(&cfgs[i].bench, seed).expect("benchmark prepared");
            (i, (m, seed, run_method(m, &bench, &cfgs[i].run, seed)))
        })
        .collect();
    let mut out: Vec<Vec<RunResult>> = (0..cfgs.len()).map(|_| Vec::new()).collect();
    for (i, r) in results {
        out[i].push(r);
    }
    Ok(out)
}

fn all_ok(results: Vec<RunResult>) -> Result<Vec<RunReport>> {
    results.into_iter().map(|(_, _, r)| r).collect()
}

/// Runs every (method, seed) pair of `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let results = execute(&[cfg], &mut BenchCache::new())?;
    Ok(ExperimentOutput {
        reports: all_ok(results.into_iter().flatten().collect())?,
    })
}

impl ExperimentOutput {
    pub fn summary_csv(&self) -> String {
        summary_csv(&self.reports)
    }

    /// Writes one CSV per run plus the summary; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for r in &self.reports {
            let path = dir.join(run_file_name(r.method, r.seed));
            std::fs::write(&path, r.to_csv())?;
            paths.push(path);
        }
        let path = dir.join(SUMMARY_FILE);
        std::fs::write(&path, self.summary_csv())?;
        paths.push(path);
        Ok(paths)
    }
}

/// Runs the experiment and writes its CSVs to `dir`. When a run fails,
/// the reports that did finish are written with a `.partial.csv` suffix and
/// the failures are listed in `FAILED.txt`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let results: Vec<RunResult> = execute(&[cfg], &mut BenchCache::new())?
        .into_iter()
        .flatten()
        .collect();
    let failures: Vec<String> = results
        .iter()
        .filter_map(|(m, s, r)| r.as_ref().err().map(|e| format!("{m} seed {s}: {e}")))
        .collect();
    let output = ExperimentOutput {
        reports: results.into_iter().filter_map(|(_, _, r)| r.ok()).collect(),
    };
    if failures.is_empty() {
        return output.write(dir);
    }
    std::fs::create_dir_all(dir)?;
    for r in &output.reports {
        let name = run_file_name(r.method, r.seed).replace(".csv", ".partial.csv");
        std::fs::write(dir.join(name), r.to_csv())?;
    }
    std::fs::write(dir.join("summary.partial.csv"), output.summary_csv())?;
    std::fs::write(dir.join("FAILED.txt"), failures.join("\n") + "\n")?;
    Err(Error::Protocol(format!("{} run(s) failed: {}", failures.len(), failures.join("; "))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    P,
    ClientsPerTask,
    Guidance,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::ClientsPerTask => "clients_per_task",
            SweepAxis::Guidance => "w",
        }
    }

    fn key(self) -> &'static str {
        match self {
            SweepAxis::Guidance => "guidance",
            other => other.as_str(),
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(SweepAxis::P),
            "clients_per_task" | "clients" => Ok(SweepAxis::ClientsPerTask),
            "w" | "guidance" => Ok(SweepAxis::Guidance),
            other => Err(Error::Config(format!(
                "invalid sweep axis `{other}` (expected p, clients_per_task or w)"
            ))),
        }
    }
}

pub const SWEEP_HEADER_PREFIX: &str = "axis,value,";

/// Final-task result of every run at each axis value.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub reports: Vec<Vec<RunReport>>,
}

impl SweepOutput {
    /// Seed-mean final accuracy of `method` at each axis value.
    pub fn mean_final_accuracy(&self, method: MethodId) -> Vec<f64> {
        self.reports
            .iter()
            .map(|rs| mean(rs.iter().filter(|r| r.method == method).map(RunReport::final_avg_accuracy)))
            .collect()
    }

    /// One summary row per (value, method, seed) plus seed means.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER_PREFIX}{CSV_HEADER}\n");
        for (value, reports) in self.values.iter().zip(&self.reports) {
            let mut rows = String::new();
            for r in reports {
                summary_row(&mut rows, r.method.as_str(), &r.seed.to_string(), r.tasks() - 1, &[r]);
            }
            for (method, group) in by_method(reports) {
                let last = group.iter().map(|r| r.tasks()).min().unwrap_or(1) - 1;
                summary_row(&mut rows, method.as_str(), "mean", last, &group);
            }
            for line in rows.lines() {
                let _ = writeln!(out, "{},{value},{line}", self.axis.as_str());
            }
        }
        out
    }
}

/// Re-runs the experiment with `axis` set to each value in turn; worlds and
/// seeds are shared across values.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cfgs = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(axis.key(), v.trim())
                .map_err(|m| Error::Config(format!("{} = {v}: {m}", axis.as_str())))?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ExperimentConfig> = cfgs.iter().collect();
    let reports = execute(&refs, &mut BenchCache::new())?
        .into_iter()
        .map(all_ok)
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepOutput {
        axis,
        values: values.iter().map(|v| v.trim().to_string()).collect(),
        reports,
    })
}

/// Pooled-accuracy table keyed by method, for quick inspection.
pub fn final_accuracy_table(reports: &[RunReport]) -> BTreeMap<MethodId, f64> {
    by_method(reports)
        .into_iter()
        .map(|(m, g)| (m, mean(g.iter().map(|r| r.final_avg_accuracy()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::GeneratorKind;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        let b = &mut c.bench;
        b.dim_x = 8;
        b.num_classes = 6;
        b.num_domains = 2;
        b.dim_e = 16;
        b.tasks = 3;
        b.classes_per_task = 2;
        b.n_per_class = 15;
        b.test_per_class = 15;
        b.generator.kind = GeneratorKind::Surrogate;
        b.generator.pool_per_pair = 10;
        c.run.z_per_class = 15;
        c.run.train.epochs_per_task = 2;
        c.run.rounds = 2;
        c.seeds = vec![1, 2];
        c
    }

    #[test]
    fn all_methods_times_seeds() {
        let out = run_experiment(&small()).unwrap();
        assert_eq!(out.reports.len(), 7 * 2);
        let summary = out.summary_csv();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 14 * 3 + 7 * 3);
        assert!(lines.iter().filter(|l| l.contains(",mean,")).count() == 21);
        assert_eq!(out.reports[0].method, MethodId::Osifl);
        assert_eq!(out.reports[1].seed, 2);
    }

    #[test]
    fn empty_method_list_is_a_no_op() {
        let mut c = small();
        c.methods.clear();
        let out = run_experiment(&c).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.summary_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.methods = vec![MethodId::Osifl, MethodId::FedProx];
        let a = run_to_dir(&c, &dir.path().join("a")).unwrap();
        let b = run_to_dir(&c, &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 5);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }

    #[test]
    fn single_value_sweep_matches_experiment() {
        let c = small();
        let s = sweep(&c, SweepAxis::P, &["5".into()]).unwrap();
        let e = run_experiment(&c).unwrap();
        assert_eq!(s.reports[0], e.reports);
        let csv = s.to_csv();
        assert!(csv.starts_with("axis,value,method,"));
        assert_eq!(csv.lines().count(), 1 + 14 + 7);
    }

    #[test]
    fn sweep_axis_validation() {
        assert!("lr".parse::<SweepAxis>().is_err());
        assert!(sweep(&small(), SweepAxis::P, &[]).is_err());
        assert!(sweep(&small(), SweepAxis::Guidance, &["0.5".into()]).is_err());
        let s = sweep(&small(), SweepAxis::ClientsPerTask, &["1".into(), "2".into()]).unwrap();
        assert_eq!(s.mean_final_accuracy(MethodId::Osifl).len(), 2);
    }
}
