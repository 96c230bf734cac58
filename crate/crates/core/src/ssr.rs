//! Selective sample retention: gradient-norm importance, class-balanced
//! top-p selection and the task-indexed exemplar memory.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::trainer::{featurize, sample_loss_and_grad_features, Classifier};

/// Parameters at which synthetic samples of task `t` are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringPoint {
    /// θ_{t−1}, the head before training on task t.
    PreUpdate,
    /// θ_t, the head after training on task t.
    PostUpdate,
}

impl ScoringPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringPoint::PreUpdate => "pre_update",
            ScoringPoint::PostUpdate => "post_update",
        }
    }
}

impl std::str::FromStr for ScoringPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_update" => Ok(ScoringPoint::PreUpdate),
            "post_update" => Ok(ScoringPoint::PostUpdate),
            other => Err(Error::Config(format!("unknown scoring point `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// `‖∇_θ ℓ(f_θ(x), y)‖₂` over the head parameters.
    GradientNorm,
    /// The per-sample cross-entropy itself.
    Loss,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::GradientNorm => "gradient_norm",
            ScoreKind::Loss => "loss",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient_norm" => Ok(ScoreKind::GradientNorm),
            "loss" => Ok(ScoreKind::Loss),
            other => Err(Error::Config(format!("unknown score kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample: Sample,
    pub score: f64,
    /// Position of the sample within its per-class synthetic set.
    pub index: usize,
}

fn score_all(classifier: &Classifier, samples: &[Sample], kind: ScoreKind) -> Result<Vec<f64>> {
    let feats = featurize(classifier, samples)?;
    let mut g = vec![0.0; classifier.param_count()];
    Ok(feats
        .iter()
        .map(|f| {
            g.iter_mut().for_each(|v| *v = 0.0);
            let loss = sample_loss_and_grad_features(classifier, f, 1.0, &mut g);
            match kind {
                ScoreKind::GradientNorm => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
                ScoreKind::Loss => loss,
            }
        })
        .collect())
}

/// Euclidean norm of the single-sample cross-entropy gradient.
pub fn importance_score(classifier: &Classifier, sample: &Sample) -> Result<f64> {
    Ok(score_all(classifier, std::slice::from_ref(sample), ScoreKind::GradientNorm)?[0])
}

/// Indices of the `p` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_p_indices(scores: &[f64], p: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(p);
    order.sort_unstable();
    order
}

/// The size-`p` subset of one class's synthetic samples with the largest
/// total score.
pub fn select_exemplars(
    classifier: &Classifier,
    class_samples: &[Sample],
    p: usize,
    kind: ScoreKind,
) -> Result<Vec<ScoredSample>> {
    if p == 0 || class_samples.is_empty() {
        return Ok(Vec::new());
    }
    let scores = score_all(classifier, class_samples, kind)?;
    Ok(top_p_indices(&scores, p)
        .into_iter()
        .map(|i| ScoredSample {
            sample: class_samples[i].clone(),
            score: scores[i],
            index: i,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskExemplars {
    pub task_id: usize,
    pub per_class: BTreeMap<usize, Vec<ScoredSample>>,
}

impl TaskExemplars {
    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.per_class
            .values()
            .flatten()
            .map(|s| s.sample.clone())
            .collect()
    }
}

/// Append-only exemplar store, at most `p` samples per (task, class).
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    p: usize,
    tasks: Vec<TaskExemplars>,
}

impl ExemplarMemory {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            tasks: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn tasks(&self) -> &[TaskExemplars] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(TaskExemplars::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_task(&self, task: usize) -> bool {
        self.tasks.iter().any(|t| t.task_id == task)
    }

    pub fn update_memory(
        &mut self,
        task: usize,
        sets: BTreeMap<usize, Vec<ScoredSample>>,
    ) -> Result<()> {
        if self.contains_task(task) {
            return Err(Error::Protocol(format!("task {task} already stored in memory")));
        }
        if let Some((k, v)) = sets.iter().find(|(_, v)| v.len() > self.p) {
            return Err(Error::Protocol(format!(
                "class {k} offers {} exemplars, limit is {}",
                v.len(),
                self.p
            )));
        }
        self.tasks.push(TaskExemplars {
            task_id: task,
            per_class: sets,
        });
        Ok(())
    }

    /// Exemplar sets of every stored task other than `current`, in arrival
    /// order.
    pub fn replay_sets(&self, current: usize) -> Vec<Vec<Sample>> {
        self.tasks
            .iter()
            .filter(|t| t.task_id != current)
            .map(TaskExemplars::samples)
            .collect()
    }

    /// Tab-separated dump with header
    /// `task class sample_index score x0 x1 …`, one row per exemplar.
    pub fn dump_table(&self) -> String {
        let width = self
            .tasks
            .iter()
            .flat_map(|t| t.per_class.values().flatten())
            .map(|s| s.sample.x.len())
            .max()
            .unwrap_or(0);
        let mut out = String::from("task\tclass\tsample_index\tscore");
        for j in 0..width {
            let _ = write!(out, "\tx{j}");
        }
        out.push('\n');
        for t in &self.tasks {
            for (k, list) in &t.per_class {
                for s in list {
                    let _ = write!(out, "{}\t{}\t{}\t{:e}", t.task_id, k, s.index, s.score);
                    for v in &s.sample.x {
                        let _ = write!(out, "\t{v:e}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}
