use crate::datagen::TestSet;
use crate::error::{Error, Result};
use crate::trainer::Classifier;

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    /// Top-1 accuracy on each test set, in the given order.
    pub per_task: Vec<f64>,
    /// Mean of `per_task`; the headline "accuracy after each task".
    pub mean: f64,
    /// Accuracy on the union of the test sets.
    pub pooled: f64,
}

pub fn evaluate(classifier: &Classifier, tests: &[TestSet]) -> Result<AccuracyRow> {
    if tests.is_empty() {
        return Err(Error::Protocol("no test sets to evaluate".into()));
    }
    let mut per_task = Vec::with_capacity(tests.len());
    let (mut hits, mut total) = (0usize, 0usize);
    for t in tests {
        if t.samples.is_empty() {
            return Err(Error::Protocol(format!("test set of task {} is empty", t.task_id)));
        }
        classifier.check_covers(&t.samples).map_err(|_| {
            Error::Protocol(format!("head does not cover every class of task {}", t.task_id))
        })?;
        let mut correct = 0;
        for s in &t.samples {
            if classifier.predict(&s.x)? == s.y {
                correct += 1;
            }
        }
        per_task.push(correct as f64 / t.samples.len() as f64);
        hits += correct;
        total += t.samples.len();
    }
    let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(AccuracyRow {
        per_task,
        mean,
        pooled: hits as f64 / total as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forgetting {
    /// One entry per task except the last.
    pub per_task: Vec<f64>,
    pub mean: f64,
}

/// `f_j = max_{t ≥ j} A[t][j] − A[m−1][j]` for every task `j < m − 1`.
pub fn forgetting(accuracy: &[Vec<f64>]) -> Result<Forgetting> {
    let m = accuracy.len();
    if m == 0 {
        return Err(Error::Protocol("accuracy matrix has no rows".into()));
    }
    for (t, row) in accuracy.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::Protocol(format!(
                "row {t} has {} entries, expected {}",
                row.len(),
                t + 1
            )));
        }
    }
    let last = &accuracy[m - 1];
    let per_task: Vec<f64> = (0..m - 1)
        .map(|j| {
            let best = accuracy[j..]
                .iter()
                .map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .collect();
    let mean = if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().sum::<f64>() / per_task.len() as f64
    };
    Ok(Forgetting { per_task, mean })
}
