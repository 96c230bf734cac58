//! Server-side classifier training.
//!
//! Every objective here is a weighted sum of per-source mean cross-entropy
//! losses, optionally plus a quadratic penalty:
//!
//! ```text
//! J(θ) = Σ_s (1/|S_s|) Σ_{(x,y)∈S_s} ℓ(f_θ(x), y)  [+ penalty(θ)]
//! ```
//!
//! Naive incremental training uses the current task as the only source,
//! joint training uses one source per task, and replay training adds one
//! source per retained exemplar set. All of them run through
//! [`train_weighted`], which draws shuffled minibatches from the pooled
//! samples and rescales each sample by `N / (|S_s| · b)` so the minibatch
//! loss is an unbiased estimate of `J`.

pub mod adam;
pub mod ewc;
pub mod head;

use rand::seq::SliceRandom;

pub use adam::{adam_step, AdamHp, AdamState};
pub use ewc::{estimate_fisher, ewc_penalty, proximal_penalty, AnchorState};
pub use head::Classifier;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::ledger::{ComputeLedger, OpKind};
use crate::seeding::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHP {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_ewc: f64,
    pub mu_prox: f64,
    /// Start every training call with fresh Adam moments.
    pub reset_moments: bool,
}

impl Default for TrainHP {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs_per_task: 20,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_ewc: 0.1,
            mu_prox: 0.01,
            reset_moments: true,
        }
    }
}

impl TrainHP {
    pub fn adam(&self) -> AdamHp {
        AdamHp {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("lambda_ewc", self.lambda_ewc),
            ("mu_prox", self.mu_prox),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.epochs_per_task == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Extra term added to the data objective.
#[derive(Debug, Clone, Copy)]
pub enum Penalty<'a> {
    None,
    Ewc { anchor: &'a AnchorState, lambda: f64 },
    Proximal { center: &'a [f64], mu: f64 },
}

impl Penalty<'_> {
    fn value_and_grad(&self, params: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        match *self {
            Penalty::None => Ok(None),
            Penalty::Ewc { anchor, lambda } => ewc_penalty(anchor, params, lambda).map(Some),
            Penalty::Proximal { center, mu } => proximal_penalty(center, params, mu).map(Some),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean minibatch objective estimate per epoch.
    pub epoch_losses: Vec<f64>,
    pub compute: ComputeLedger,
}

pub(crate) struct Featurized {
    pub phi: Vec<f64>,
    pub row: usize,
}

pub(crate) fn featurize(classifier: &Classifier, samples: &[Sample]) -> Result<Vec<Featurized>> {
    samples
        .iter()
        .map(|s| {
            Ok(Featurized {
                row: classifier.row_of(s.y)?,
                phi: classifier.features(&s.x)?,
            })
        })
        .collect()
}

/// Adds `weight · ∇ℓ` for one featurized sample into `grads` and returns
/// the unweighted loss.
pub(crate) fn sample_loss_and_grad_features(
    classifier: &Classifier,
    f: &Featurized,
    weight: f64,
    grads: &mut [f64],
) -> f64 {
    let logits = classifier.logits_from_features(&f.phi);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[f.row];
    let row_len = classifier.row_len();
    for (c, (e, g_row)) in exps.iter().zip(grads.chunks_exact_mut(row_len)).enumerate() {
        let p = e / sum;
        let delta = weight * (p - if c == f.row { 1.0 } else { 0.0 });
        if delta == 0.0 {
            continue;
        }
        let (gw, gb) = g_row.split_at_mut(row_len - 1);
        gw.iter_mut().zip(&f.phi).for_each(|(g, phi)| *g += delta * phi);
        gb[0] += delta;
    }
    loss
}

/// Mean softmax cross-entropy over `batch` and its exact gradient with
/// respect to the head parameters. Weight decay is not included; the
/// optimizer applies it.
pub fn ce_loss_and_grads(classifier: &Classifier, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Protocol("empty batch".into()));
    }
    let feats = featurize(classifier, batch)?;
    let w = 1.0 / feats.len() as f64;
    let mut grads = vec![0.0; classifier.param_count()];
    let loss = feats
        .iter()
        .map(|f| sample_loss_and_grad_features(classifier, f, w, &mut grads))
        .sum::<f64>()
        * w;
    Ok((loss, grads))
}

/// Per-sample weight `1/|S_s|` of each source, as used by the joint and
/// replay objectives.
pub fn source_weights(sizes: &[usize]) -> Vec<f64> {
    sizes
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
        .collect()
}

/// `Σ_s mean_{S_s} ℓ` evaluated on the full sources (empty ones skipped).
pub fn weighted_objective(classifier: &Classifier, sources: &[&[Sample]]) -> Result<f64> {
    let mut scratch = vec![0.0; classifier.param_count()];
    let mut total = 0.0;
    for src in sources.iter().filter(|s| !s.is_empty()) {
        let feats = featurize(classifier, src)?;
        let sum: f64 = feats
            .iter()
            .map(|f| sample_loss_and_grad_features(classifier, f, 0.0, &mut scratch))
            .sum();
        total += sum / feats.len() as f64;
    }
    Ok(total)
}

/// Minibatch Adam on the weighted multi-source objective.
pub fn train_weighted(
    classifier: &mut Classifier,
    sources: &[&[Sample]],
    penalty: Penalty<'_>,
    hp: &TrainHP,
    rng: &mut Rng,
) -> Result<TrainSummary> {
    hp.validate()?;
    let mut pool: Vec<(Featurized, usize)> = Vec::new();
    for src in sources {
        for f in featurize(classifier, src)? {
            pool.push((f, src.len()));
        }
    }
    if pool.is_empty() {
        return Err(Error::Protocol("no training samples".into()));
    }
    if hp.reset_moments {
        classifier.optimizer.reset(classifier.param_count());
    }
    let n = pool.len();
    let classes = classifier.num_classes() as u64;
    let dim = classifier.dim_e() as u64;
    let params = classifier.param_count() as u64;
    let adam = hp.adam();

    let mut summary = TrainSummary::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = vec![0.0; classifier.param_count()];
    for _ in 0..hp.epochs_per_task {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let b = chunk.len();
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in chunk {
                let (f, src_len) = &pool[i];
                let scale = n as f64 / *src_len as f64 / b as f64;
                loss += scale * sample_loss_and_grad_features(classifier, f, scale, &mut grads);
            }
            if let Some((value, pg)) = penalty.value_and_grad(classifier.params())? {
                loss += value;
                grads.iter_mut().zip(pg).for_each(|(g, p)| *g += p);
                summary.compute.record(OpKind::Penalty { params });
            }
            let (p, opt) = classifier.split_mut();
            adam_step(opt, p, &grads, &adam)?;

            let b = b as u64;
            summary.compute.record(OpKind::HeadForward {
                batch: b,
                classes,
                dim,
            });
            summary.compute.record(OpKind::HeadBackward {
                batch: b,
                classes,
                dim,
            });
            summary.compute.record(OpKind::OptimizerStep { params });
            summary.steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        summary.epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(summary)
}

/// Fine-tunes on the newest task only.
pub fn train_naive(
    classifier: &mut Classifier,
    current: &[Sample],
    hp: &TrainHP,
    rng: &mut Rng,
) -> Result<TrainSummary> {
    if current.is_empty() {
        return Err(Error::Protocol("current task has no samples".into()));
    }
    train_weighted(classifier, &[current], Penalty::None, hp, rng)
}

/// Sum of per-task mean losses over every task seen so far.
pub fn train_joint(
    classifier: &mut Classifier,
    tasks: &[&[Sample]],
    hp: &TrainHP,
    rng: &mut Rng,
) -> Result<TrainSummary> {
    train_weighted(classifier, tasks, Penalty::None, hp, rng)
}

/// New-task mean loss plus the mean loss of every retained exemplar set.
pub fn train_osifl(
    classifier: &mut Classifier,
    current: &[Sample],
    replay: &[Vec<Sample>],
    hp: &TrainHP,
    rng: &mut Rng,
) -> Result<TrainSummary> {
    if current.is_empty() {
        return Err(Error::Protocol("current task has no samples".into()));
    }
    let mut sources: Vec<&[Sample]> = vec![current];
    sources.extend(replay.iter().map(Vec::as_slice));
    train_weighted(classifier, &sources, Penalty::None, hp, rng)
}

/// Full-data value of the replay objective.
pub fn osifl_objective(
    classifier: &Classifier,
    current: &[Sample],
    replay: &[Vec<Sample>],
) -> Result<f64> {
    let mut sources: Vec<&[Sample]> = vec![current];
    sources.extend(replay.iter().map(Vec::as_slice));
    weighted_objective(classifier, &sources)
}

/// Naive loss plus `λ Σ F (θ − θ*)²`.
pub fn train_regularized(
    classifier: &mut Classifier,
    current: &[Sample],
    anchor: &AnchorState,
    lambda: f64,
    hp: &TrainHP,
    rng: &mut Rng,
) -> Result<TrainSummary> {
    if current.is_empty() {
        return Err(Error::Protocol("current task has no samples".into()));
    }
    let anchor = anchor.padded_to(classifier.param_count())?;
    let penalty = if lambda == 0.0 {
        Penalty::None
    } else {
        Penalty::Ewc {
            anchor: &anchor,
            lambda,
        }
    };
    train_weighted(classifier, &[current], penalty, hp, rng)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::datagen::{make_task_suite, draw_client_shards, IncrementMode, World};
    use crate::encoder::FrozenEncoder;
    use crate::seeding;

    fn two_task_world(seed: u64) -> (Arc<FrozenEncoder>, Vec<Vec<Sample>>, Vec<Vec<usize>>) {
        let world = World::build(16, 4, 1, 0.5, seed).unwrap();
        let suite = make_task_suite(&world, IncrementMode::ClassIncremental, 2, 2).unwrap();
        let (shards, _) = draw_client_shards(&world, &suite, 1, 50, 10, seed).unwrap();
        let enc = Arc::new(FrozenEncoder::new(16, 32, seed).unwrap());
        let classes = suite.tasks.iter().map(|t| t.classes.clone()).collect();
        (enc, shards.into_iter().map(|s| s.samples).collect(), classes)
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let enc = Arc::new(FrozenEncoder::new(3, 4, 1).unwrap());
        let c = Classifier::with_classes(enc, &[0, 1, 2, 3, 4]).unwrap();
        let batch = vec![Sample {
            x: vec![0.1, 0.2, 0.3],
            y: 2,
            domain: None,
            task: None,
        }];
        let (loss, _) = ce_loss_and_grads(&c, &batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn duplicated_batch_has_same_mean_loss() {
        let (enc, data, classes) = two_task_world(3);
        let mut c = Classifier::with_classes(enc, &classes[0]).unwrap();
        let p: Vec<f64> = (0..c.param_count()).map(|i| (i as f64 * 0.3).sin()).collect();
        c.set_params(p).unwrap();
        let batch = &data[0][..10];
        let doubled: Vec<Sample> = batch.iter().chain(batch).cloned().collect();
        let (a, ga) = ce_loss_and_grads(&c, batch).unwrap();
        let (b, gb) = ce_loss_and_grads(&c, &doubled).unwrap();
        assert!((a - b).abs() < 1e-14);
        for (x, y) in ga.iter().zip(gb) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn unregistered_class_is_rejected() {
        let (enc, data, classes) = two_task_world(3);
        let c = Classifier::with_classes(enc, &classes[0]).unwrap();
        assert!(matches!(ce_loss_and_grads(&c, &data[1][..1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn one_epoch_full_batch_is_one_step() {
        let (enc, data, classes) = two_task_world(5);
        let mut c = Classifier::with_classes(enc, &classes[0]).unwrap();
        let hp = TrainHP {
            epochs_per_task: 1,
            batch_size: data[0].len(),
            ..TrainHP::default()
        };
        let s = train_naive(&mut c, &data[0], &hp, &mut seeding::stream(1, &[])).unwrap();
        assert_eq!(s.steps, 1);
        assert_eq!(c.optimizer_state().t, 1);
    }

    #[test]
    fn naive_training_reduces_loss() {
        let mut improvement = 0.0;
        for seed in [42, 18, 50] {
            let (enc, data, classes) = two_task_world(seed);
            let mut c = Classifier::with_classes(enc, &classes[0]).unwrap();
            let (before, _) = ce_loss_and_grads(&c, &data[0]).unwrap();
            train_naive(&mut c, &data[0], &TrainHP::default(), &mut seeding::stream(seed, &[])).unwrap();
            let (after, _) = ce_loss_and_grads(&c, &data[0]).unwrap();
            improvement += before - after;
        }
        assert!(improvement > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let (enc, data, classes) = two_task_world(9);
        let run = || {
            let mut c = Classifier::with_classes(enc.clone(), &classes[0]).unwrap();
            train_naive(&mut c, &data[0], &TrainHP::default(), &mut seeding::stream(4, &[])).unwrap();
            c.params().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn joint_weights_follow_task_sizes() {
        let w = source_weights(&[10, 1000]);
        assert!((w[0] / w[1] - 100.0).abs() < 1e-9);
        assert_eq!(source_weights(&[0, 4]), vec![0.0, 0.25]);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let (enc, data, classes) = two_task_world(9);
        let mut c = Classifier::with_classes(enc, &classes[0]).unwrap();
        let hp = TrainHP::default();
        let mut rng = seeding::stream(1, &[]);
        assert!(train_naive(&mut c, &[], &hp, &mut rng).is_err());
        assert!(train_joint(&mut c, &[&[], &[]], &hp, &mut rng).is_err());
        assert!(train_osifl(&mut c, &[], &[data[0].clone()], &hp, &mut rng).is_err());
    }

    #[test]
    fn replay_reduces_forgetting_on_two_task_world() {
        let hp = TrainHP::default();
        let mut gap = 0.0;
        for seed in [42u64, 18, 50] {
            let (enc, data, classes) = two_task_world(seed);
            let accuracy = |c: &Classifier| {
                data[0].iter().filter(|s| c.predict(&s.x).unwrap() == s.y).count() as f64
                    / data[0].len() as f64
            };
            let mut base = Classifier::with_classes(enc.clone(), &classes[0]).unwrap();
            train_naive(&mut base, &data[0], &hp, &mut seeding::stream(seed, &[1])).unwrap();
            base.expand_head(&classes[1]).unwrap();

            let mut naive = base.clone();
            train_naive(&mut naive, &data[1], &hp, &mut seeding::stream(seed, &[2])).unwrap();

            // p = 5 per class, taken as the first five of each class.
            let exemplars: Vec<Sample> = classes[0]
                .iter()
                .flat_map(|&k| data[0].iter().filter(move |s| s.y == k).take(5).cloned())
                .collect();
            let mut replay = base.clone();
            train_osifl(&mut replay, &data[1], &[exemplars], &hp, &mut seeding::stream(seed, &[2]))
                .unwrap();
            gap += accuracy(&replay) - accuracy(&naive);
        }
        assert!(gap / 3.0 >= 0.10, "mean gap {}", gap / 3.0);
    }
}
