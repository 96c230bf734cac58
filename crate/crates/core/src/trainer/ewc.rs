//! Quadratic anchors: diagonal-Fisher EWC and the FedProx proximal term.

use super::head::Classifier;
use super::{featurize, sample_loss_and_grad_features};
use crate::datagen::Sample;
use crate::error::{check_dim, Error, Result};

/// Parameter snapshot plus diagonal Fisher estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorState {
    pub params: Vec<f64>,
    pub fisher: Vec<f64>,
}

impl AnchorState {
    /// Pads with zero Fisher (and zero anchor values) for head rows
    /// registered after the snapshot.
    pub fn padded_to(&self, len: usize) -> Result<AnchorState> {
        if len < self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: len,
            });
        }
        let mut out = self.clone();
        out.params.resize(len, 0.0);
        out.fisher.resize(len, 0.0);
        Ok(out)
    }
}

/// Mean over samples of the squared per-sample gradient, anchored at the
/// classifier's current parameters.
pub fn estimate_fisher(classifier: &Classifier, dataset: &[Sample]) -> Result<AnchorState> {
    if dataset.is_empty() {
        return Err(Error::Protocol("Fisher estimate needs at least one sample".into()));
    }
    let feats = featurize(classifier, dataset)?;
    let mut fisher = vec![0.0; classifier.param_count()];
    let mut g = vec![0.0; classifier.param_count()];
    for f in &feats {
        g.iter_mut().for_each(|v| *v = 0.0);
        sample_loss_and_grad_features(classifier, f, 1.0, &mut g);
        fisher.iter_mut().zip(&g).for_each(|(acc, gi)| *acc += gi * gi);
    }
    let n = feats.len() as f64;
    fisher.iter_mut().for_each(|v| *v /= n);
    Ok(AnchorState {
        params: classifier.params().to_vec(),
        fisher,
    })
}

/// `λ Σ_j F_j (θ_j − θ*_j)²` and its gradient `2λF(θ − θ*)`.
pub fn ewc_penalty(anchor: &AnchorState, params: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    check_dim(anchor.params.len(), params.len())?;
    check_dim(anchor.fisher.len(), params.len())?;
    let mut value = 0.0;
    let grad = params
        .iter()
        .zip(&anchor.params)
        .zip(&anchor.fisher)
        .map(|((p, a), f)| {
            let d = p - a;
            value += f * d * d;
            2.0 * lambda * f * d
        })
        .collect();
    Ok((lambda * value, grad))
}

/// `(μ/2)‖θ − center‖²` and its gradient `μ(θ − center)`.
pub fn proximal_penalty(center: &[f64], params: &[f64], mu: f64) -> Result<(f64, Vec<f64>)> {
    check_dim(center.len(), params.len())?;
    let mut value = 0.0;
    let grad = params
        .iter()
        .zip(center)
        .map(|(p, c)| {
            let d = p - c;
            value += d * d;
            mu * d
        })
        .collect();
    Ok((0.5 * mu * value, grad))
}
