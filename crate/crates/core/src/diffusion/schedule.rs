use crate::error::{check_dim, Error, Result};

/// Linear β schedule with derived `α_z = 1 − β_z` and `ᾱ_z = Π_{s≤z} α_s`.
///
/// Steps are 1-based throughout; index `z` refers to the z-th noising step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        let span = (beta_max - beta_min) / (steps - 1) as f64;
        (0..steps).map(|i| beta_min + span * i as f64).collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        if betas.iter().zip(&alphas).any(|(b, a)| !(*b > 0.0 && *b < 1.0 && *a < 1.0)) {
            return Err(Error::Config("every beta must lie strictly inside (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn index(&self, z: usize) -> Result<usize> {
        if (1..=self.len()).contains(&z) {
            Ok(z - 1)
        } else {
            Err(Error::OutOfRange(format!("step {z} outside 1..={}", self.len())))
        }
    }

    pub fn beta(&self, z: usize) -> Result<f64> {
        Ok(self.betas[self.index(z)?])
    }

    pub fn alpha(&self, z: usize) -> Result<f64> {
        Ok(self.alphas[self.index(z)?])
    }

    pub fn alpha_bar(&self, z: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(z)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Closed-form noising `x_z = √ᾱ_z x₀ + √(1 − ᾱ_z) ε`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f64], z: usize, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), eps.len())?;
    let ab = schedule.alpha_bar(z)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}
