use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::schedule::{forward_noise, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::seeding::Rng;

/// Layer sizes of the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserShape {
    pub dim_x: usize,
    pub dim_e: usize,
    pub hidden: usize,
    /// Width of the sinusoidal timestep encoding; must be even.
    pub time_dim: usize,
}

impl DenoiserShape {
    pub fn input_dim(&self) -> usize {
        self.dim_x + self.time_dim + self.dim_e
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input_dim(), self.hidden, self.dim_x);
        h * i + h + h * h + h + o * h + o
    }

    /// Multiply-adds for one forward pass.
    pub fn forward_madds(&self) -> u64 {
        self.param_count() as u64
    }

    fn validate(&self) -> Result<()> {
        if self.dim_x == 0 || self.hidden == 0 {
            return Err(Error::Config("denoiser needs positive dim_x and hidden width".into()));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim must be even, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of the step index.
pub fn time_embedding(z: usize, time_dim: usize) -> Vec<f64> {
    let half = time_dim / 2;
    let mut out = Vec::with_capacity(time_dim);
    for i in 0..half {
        let freq = 1000f64.powf(-(i as f64) / half as f64);
        out.push((z as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = 1000f64.powf(-(i as f64) / half as f64);
        out.push((z as f64 * freq).cos());
    }
    out
}

fn silu(u: f64) -> f64 {
    u / (1.0 + (-u).exp())
}

fn silu_grad(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 + u * (1.0 - s))
}

/// Two-hidden-layer SiLU network `ε_θ(x_z, z, c)`.
///
/// Input is `[x_z, time_embedding(z), c]`; the all-zeros condition stands
/// for "no condition".
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    shape: DenoiserShape,
    params: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

struct Cache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .zip(b)
        .map(|(row, bi)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bi)
        .collect()
}

/// Accumulates `dW += d ⊗ x`, `db += d` and returns `Wᵀ d`.
fn affine_backward(w: &[f64], x: &[f64], d: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (((row, grow), di), gbi) in w
        .chunks_exact(x.len())
        .zip(gw.chunks_exact_mut(x.len()))
        .zip(d)
        .zip(gb.iter_mut())
    {
        *gbi += di;
        for ((wij, gij), (xj, dxj)) in row.iter().zip(grow.iter_mut()).zip(x.iter().zip(dx.iter_mut())) {
            *gij += di * xj;
            *dxj += di * wij;
        }
    }
    dx
}

impl Denoiser {
    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(shape: DenoiserShape, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let mut d = Self {
            shape,
            params: vec![0.0; shape.param_count()],
        };
        let o = d.offsets();
        let layers = [
            (o.w1, o.b1, shape.input_dim()),
            (o.w2, o.b2, shape.hidden),
            (o.w3, o.b3, shape.hidden),
        ];
        for (start, end, fan_in) in layers {
            let dist = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("valid std");
            d.params[start..end].iter_mut().for_each(|p| *p = dist.sample(rng));
        }
        Ok(d)
    }

    pub fn from_params(shape: DenoiserShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        check_dim(shape.param_count(), params.len())?;
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> DenoiserShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn null_condition(&self) -> Vec<f64> {
        vec![0.0; self.shape.dim_e]
    }

    fn offsets(&self) -> Offsets {
        let s = self.shape;
        let w1 = 0;
        let b1 = w1 + s.hidden * s.input_dim();
        let w2 = b1 + s.hidden;
        let b2 = w2 + s.hidden * s.hidden;
        let w3 = b2 + s.hidden;
        let b3 = w3 + s.dim_x * s.hidden;
        Offsets { w1, b1, w2, b2, w3, b3 }
    }

    fn forward_cached(&self, x: &[f64], z: usize, cond: &[f64]) -> Result<Cache> {
        check_dim(self.shape.dim_x, x.len())?;
        check_dim(self.shape.dim_e, cond.len())?;
        let o = self.offsets();
        let p = &self.params;
        let mut input = Vec::with_capacity(self.shape.input_dim());
        input.extend_from_slice(x);
        input.extend(time_embedding(z, self.shape.time_dim));
        input.extend_from_slice(cond);
        let pre1 = affine(&p[o.w1..o.b1], &p[o.b1..o.w2], &input);
        let h1: Vec<f64> = pre1.iter().map(|&u| silu(u)).collect();
        let pre2 = affine(&p[o.w2..o.b2], &p[o.b2..o.w3], &h1);
        let h2: Vec<f64> = pre2.iter().map(|&u| silu(u)).collect();
        let out = affine(&p[o.w3..o.b3], &p[o.b3..], &h2);
        Ok(Cache {
            input,
            pre1,
            h1,
            pre2,
            h2,
            out,
        })
    }

    pub fn predict(&self, x: &[f64], z: usize, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, z, cond)?.out)
    }

    fn backward(&self, cache: &Cache, d_out: &[f64], grads: &mut [f64]) {
        let o = self.offsets();
        let p = &self.params;
        let (g12, g3) = grads.split_at_mut(o.w3);
        let (gw3, gb3) = g3.split_at_mut(o.b3 - o.w3);
        let dh2 = affine_backward(&p[o.w3..o.b3], &cache.h2, d_out, gw3, gb3);
        let dpre2: Vec<f64> = dh2.iter().zip(&cache.pre2).map(|(d, &u)| d * silu_grad(u)).collect();
        let (g1, g2) = g12.split_at_mut(o.w2);
        let (gw2, gb2) = g2.split_at_mut(o.b2 - o.w2);
        let dh1 = affine_backward(&p[o.w2..o.b2], &cache.h1, &dpre2, gw2, gb2);
        let dpre1: Vec<f64> = dh1.iter().zip(&cache.pre1).map(|(d, &u)| d * silu_grad(u)).collect();
        let (gw1, gb1) = g1.split_at_mut(o.b1);
        affine_backward(&p[o.w1..o.b1], &cache.input, &dpre1, gw1, gb1);
    }
}

/// One fully specified training example: the noise level, noise and
/// (possibly dropped) condition are already fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseExample {
    pub x0: Vec<f64>,
    pub z: usize,
    pub eps: Vec<f64>,
    pub cond: Vec<f64>,
    pub dropped: bool,
}

/// Mean over examples of `‖ε − ε_θ(x_z, z, c)‖²` and its exact gradient.
pub fn loss_and_grads_on(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    examples: &[DenoiseExample],
) -> Result<(f64, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Protocol("empty denoiser batch".into()));
    }
    let scale = 1.0 / examples.len() as f64;
    let mut grads = vec![0.0; denoiser.param_count()];
    let mut loss = 0.0;
    for ex in examples {
        let xz = forward_noise(schedule, &ex.x0, ex.z, &ex.eps)?;
        let cache = denoiser.forward_cached(&xz, ex.z, &ex.cond)?;
        let resid: Vec<f64> = cache.out.iter().zip(&ex.eps).map(|(o, e)| o - e).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        denoiser.backward(&cache, &d_out, &mut grads);
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone)]
pub struct DenoiseStep {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// The examples actually used, including the drawn noise and conditions.
    pub trace: Vec<DenoiseExample>,
}

/// Draws `z ~ U{1..Z}`, `ε ~ N(0, I)` and drops each condition with
/// probability `p_drop`, then evaluates the denoising loss.
pub fn denoise_loss_and_grads(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &[(&[f64], &[f64])],
    p_drop: f64,
    rng: &mut Rng,
) -> Result<DenoiseStep> {
    if batch.is_empty() {
        return Err(Error::Protocol("empty denoiser batch".into()));
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Config(format!("p_drop must lie in [0, 1], got {p_drop}")));
    }
    let trace: Vec<DenoiseExample> = batch
        .iter()
        .map(|&(x0, cond)| {
            let z = rng.random_range(1..=schedule.len());
            let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
            let dropped = rng.random::<f64>() < p_drop;
            DenoiseExample {
                x0: x0.to_vec(),
                z,
                eps,
                cond: if dropped {
                    denoiser.null_condition()
                } else {
                    cond.to_vec()
                },
                dropped,
            }
        })
        .collect();
    let (loss, grads) = loss_and_grads_on(denoiser, schedule, &trace)?;
    Ok(DenoiseStep { loss, grads, trace })
}

/// Classifier-free guidance `ε_∅ + w (ε_c − ε_∅)`, requiring `w ≥ 1`.
pub fn guided_epsilon(
    denoiser: &Denoiser,
    x_z: &[f64],
    z: usize,
    cond: &[f64],
    w: f64,
) -> Result<Vec<f64>> {
    if !(w >= 1.0 && w.is_finite()) {
        return Err(Error::Config(format!("guidance weight must be >= 1, got {w}")));
    }
    let uncond = denoiser.predict(x_z, z, &denoiser.null_condition())?;
    let conditional = denoiser.predict(x_z, z, cond)?;
    Ok(combine_guidance(&uncond, &conditional, w))
}

pub fn combine_guidance(uncond: &[f64], cond: &[f64], w: f64) -> Vec<f64> {
    uncond.iter().zip(cond).map(|(u, c)| u + w * (c - u)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use crate::seeding;

    fn small_shape() -> DenoiserShape {
        DenoiserShape {
            dim_x: 2,
            dim_e: 3,
            hidden: 5,
            time_dim: 4,
        }
    }

    #[test]
    fn parameter_count_is_exact() {
        let s = DenoiserShape {
            dim_x: 16,
            dim_e: 64,
            hidden: 128,
            time_dim: 16,
        };
        assert_eq!(s.param_count(), 128 * 96 + 128 + 128 * 128 + 128 + 16 * 128 + 16);
        let d = Denoiser::new(s, &mut seeding::stream(1, &[])).unwrap();
        assert_eq!(d.param_count(), s.param_count());
    }

    #[test]
    fn rigged_zero_network_with_zero_noise_has_zero_loss() {
        let s = small_shape();
        let d = Denoiser::from_params(s, vec![0.0; s.param_count()]).unwrap();
        let sched = make_schedule(10, 1e-3, 0.05).unwrap();
        let ex = DenoiseExample {
            x0: vec![0.4, -0.3],
            z: 4,
            eps: vec![0.0, 0.0],
            cond: vec![0.1, 0.2, 0.3],
            dropped: false,
        };
        let (loss, grads) = loss_and_grads_on(&d, &sched, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn full_drop_uses_null_condition() {
        let s = small_shape();
        let mut rng = seeding::stream(3, &[]);
        let d = Denoiser::new(s, &mut rng).unwrap();
        let sched = make_schedule(10, 1e-3, 0.05).unwrap();
        let x = [0.5, 0.5];
        let c = [1.0, 1.0, 1.0];
        let batch = vec![(&x[..], &c[..]); 20];
        let step = denoise_loss_and_grads(&d, &sched, &batch, 1.0, &mut rng).unwrap();
        assert!(step.trace.iter().all(|e| e.cond == d.null_condition() && e.dropped));
        let step = denoise_loss_and_grads(&d, &sched, &batch, 0.0, &mut rng).unwrap();
        assert!(step.trace.iter().all(|e| e.cond == c && !e.dropped));
        assert!(step.trace.iter().all(|e| (1..=10).contains(&e.z)));
    }

    #[test]
    fn guidance_hand_values_and_errors() {
        let g = combine_guidance(&[0.2, 0.2], &[0.4, 0.4], 2.0);
        for v in g {
            assert!((v - 0.6).abs() < 1e-15);
        }
        let s = small_shape();
        let d = Denoiser::new(s, &mut seeding::stream(2, &[])).unwrap();
        assert!(matches!(
            guided_epsilon(&d, &[0.0, 0.0], 1, &[0.0; 3], 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finite_differences_on_tiny_denoiser() {
        let s = DenoiserShape {
            dim_x: 1,
            dim_e: 1,
            hidden: 1,
            time_dim: 0,
        };
        let mut rng = seeding::stream(11, &[]);
        let mut d = Denoiser::new(s, &mut rng).unwrap();
        let sched = make_schedule(5, 1e-3, 0.2).unwrap();
        let ex = vec![DenoiseExample {
            x0: vec![0.7],
            z: 3,
            eps: vec![-0.4],
            cond: vec![0.9],
            dropped: false,
        }];
        let (_, g) = loss_and_grads_on(&d, &sched, &ex).unwrap();
        let h = 1e-5;
        #[allow(clippy::needless_range_loop)]
        for j in 0..d.param_count() {
            let orig = d.params[j];
            d.params[j] = orig + h;
            let (lp, _) = loss_and_grads_on(&d, &sched, &ex).unwrap();
            d.params[j] = orig - h;
            let (lm, _) = loss_and_grads_on(&d, &sched, &ex).unwrap();
            d.params[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {j}: fd {fd} vs {}", g[j]);
        }
    }
}
