use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::denoiser::{denoise_loss_and_grads, guided_epsilon, Denoiser, DenoiserShape};
use super::schedule::NoiseSchedule;
use crate::datagen::Sample;
use crate::encoder::{ByteReader, FrozenEncoder};
use crate::error::{check_dim, Error, Result};
use crate::seeding::{self, Rng};
use crate::trainer::{adam_step, AdamHp, AdamState};

const MODEL_MAGIC: &[u8; 4] = b"OSDM";
const MODEL_VERSION: u32 = 1;

/// Denoiser size and pretraining settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionHP {
    pub hidden: usize,
    pub time_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_drop: f64,
}

impl Default for DiffusionHP {
    fn default() -> Self {
        Self {
            hidden: 128,
            time_dim: 16,
            train_steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            p_drop: 0.1,
        }
    }
}

/// Mean embedding of every `(class, domain)` pair present in a labelled
/// pool. These are the conditions the generator is pretrained on.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConditions {
    pub dim_e: usize,
    pub entries: BTreeMap<(usize, usize), Vec<f64>>,
}

pub fn pair_conditions(encoder: &FrozenEncoder, pool: &[Sample]) -> Result<PairConditions> {
    let mut sums: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for s in pool {
        let d = s
            .domain
            .ok_or_else(|| Error::Protocol("pool sample without a domain label".into()))?;
        let e = encoder.encode(&s.x)?;
        let entry = sums
            .entry((s.y, d))
            .or_insert_with(|| (vec![0.0; encoder.dim_e()], 0));
        entry.0.iter_mut().zip(&e).for_each(|(a, v)| *a += v);
        entry.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Protocol("empty pretraining pool".into()));
    }
    let entries = sums
        .into_iter()
        .map(|(key, (sum, n))| (key, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(PairConditions {
        dim_e: encoder.dim_e(),
        entries,
    })
}

impl PairConditions {
    /// Pair whose condition is closest in Euclidean distance; ties go to the
    /// smallest `(class, domain)`.
    pub fn nearest(&self, cond: &[f64]) -> Result<(usize, usize)> {
        check_dim(self.dim_e, cond.len())?;
        let mut best: Option<((usize, usize), f64)> = None;
        for (&key, c) in &self.entries {
            let d2: f64 = c.iter().zip(cond).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((key, d2));
            }
        }
        best.map(|(k, _)| k)
            .ok_or_else(|| Error::Protocol("no pretraining conditions".into()))
    }

    pub fn get(&self, class: usize, domain: usize) -> Option<&[f64]> {
        self.entries.get(&(class, domain)).map(Vec::as_slice)
    }
}

/// Schedule, noise predictor and the affine data normalization learned
/// from the pretraining pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub data_shift: Vec<f64>,
    pub data_scale: Vec<f64>,
    trained: bool,
    /// Minibatch loss at every pretraining step.
    pub training_losses: Vec<f64>,
}

impl DiffusionModel {
    pub fn untrained(schedule: NoiseSchedule, denoiser: Denoiser) -> Self {
        let dim_x = denoiser.shape().dim_x;
        Self {
            schedule,
            denoiser,
            data_shift: vec![0.0; dim_x],
            data_scale: vec![1.0; dim_x],
            trained: false,
            training_losses: Vec::new(),
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.data_shift.iter().zip(&self.data_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.data_shift.iter().zip(&self.data_scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Multiply-adds to draw one guided sample.
    pub fn sampling_madds(&self) -> u64 {
        2 * self.schedule.len() as u64 * self.denoiser.shape().forward_madds()
    }

    /// Little-endian checkpoint: magic, version, `dim_x, dim_e, hidden,
    /// time_dim, Z, trained` as u32, parameter count as u64, then f64 betas,
    /// shift, scale and denoiser parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.denoiser.shape();
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        for v in [
            MODEL_VERSION,
            s.dim_x as u32,
            s.dim_e as u32,
            s.hidden as u32,
            s.time_dim as u32,
            self.schedule.len() as u32,
            u32::from(self.trained),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.denoiser.param_count() as u64).to_le_bytes());
        for v in self
            .schedule
            .betas()
            .iter()
            .chain(&self.data_shift)
            .chain(&self.data_scale)
            .chain(self.denoiser.params())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let shape = DenoiserShape {
            dim_x: r.u32()? as usize,
            dim_e: r.u32()? as usize,
            hidden: r.u32()? as usize,
            time_dim: r.u32()? as usize,
        };
        let steps = r.u32()? as usize;
        let trained = r.u32()? != 0;
        let count = r.u64()? as usize;
        check_dim(shape.param_count(), count)?;
        let mut read = |n: usize| (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>();
        let betas = read(steps)?;
        let data_shift = read(shape.dim_x)?;
        let data_scale = read(shape.dim_x)?;
        let params = read(count)?;
        r.finish()?;
        Ok(Self {
            schedule: NoiseSchedule::from_betas(betas)?,
            denoiser: Denoiser::from_params(shape, params)?,
            data_shift,
            data_scale,
            trained,
            training_losses: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Trains the conditional denoiser on the base pool with Adam.
///
/// Each pool sample is conditioned on the mean embedding of its
/// `(class, domain)` pair; conditions are dropped with probability
/// `hp.p_drop` so the same network also learns the unconditional score.
pub fn pretrain(
    base_pool: &[Sample],
    encoder: &FrozenEncoder,
    schedule: &NoiseSchedule,
    hp: &DiffusionHP,
    seed: u64,
) -> Result<DiffusionModel> {
    if base_pool.is_empty() {
        return Err(Error::Protocol("empty pretraining pool".into()));
    }
    if hp.batch_size == 0 || !(hp.learning_rate > 0.0 && hp.learning_rate.is_finite()) {
        return Err(Error::Config("pretraining needs positive batch size and learning rate".into()));
    }
    let conditions = pair_conditions(encoder, base_pool)?;
    let dim_x = base_pool[0].x.len();
    for s in base_pool {
        check_dim(dim_x, s.x.len())?;
    }
    let shape = DenoiserShape {
        dim_x,
        dim_e: encoder.dim_e(),
        hidden: hp.hidden,
        time_dim: hp.time_dim,
    };
    let denoiser = Denoiser::new(shape, &mut seeding::stream(seed, &[seeding::DENOISER_INIT]))?;
    let mut model = DiffusionModel::untrained(schedule.clone(), denoiser);

    let n = base_pool.len() as f64;
    for j in 0..dim_x {
        let mean = base_pool.iter().map(|s| s.x[j]).sum::<f64>() / n;
        let var = base_pool.iter().map(|s| (s.x[j] - mean).powi(2)).sum::<f64>() / n;
        model.data_shift[j] = mean;
        model.data_scale[j] = var.sqrt().max(1e-6);
    }
    let normalized: Vec<Vec<f64>> = base_pool.iter().map(|s| model.normalize(&s.x)).collect();
    let conds: Vec<&[f64]> = base_pool
        .iter()
        .map(|s| {
            conditions
                .get(s.y, s.domain.expect("checked in pair_conditions"))
                .expect("every pool pair has a condition")
        })
        .collect();

    let adam = AdamHp {
        learning_rate: hp.learning_rate,
        ..AdamHp::default()
    };
    let mut opt = AdamState::new(model.denoiser.param_count());
    let mut rng = seeding::stream(seed, &[seeding::PRETRAIN]);
    for _ in 0..hp.train_steps {
        let batch: Vec<(&[f64], &[f64])> = (0..hp.batch_size)
            .map(|_| {
                let i = rng.random_range(0..base_pool.len());
                (normalized[i].as_slice(), conds[i])
            })
            .collect();
        let step = denoise_loss_and_grads(&model.denoiser, schedule, &batch, hp.p_drop, &mut rng)?;
        adam_step(&mut opt, model.denoiser.params_mut(), &step.grads, &adam)?;
        model.training_losses.push(step.loss);
    }
    model.trained = true;
    Ok(model)
}

/// DDPM ancestral sampling with classifier-free guidance.
///
/// Starts from `x_Z ~ N(0, I)` and applies
/// `x_{z−1} = (x_z − β_z/√(1−ᾱ_z) · ε̂) / √α_z + √β_z · n` with no noise
/// on the final step. Returned samples are in data space.
pub fn ancestral_sample(
    model: &DiffusionModel,
    cond: &[f64],
    w: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    if !model.is_trained() {
        return Err(Error::Protocol("diffusion model has not been pretrained".into()));
    }
    let shape = model.denoiser.shape();
    check_dim(shape.dim_e, cond.len())?;
    let steps = model.schedule.len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: Vec<f64> = (0..shape.dim_x).map(|_| rng.sample(StandardNormal)).collect();
        for z in (1..=steps).rev() {
            let eps = guided_epsilon(&model.denoiser, &x, z, cond, w)?;
            let beta = model.schedule.beta(z)?;
            let alpha = model.schedule.alpha(z)?;
            let coef = beta / (1.0 - model.schedule.alpha_bar(z)?).sqrt();
            let inv = 1.0 / alpha.sqrt();
            let sigma = beta.sqrt();
            for (xi, e) in x.iter_mut().zip(&eps) {
                *xi = inv * (*xi - coef * e);
                if z > 1 {
                    let noise: f64 = rng.sample(StandardNormal);
                    *xi += sigma * noise;
                }
            }
        }
        out.push(model.denormalize(&x));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{draw_base_pool, World};
    use crate::diffusion::denoiser::{loss_and_grads_on, DenoiseExample};
    use crate::diffusion::schedule::make_schedule;

    fn small_setup(seed: u64) -> (World, FrozenEncoder, Vec<Sample>, NoiseSchedule) {
        let world = World::build(4, 2, 1, 0.5, seed).unwrap();
        let enc = FrozenEncoder::new(4, 8, seed).unwrap();
        let pool = draw_base_pool(&world, 400, seed).unwrap();
        let sched = make_schedule(20, 1e-3, 0.2).unwrap();
        (world, enc, pool, sched)
    }

    fn small_hp(steps: usize) -> DiffusionHP {
        DiffusionHP {
            hidden: 32,
            time_dim: 8,
            train_steps: steps,
            batch_size: 32,
            ..DiffusionHP::default()
        }
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let (_, enc, pool, sched) = small_setup(1);
        let m = pretrain(&pool, &enc, &sched, &small_hp(0), 5).unwrap();
        let init = Denoiser::new(m.denoiser.shape(), &mut seeding::stream(5, &[seeding::DENOISER_INIT])).unwrap();
        assert_eq!(m.denoiser, init);
        assert!(m.is_trained());
        assert!(pretrain(&[], &enc, &sched, &small_hp(0), 5).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (_, enc, pool, sched) = small_setup(2);
        let a = pretrain(&pool, &enc, &sched, &small_hp(30), 9).unwrap();
        let b = pretrain(&pool, &enc, &sched, &small_hp(30), 9).unwrap();
        assert_eq!(a.denoiser.params(), b.denoiser.params());
    }

    #[test]
    fn pretraining_lowers_held_out_loss() {
        let mut drop = 0.0;
        for seed in [42u64, 18, 50] {
            let (_, enc, pool, sched) = small_setup(seed);
            let conds = pair_conditions(&enc, &pool).unwrap();
            let before = pretrain(&pool, &enc, &sched, &small_hp(0), seed).unwrap();
            let after = pretrain(&pool, &enc, &sched, &small_hp(2000), seed).unwrap();
            let mut rng = seeding::stream(seed, &[77]);
            let examples: Vec<DenoiseExample> = pool
                .iter()
                .take(200)
                .map(|s| DenoiseExample {
                    x0: after.normalize(&s.x),
                    z: rng.random_range(1..=sched.len()),
                    eps: (0..4).map(|_| rng.sample(StandardNormal)).collect(),
                    cond: conds.get(s.y, s.domain.unwrap()).unwrap().to_vec(),
                    dropped: false,
                })
                .collect();
            let (l0, _) = loss_and_grads_on(&before.denoiser, &sched, &examples).unwrap();
            let (l1, _) = loss_and_grads_on(&after.denoiser, &sched, &examples).unwrap();
            drop += l0 - l1;
        }
        assert!(drop > 0.0);
    }

    #[test]
    fn sampling_requires_training_and_is_reproducible() {
        let (_, enc, pool, sched) = small_setup(3);
        let shape = DenoiserShape {
            dim_x: 4,
            dim_e: 8,
            hidden: 8,
            time_dim: 4,
        };
        let raw = DiffusionModel::untrained(
            sched.clone(),
            Denoiser::new(shape, &mut seeding::stream(1, &[])).unwrap(),
        );
        assert!(matches!(
            ancestral_sample(&raw, &[0.0; 8], 1.0, 1, &mut seeding::stream(1, &[])),
            Err(Error::Protocol(_))
        ));
        let m = pretrain(&pool, &enc, &sched, &small_hp(20), 3).unwrap();
        let null = m.denoiser.null_condition();
        let a = ancestral_sample(&m, &null, 1.0, 5, &mut seeding::stream(8, &[])).unwrap();
        let b = ancestral_sample(&m, &null, 1.0, 5, &mut seeding::stream(8, &[])).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (_, enc, pool, sched) = small_setup(4);
        let m = pretrain(&pool, &enc, &sched, &small_hp(5), 4).unwrap();
        let bytes = m.to_bytes();
        let back = DiffusionModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.denoiser, m.denoiser);
        assert_eq!(back.schedule, m.schedule);
        assert!(DiffusionModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        assert_eq!(DiffusionModel::load(&path).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn nearest_condition_lookup() {
        let (_, enc, pool, _) = small_setup(6);
        let conds = pair_conditions(&enc, &pool).unwrap();
        for (&key, c) in &conds.entries {
            assert_eq!(conds.nearest(c).unwrap(), key);
        }
        assert!(conds.nearest(&[0.0; 3]).is_err());
    }
}
