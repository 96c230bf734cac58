//! Frozen feature encoder and the one-shot client upload.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::datagen::Sample;
use crate::error::{check_dim, Error, Result};
use crate::seeding;

/// Fixed random projection followed by `tanh`. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    dim_x: usize,
    dim_e: usize,
    /// Row-major `dim_e × dim_x`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    seed: u64,
}

impl FrozenEncoder {
    /// Weights are `N(0, 0.25 / dim_x)`, biases `N(0, 0.01)`.
    pub fn new(dim_x: usize, dim_e: usize, seed: u64) -> Result<Self> {
        if dim_x == 0 || dim_e == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut rng = seeding::stream(seed, &[seeding::ENCODER]);
        let w = Normal::new(0.0, 0.5 / (dim_x as f64).sqrt()).expect("valid std");
        let b = Normal::new(0.0, 0.1).expect("valid std");
        let weight = (0..dim_e * dim_x).map(|_| w.sample(&mut rng)).collect();
        let bias = (0..dim_e).map(|_| b.sample(&mut rng)).collect();
        Ok(Self {
            dim_x,
            dim_e,
            weight,
            bias,
            seed,
        })
    }

    pub fn from_parts(dim_x: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let dim_e = bias.len();
        if dim_x == 0 || dim_e == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        check_dim(dim_e * dim_x, weight.len())?;
        Ok(Self {
            dim_x,
            dim_e,
            weight,
            bias,
            seed: 0,
        })
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim_x, x.len())?;
        Ok(self
            .weight
            .chunks_exact(self.dim_x)
            .zip(&self.bias)
            .map(|(row, b)| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).tanh())
            .collect())
    }

    pub fn checksum(&self) -> u64 {
        let mut all = self.weight.clone();
        all.extend_from_slice(&self.bias);
        seeding::checksum(&all)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMean {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-class mean embedding of a shard. Classes without samples are absent.
pub fn class_mean_embeddings(
    encoder: &FrozenEncoder,
    shard: &[Sample],
) -> Result<BTreeMap<usize, ClassMean>> {
    if shard.is_empty() {
        return Err(Error::Protocol("cannot summarize an empty shard".into()));
    }
    let mut acc: BTreeMap<usize, ClassMean> = BTreeMap::new();
    for s in shard {
        let e = encoder.encode(&s.x)?;
        let entry = acc.entry(s.y).or_insert_with(|| ClassMean {
            mean: vec![0.0; encoder.dim_e()],
            count: 0,
        });
        entry.mean.iter_mut().zip(&e).for_each(|(m, v)| *m += v);
        entry.count += 1;
    }
    for cm in acc.values_mut() {
        let n = cm.count as f64;
        cm.mean.iter_mut().for_each(|m| *m /= n);
    }
    Ok(acc)
}

/// The single upload a client makes: per-class mean embeddings and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMessage {
    pub client_id: u32,
    pub task_id: u32,
    pub dim_e: usize,
    pub class_means: BTreeMap<usize, Vec<f64>>,
    pub class_counts: BTreeMap<usize, usize>,
}

pub fn build_client_message(
    client_id: u32,
    task_id: u32,
    means: BTreeMap<usize, Vec<f64>>,
    counts: BTreeMap<usize, usize>,
) -> Result<ClientMessage> {
    if means.is_empty() {
        return Err(Error::Protocol("client message carries no classes".into()));
    }
    if !means.keys().eq(counts.keys()) {
        return Err(Error::Protocol("class means and counts cover different classes".into()));
    }
    if let Some((k, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(Error::Protocol(format!("class {k} has zero samples")));
    }
    let dim_e = means.values().next().map(Vec::len).unwrap_or(0);
    if let Some(bad) = means.values().find(|m| m.len() != dim_e) {
        return Err(Error::DimensionMismatch {
            expected: dim_e,
            actual: bad.len(),
        });
    }
    Ok(ClientMessage {
        client_id,
        task_id,
        dim_e,
        class_means: means,
        class_counts: counts,
    })
}

impl ClientMessage {
    /// Summarizes a shard into its upload.
    pub fn from_shard(
        encoder: &FrozenEncoder,
        client_id: u32,
        task_id: u32,
        shard: &[Sample],
    ) -> Result<Self> {
        let stats = class_mean_embeddings(encoder, shard)?;
        let counts = stats.iter().map(|(&k, cm)| (k, cm.count)).collect();
        let means = stats.into_iter().map(|(k, cm)| (k, cm.mean)).collect();
        build_client_message(client_id, task_id, means, counts)
    }

    /// Size of the upload in floats: `|classes| · dim_e`.
    pub fn upload_floats(&self) -> u64 {
        (self.class_means.len() * self.dim_e) as u64
    }

    /// Little-endian record: `client_id, task_id, dim_e, class_count` as u32,
    /// then per class `class_id u32, count u32, dim_e × f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.class_means.len() * (8 + 8 * self.dim_e));
        for v in [
            self.client_id,
            self.task_id,
            self.dim_e as u32,
            self.class_means.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (&k, mean) in &self.class_means {
            out.extend_from_slice(&(k as u32).to_le_bytes());
            out.extend_from_slice(&(self.class_counts[&k] as u32).to_le_bytes());
            for v in mean {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let client_id = r.u32()?;
        let task_id = r.u32()?;
        let dim_e = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut means = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            let k = r.u32()? as usize;
            let c = r.u32()? as usize;
            let mean = (0..dim_e).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if means.insert(k, mean).is_some() {
                return Err(Error::Format(format!("class {k} repeated")));
            }
            counts.insert(k, c);
        }
        r.finish()?;
        let msg = build_client_message(client_id, task_id, means, counts)?;
        check_dim(dim_e, msg.dim_e)?;
        Ok(msg)
    }
}

/// Cursor over a little-endian binary record.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length"))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take::<4>()?;
        if &got == expected {
            Ok(())
        } else {
            Err(Error::Format(format!("bad magic {got:?}")))
        }
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::datagen::World;

    fn sample(x: Vec<f64>, y: usize) -> Sample {
        Sample {
            x,
            y,
            domain: Some(0),
            task: Some(1),
        }
    }

    #[test]
    fn zero_input_gives_tanh_bias() {
        let enc = FrozenEncoder::new(16, 64, 3).unwrap();
        let e = enc.encode(&[0.0; 16]).unwrap();
        let expected: Vec<f64> = enc.bias.iter().map(|b| b.tanh()).collect();
        assert_eq!(e, expected);
    }

    #[test]
    fn hand_computed_identity_case() {
        let enc = FrozenEncoder::from_parts(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let e = enc.encode(&[0.5, -0.5]).unwrap();
        assert!((e[0] - 0.462_117_157_3).abs() < 1e-9);
        assert!((e[1] + 0.462_117_157_3).abs() < 1e-9);
        assert!(matches!(enc.encode(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn same_seed_same_encoder() {
        let a = FrozenEncoder::new(8, 32, 9).unwrap();
        let b = FrozenEncoder::new(8, 32, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), FrozenEncoder::new(8, 32, 10).unwrap().checksum());
    }

    #[test]
    fn means_of_trivial_shards() {
        let enc = FrozenEncoder::new(3, 5, 1).unwrap();
        let a = sample(vec![0.1, 0.2, 0.3], 0);
        let b = sample(vec![-1.0, 0.0, 2.0], 1);
        let m = class_mean_embeddings(&enc, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(m[&0].mean, enc.encode(&a.x).unwrap());
        assert_eq!(m[&1].count, 1);

        let m = class_mean_embeddings(&enc, &[a.clone(), a.clone()]).unwrap();
        let e = enc.encode(&a.x).unwrap();
        for (u, v) in m[&0].mean.iter().zip(&e) {
            assert!((u - v).abs() <= 1e-15 * v.abs().max(1.0));
        }
        assert!(matches!(class_mean_embeddings(&enc, &[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn mean_matches_reverse_order_summation() {
        let world = World::build(16, 3, 2, 0.5, 21).unwrap();
        let enc = FrozenEncoder::new(16, 64, 21).unwrap();
        let mut rng = seeding::stream(5, &[]);
        let shard: Vec<Sample> = (0..150).map(|i| world.draw(i % 3, i % 2, &mut rng)).collect();
        let means = class_mean_embeddings(&enc, &shard).unwrap();
        for k in 0..3 {
            let members: Vec<&Sample> = shard.iter().filter(|s| s.y == k).collect();
            assert_eq!(members.len(), 50);
            let mut oracle = vec![0.0; 64];
            for s in members.iter().rev() {
                for (o, v) in oracle.iter_mut().zip(enc.encode(&s.x).unwrap()) {
                    *o += v;
                }
            }
            for (m, o) in means[&k].mean.iter().zip(&oracle) {
                let o = o / 50.0;
                assert!((m - o).abs() <= 1e-12 * o.abs().max(1e-300), "{m} vs {o}");
            }
        }
    }

    #[test]
    fn message_size_and_errors() {
        let means: BTreeMap<usize, Vec<f64>> = (0..10).map(|k| (k, vec![0.0; 512])).collect();
        let counts: BTreeMap<usize, usize> = (0..10).map(|k| (k, 50)).collect();
        let msg = build_client_message(1, 1, means.clone(), counts.clone()).unwrap();
        assert_eq!(msg.upload_floats(), 5_120);
        assert_eq!(msg, build_client_message(1, 1, means.clone(), counts.clone()).unwrap());

        assert!(matches!(
            build_client_message(1, 1, BTreeMap::new(), BTreeMap::new()),
            Err(Error::Protocol(_))
        ));
        let mut short = counts.clone();
        short.remove(&3);
        assert!(matches!(build_client_message(1, 1, means, short), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_record_is_rejected() {
        let enc = FrozenEncoder::new(4, 3, 2).unwrap();
        let msg = ClientMessage::from_shard(&enc, 7, 2, &[sample(vec![1.0; 4], 3)]).unwrap();
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), 16 + 8 + 3 * 8);
        assert!(matches!(ClientMessage::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ClientMessage::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn encoding_stays_in_open_unit_interval(x in prop::collection::vec(-10.0f64..10.0, 6)) {
            let enc = FrozenEncoder::new(6, 16, 4).unwrap();
            for v in enc.encode(&x).unwrap() {
                prop_assert!(v > -1.0 && v < 1.0);
            }
        }

        #[test]
        fn encoding_is_bounded_for_large_inputs(x in prop::collection::vec(-1e6f64..1e6, 6)) {
            let enc = FrozenEncoder::new(6, 16, 4).unwrap();
            for v in enc.encode(&x).unwrap() {
                prop_assert!(v.is_finite() && (-1.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn message_bytes_round_trip(
            client in any::<u32>(),
            task in 1u32..100,
            rows in prop::collection::btree_map(0usize..1000, (1usize..500, prop::collection::vec(-1.0f64..1.0, 4)), 1..6),
        ) {
            let counts = rows.iter().map(|(&k, (c, _))| (k, *c)).collect();
            let means = rows.into_iter().map(|(k, (_, m))| (k, m)).collect();
            let msg = build_client_message(client, task, means, counts).unwrap();
            let back = ClientMessage::from_bytes(&msg.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), msg.to_bytes());
            prop_assert_eq!(back, msg);
        }

        #[test]
        fn mean_of_partition_means_is_shard_mean(split in 1usize..39) {
            let world = World::build(5, 2, 2, 0.5, 13).unwrap();
            let enc = FrozenEncoder::new(5, 8, 13).unwrap();
            let mut rng = seeding::stream(17, &[]);
            let shard: Vec<Sample> = (0..40).map(|i| world.draw(0, i % 2, &mut rng)).collect();
            let whole = &class_mean_embeddings(&enc, &shard).unwrap()[&0];
            let a = &class_mean_embeddings(&enc, &shard[..split]).unwrap()[&0];
            let b = &class_mean_embeddings(&enc, &shard[split..]).unwrap()[&0];
            for j in 0..8 {
                let combined = (a.mean[j] * a.count as f64 + b.mean[j] * b.count as f64)
                    / (a.count + b.count) as f64;
                prop_assert!((combined - whole.mean[j]).abs() < 1e-10);
            }
        }
    }
}
