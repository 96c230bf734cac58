use std::collections::BTreeMap;
use std::sync::Arc;

use super::adam::AdamState;
use crate::datagen::Sample;
use crate::encoder::{ByteReader, FrozenEncoder};
use crate::error::{check_dim, Error, Result};
use crate::seeding;

const HEAD_MAGIC: &[u8; 4] = b"OSHD";
const HEAD_VERSION: u32 = 1;

/// Linear softmax head over the frozen encoder.
///
/// Parameters are stored one row per registered class, each row holding
/// `dim_e` weights followed by the bias. New classes append rows, so the
/// flat layout of existing classes never moves.
#[derive(Debug, Clone)]
pub struct Classifier {
    encoder: Arc<FrozenEncoder>,
    classes: Vec<usize>,
    class_index: BTreeMap<usize, usize>,
    params: Vec<f64>,
    pub(crate) optimizer: AdamState,
}

impl Classifier {
    pub fn new(encoder: Arc<FrozenEncoder>) -> Self {
        Self {
            encoder,
            classes: Vec::new(),
            class_index: BTreeMap::new(),
            params: Vec::new(),
            optimizer: AdamState::default(),
        }
    }

    pub fn with_classes(encoder: Arc<FrozenEncoder>, classes: &[usize]) -> Result<Self> {
        let mut c = Self::new(encoder);
        c.expand_head(classes)?;
        Ok(c)
    }

    pub fn encoder(&self) -> &Arc<FrozenEncoder> {
        &self.encoder
    }

    pub fn dim_e(&self) -> usize {
        self.encoder.dim_e()
    }

    pub(crate) fn row_len(&self) -> usize {
        self.dim_e() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Global class ids in row order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn has_class(&self, class: usize) -> bool {
        self.class_index.contains_key(&class)
    }

    pub fn row_of(&self, class: usize) -> Result<usize> {
        self.class_index
            .get(&class)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("class {class} is not registered in the head")))
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_dim(self.params.len(), params.len())?;
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn optimizer_state(&self) -> &AdamState {
        &self.optimizer
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [f64], &mut AdamState) {
        (&mut self.params, &mut self.optimizer)
    }

    /// Appends zero-initialized rows for `ids`. Existing rows and their
    /// optimizer moments are kept.
    pub fn expand_head(&mut self, ids: &[usize]) -> Result<()> {
        let mut fresh = std::collections::BTreeSet::new();
        for &id in ids {
            if self.has_class(id) || !fresh.insert(id) {
                return Err(Error::Protocol(format!("class {id} registered twice")));
            }
        }
        let row = self.row_len();
        for &id in ids {
            self.class_index.insert(id, self.classes.len());
            self.classes.push(id);
        }
        self.params.resize(self.params.len() + ids.len() * row, 0.0);
        if self.optimizer.m.len() + ids.len() * row == self.params.len() {
            self.optimizer.grow(ids.len() * row);
        } else {
            self.optimizer.reset(self.params.len());
        }
        Ok(())
    }

    /// Zeroes every row and the optimizer state, keeping registered classes.
    pub fn reinitialize(&mut self) {
        self.params.iter_mut().for_each(|p| *p = 0.0);
        self.optimizer.reset(self.params.len());
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.encode(x)
    }

    pub fn logits_from_features(&self, phi: &[f64]) -> Vec<f64> {
        self.params
            .chunks_exact(self.row_len())
            .map(|row| {
                let (w, b) = row.split_at(phi.len());
                w.iter().zip(phi).map(|(a, f)| a * f).sum::<f64>() + b[0]
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_from_features(&self.features(x)?))
    }

    /// Argmax class; ties resolve to the earliest registered row.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        if self.classes.is_empty() {
            return Err(Error::Protocol("head has no classes".into()));
        }
        let logits = self.logits(x)?;
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        Ok(self.classes[best])
    }

    pub fn check_covers(&self, samples: &[Sample]) -> Result<()> {
        samples.iter().try_for_each(|s| self.row_of(s.y).map(|_| ()))
    }

    pub fn head_checksum(&self) -> u64 {
        seeding::checksum(&self.params)
    }

    /// Flat head checkpoint: magic, version, `dim_e`, class count, class ids
    /// as u32, then the parameters as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.classes.len() + 8 * self.params.len());
        out.extend_from_slice(HEAD_MAGIC);
        for v in [HEAD_VERSION, self.dim_e() as u32, self.classes.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &c in &self.classes {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(encoder: Arc<FrozenEncoder>, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(HEAD_MAGIC)?;
        let version = r.u32()?;
        if version != HEAD_VERSION {
            return Err(Error::Format(format!("unsupported head version {version}")));
        }
        check_dim(encoder.dim_e(), r.u32()? as usize)?;
        let n = r.u32()? as usize;
        let classes = (0..n)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut head = Self::with_classes(encoder, &classes)?;
        let params = (0..head.param_count())
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        head.params = params;
        Ok(head)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(encoder: Arc<FrozenEncoder>, path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(encoder, &std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> Arc<FrozenEncoder> {
        Arc::new(FrozenEncoder::new(4, 6, 1).unwrap())
    }

    #[test]
    fn expansion_keeps_old_logits() {
        let mut c = Classifier::with_classes(encoder(), &[3, 7]).unwrap();
        let p: Vec<f64> = (0..c.param_count()).map(|i| (i as f64 * 0.37).sin()).collect();
        c.set_params(p).unwrap();
        let x = [0.3, -1.2, 2.0, 0.1];
        let before = c.logits(&x).unwrap();
        c.expand_head(&[]).unwrap();
        assert_eq!(c.logits(&x).unwrap(), before);
        c.expand_head(&[1, 9]).unwrap();
        let after = c.logits(&x).unwrap();
        assert_eq!(&after[..2], &before[..]);
        assert_eq!(&after[2..], &[0.0, 0.0]);
        assert_eq!(c.classes(), &[3, 7, 1, 9]);
        assert!(c.expand_head(&[7]).is_err());
        assert!(c.expand_head(&[5, 5]).is_err());
    }

    #[test]
    fn new_rows_take_unit_weight_share_of_softmax() {
        let mut c = Classifier::with_classes(encoder(), &[0, 1]).unwrap();
        let p: Vec<f64> = (0..c.param_count()).map(|i| 0.1 * i as f64).collect();
        c.set_params(p).unwrap();
        c.expand_head(&[2, 3]).unwrap();
        let z = c.logits(&[1.0, 0.0, -1.0, 0.5]).unwrap();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let expected = 1.0 / denom;
        for &zi in &z[2..] {
            assert!(((zi.exp() / denom) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let enc = encoder();
        let mut c = Classifier::with_classes(enc.clone(), &[4, 0, 2]).unwrap();
        let p: Vec<f64> = (0..c.param_count()).map(|i| (i as f64).cos()).collect();
        c.set_params(p).unwrap();
        let back = Classifier::from_bytes(enc.clone(), &c.to_bytes()).unwrap();
        assert_eq!(back.classes(), c.classes());
        assert_eq!(
            back.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let other = Arc::new(FrozenEncoder::new(4, 5, 1).unwrap());
        assert!(Classifier::from_bytes(other, &c.to_bytes()).is_err());
        assert!(Classifier::from_bytes(enc, &c.to_bytes()[..20]).is_err());
    }
}
