//! Multiply-add accounting for training and generation work.
//!
//! Counts are exact closed forms of the loops they describe, so two runs
//! can be compared without timing noise.

/// Softmax is charged one multiply-add per logit.
pub const SOFTMAX_MADDS_PER_LOGIT: u64 = 1;
/// Adam touches each parameter with this many multiply-adds per step.
pub const ADAM_MADDS_PER_PARAM: u64 = 5;
/// Quadratic penalties (EWC, proximal) cost this much per parameter.
pub const PENALTY_MADDS_PER_PARAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// Linear head plus softmax on `batch` feature vectors.
    HeadForward { batch: u64, classes: u64, dim: u64 },
    /// Weight and bias gradients of the linear head.
    HeadBackward { batch: u64, classes: u64, dim: u64 },
    OptimizerStep { params: u64 },
    Penalty { params: u64 },
    DenoiserForward { batch: u64, madds_per_sample: u64 },
    /// Backpropagation through the denoiser costs twice its forward pass.
    DenoiserBackward { batch: u64, madds_per_sample: u64 },
    Sampling { samples: u64, madds_per_sample: u64 },
}

impl OpKind {
    pub fn madds(&self) -> u64 {
        match *self {
            OpKind::HeadForward { batch, classes, dim } => {
                batch * (classes * dim + classes) + batch * classes * SOFTMAX_MADDS_PER_LOGIT
            }
            OpKind::HeadBackward { batch, classes, dim } => batch * classes * (dim + 1),
            OpKind::OptimizerStep { params } => params * ADAM_MADDS_PER_PARAM,
            OpKind::Penalty { params } => params * PENALTY_MADDS_PER_PARAM,
            OpKind::DenoiserForward {
                batch,
                madds_per_sample,
            } => batch * madds_per_sample,
            OpKind::DenoiserBackward {
                batch,
                madds_per_sample,
            } => 2 * batch * madds_per_sample,
            OpKind::Sampling {
                samples,
                madds_per_sample,
            } => samples * madds_per_sample,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ComputeLedger {
    pub head: u64,
    pub optimizer: u64,
    pub denoiser: u64,
    pub sampling: u64,
}

impl ComputeLedger {
    pub fn total(&self) -> u64 {
        self.head + self.optimizer + self.denoiser + self.sampling
    }

    pub fn record(&mut self, op: OpKind) {
        compute_ledger_update(self, op);
    }

    pub fn absorb(&mut self, other: &ComputeLedger) {
        self.head += other.head;
        self.optimizer += other.optimizer;
        self.denoiser += other.denoiser;
        self.sampling += other.sampling;
    }
}

pub fn compute_ledger_update(ledger: &mut ComputeLedger, op: OpKind) {
    let m = op.madds();
    match op {
        OpKind::HeadForward { .. } | OpKind::HeadBackward { .. } => ledger.head += m,
        OpKind::OptimizerStep { .. } | OpKind::Penalty { .. } => ledger.optimizer += m,
        OpKind::DenoiserForward { .. } | OpKind::DenoiserBackward { .. } => ledger.denoiser += m,
        OpKind::Sampling { .. } => ledger.sampling += m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_forward_closed_form() {
        let (b, c, e) = (32u64, 10u64, 64u64);
        let op = OpKind::HeadForward {
            batch: b,
            classes: c,
            dim: e,
        };
        assert_eq!(op.madds(), b * (c * e + c) + b * c);
        let mut l = ComputeLedger::default();
        l.record(op);
        assert_eq!(l.head, 32 * 650 + 320);
        assert_eq!(l.total(), l.head);
    }

    #[test]
    fn zero_work_leaves_ledger_unchanged() {
        let mut l = ComputeLedger::default();
        l.record(OpKind::HeadBackward {
            batch: 0,
            classes: 5,
            dim: 8,
        });
        l.record(OpKind::Sampling {
            samples: 0,
            madds_per_sample: 100,
        });
        assert_eq!(l, ComputeLedger::default());
    }
}
