use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::metrics::{forgetting, Forgetting};
use super::MethodId;
use crate::error::Result;
use crate::ledger::ComputeLedger;

pub const CSV_HEADER: &str =
    "method,seed,task,eval_task,accuracy,avg_acc,forgetting_mean,upload_floats_total,madds_total";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientComms {
    pub floats: u64,
    pub messages: u64,
}

/// Uploads per client. Downloads are not charged.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommsLedger {
    pub per_client: BTreeMap<u32, ClientComms>,
}

impl CommsLedger {
    pub fn record_upload(&mut self, client: u32, floats: u64) {
        let c = self.per_client.entry(client).or_default();
        c.floats += floats;
        c.messages += 1;
    }

    pub fn total_floats(&self) -> u64 {
        self.per_client.values().map(|c| c.floats).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.per_client.values().map(|c| c.messages).sum()
    }
}

/// Everything measured in one (method, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: MethodId,
    pub seed: u64,
    /// Lower-triangular: `accuracy[t][j]` is accuracy on task `j` after
    /// finishing task `t` (both 0-based).
    pub accuracy: Vec<Vec<f64>>,
    pub avg_accuracy: Vec<f64>,
    pub pooled_accuracy: Vec<f64>,
    /// Mean forgetting of the prefix matrix after each task.
    pub forgetting_after_task: Vec<f64>,
    pub forgetting: Forgetting,
    pub comms: CommsLedger,
    pub uploads_after_task: Vec<u64>,
    pub compute: ComputeLedger,
    pub madds_after_task: Vec<u64>,
}

impl RunReport {
    pub(crate) fn new(method: MethodId, seed: u64) -> Self {
        Self {
            method,
            seed,
            accuracy: Vec::new(),
            avg_accuracy: Vec::new(),
            pooled_accuracy: Vec::new(),
            forgetting_after_task: Vec::new(),
            forgetting: Forgetting {
                per_task: Vec::new(),
                mean: 0.0,
            },
            comms: CommsLedger::default(),
            uploads_after_task: Vec::new(),
            compute: ComputeLedger::default(),
            madds_after_task: Vec::new(),
        }
    }

    pub(crate) fn push_row(&mut self, per_task: Vec<f64>, mean: f64, pooled: f64) -> Result<()> {
        self.accuracy.push(per_task);
        self.avg_accuracy.push(mean);
        self.pooled_accuracy.push(pooled);
        self.forgetting = forgetting(&self.accuracy)?;
        self.forgetting_after_task.push(self.forgetting.mean);
        self.uploads_after_task.push(self.comms.total_floats());
        self.madds_after_task.push(self.compute.total());
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.accuracy.len()
    }

    /// Mean accuracy over all tasks after the last task.
    pub fn final_avg_accuracy(&self) -> f64 {
        self.avg_accuracy.last().copied().unwrap_or(0.0)
    }

    /// One row per `(task, eval_task)` followed, per task, by a summary row
    /// with `eval_task = -1` whose accuracy is the pooled accuracy.
    pub fn write_csv_rows(&self, out: &mut String) {
        let m = self.method.as_str();
        for t in 0..self.tasks() {
            let tail = format!(
                "{:.6},{:.6},{},{}",
                self.avg_accuracy[t],
                self.forgetting_after_task[t],
                self.uploads_after_task[t],
                self.madds_after_task[t]
            );
            for (j, acc) in self.accuracy[t].iter().enumerate() {
                let _ = writeln!(out, "{m},{},{},{},{acc:.6},{tail}", self.seed, t + 1, j + 1);
            }
            let _ = writeln!(
                out,
                "{m},{},{},-1,{:.6},{tail}",
                self.seed,
                t + 1,
                self.pooled_accuracy[t]
            );
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        self.write_csv_rows(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut r = RunReport::new(MethodId::Osifl, 42);
        r.comms.record_upload(0, 320);
        r.push_row(vec![0.9], 0.9, 0.9).unwrap();
        r.comms.record_upload(1, 320);
        r.compute.head += 10;
        r.push_row(vec![0.6, 0.8], 0.7, 0.7).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 + 3);
        assert_eq!(lines[1], "OSIFL,42,1,1,0.900000,0.900000,0.000000,320,0");
        assert_eq!(lines[2], "OSIFL,42,1,-1,0.900000,0.900000,0.000000,320,0");
        assert_eq!(lines[4], "OSIFL,42,2,2,0.800000,0.700000,0.300000,640,10");
        assert_eq!(r.comms.total_messages(), 2);
    }
}
