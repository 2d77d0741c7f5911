use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "return_mean",
    "return_std",
    "coverage",
    "loss_policy",
    "loss_critic",
    "loss_recon",
    "loss_commit",
    "loss_ref",
    "mask_on_frac",
    "intention_entropy",
];

/// Marker written for values that were not produced in an interval.
pub const ABSENT: &str = "NA";

/// One evaluation point. Loss columns average the updates performed since
/// the previous row; `None` means no such update happened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub coverage: f64,
    pub success_rate: f64,
    pub loss_policy: Option<f64>,
    pub loss_critic: Option<f64>,
    pub loss_recon: Option<f64>,
    pub loss_commit: Option<f64>,
    pub loss_ref: Option<f64>,
    pub mask_on_frac: Option<f64>,
    pub intention_entropy: Option<f64>,
    /// Codebook lookups per code during the interval.
    pub usage: Vec<u64>,
    /// Cumulative `F` evaluations summed over agents.
    pub f_evaluations: u64,
}

impl MetricsRow {
    pub fn csv_fields(&self) -> [String; 11] {
        let opt = |v: Option<f64>| v.map_or_else(|| ABSENT.to_string(), |x| x.to_string());
        [
            self.step.to_string(),
            self.return_mean.to_string(),
            self.return_std.to_string(),
            self.coverage.to_string(),
            opt(self.loss_policy),
            opt(self.loss_critic),
            opt(self.loss_recon),
            opt(self.loss_commit),
            opt(self.loss_ref),
            opt(self.mask_on_frac),
            opt(self.intention_entropy),
        ]
    }
}

/// Everything recorded by a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub counters: Counters,
}

impl RunMetrics {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        write_header(&mut out).expect("in-memory write");
        for r in &self.rows {
            write_row(&mut out, r).expect("in-memory write");
        }
        String::from_utf8(out).expect("ascii")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: u64,
    pub episodes: u64,
    /// Per-agent policy-improvement steps.
    pub policy_updates: Vec<u64>,
    /// Per-agent self-reference calls.
    pub self_reference_updates: Vec<u64>,
    pub critic_updates: u64,
    pub intention_updates: u64,
    pub dropped_targets: u64,
    pub reference_admitted: u64,
    pub reference_rejected: u64,
}

pub fn write_header<W: Write>(mut w: W) -> Result<()> {
    writeln!(w, "{}", METRICS_HEADER.join(","))?;
    Ok(())
}

pub fn write_row<W: Write>(mut w: W, row: &MetricsRow) -> Result<()> {
    writeln!(w, "{}", row.csv_fields().join(","))?;
    Ok(())
}

/// Parses a metrics CSV into `(step, return_mean, coverage)` triples.
pub fn read_curve(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = match lines.next() {
        Some(h) => h.split(',').map(str::trim).collect(),
        None => return Ok(Vec::new()),
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Format(format!("metrics CSV lacks column `{name}`")))
    };
    let (cs, cr, cc) = (col("step")?, col("return_mean")?, col("coverage")?);
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| -> Result<f64> {
            let raw = fields.get(c).ok_or_else(|| Error::Format(format!("row {} is short", i + 1)))?;
            if *raw == ABSENT {
                return Ok(f64::NAN);
            }
            raw.parse::<f64>().map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))
        };
        out.push((get(cs)?, get(cr)?, get(cc)?));
    }
    Ok(out)
}

/// Running mean that reports `None` until something was added.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    pub fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    pub fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Self::default();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            return_mean: -1.5,
            return_std: 0.25,
            coverage: 0.5,
            success_rate: 0.0,
            loss_policy: Some(0.125),
            loss_critic: None,
            loss_recon: None,
            loss_commit: None,
            loss_ref: None,
            mask_on_frac: Some(0.2),
            intention_entropy: None,
            usage: vec![],
            f_evaluations: 0,
        }
    }

    #[test]
    fn csv_has_fixed_schema_and_absent_markers() {
        let m = RunMetrics {
            rows: vec![row(1000), row(2000)],
            counters: Counters::default(),
        };
        let csv = m.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,return_mean,return_std,coverage,loss_policy,loss_critic,loss_recon,loss_commit,loss_ref,mask_on_frac,intention_entropy"
        );
        assert_eq!(lines.next().unwrap(), "1000,-1.5,0.25,0.5,0.125,NA,NA,NA,NA,0.2,NA");
        let curve = read_curve(&csv).unwrap();
        assert_eq!(curve, vec![(1000.0, -1.5, 0.5), (2000.0, -1.5, 0.5)]);
    }

    #[test]
    fn empty_body_parses_to_nothing() {
        assert!(read_curve("").unwrap().is_empty());
        assert!(read_curve(&METRICS_HEADER.join(",")).unwrap().is_empty());
    }

    #[test]
    fn mean_resets_after_take() {
        let mut m = Mean::default();
        assert_eq!(m.take(), None);
        m.add(1.0);
        m.add(2.0);
        assert_eq!(m.take(), Some(1.5));
        assert_eq!(m.take(), None);
    }
}
