//! Shared-latent feature extractors, distribution and retrieval metrics,
//! the foot-slip diagnostic and report formatting.

mod extractor;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{foot_loss, EPS};
use crate::motion::MotionSequence;
use crate::scalar::Scalar;

pub use extractor::{train_extractors, ExtractorConfig, Extractors, MotionFeatureTape};
pub use metrics::{diversity, fid, paired_distance, r_precision, r_precision_all, GaussianStats, MeanCi, COV_REG, R_NEGATIVES};

/// Per-motion foot slip and contact statistics with their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootSlipReport {
    pub count: usize,
    pub per_motion: Vec<f64>,
    pub mean_slip: f64,
    pub max_slip: f64,
    /// Mean contact-channel value over valid frames.
    pub mean_contact: f64,
    /// Fraction of valid frames with any contact above 0.5.
    pub contact_fraction: f64,
}

pub fn foot_slip_report<S: Scalar>(motions: &[MotionSequence<S>]) -> Result<FootSlipReport> {
    if motions.is_empty() {
        return Err(crate::error::Error::Metric("no motions to report on".into()));
    }
    let mut per_motion = Vec::with_capacity(motions.len());
    let mut contact_sum = 0.0;
    let mut contact_cells = 0usize;
    let mut active = 0usize;
    let mut frames = 0usize;
    for m in motions {
        per_motion.push(foot_loss(m, EPS)?.as_f64());
        let contacts = m.layout().contacts();
        for row in m.valid_frames().rows() {
            let c = row.slice(ndarray::s![contacts.clone()]);
            contact_sum += c.iter().map(|v| v.as_f64()).sum::<f64>();
            contact_cells += c.len();
            active += usize::from(c.iter().any(|v| v.as_f64() > 0.5));
            frames += 1;
        }
    }
    let count = per_motion.len();
    Ok(FootSlipReport {
        count,
        mean_slip: per_motion.iter().sum::<f64>() / count as f64,
        max_slip: per_motion.iter().copied().fold(0.0, f64::max),
        mean_contact: if contact_cells > 0 { contact_sum / contact_cells as f64 } else { 0.0 },
        contact_fraction: if frames > 0 { active as f64 / frames as f64 } else { 0.0 },
        per_motion,
    })
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub model: String,
    pub split: String,
    pub n: usize,
    pub fid: MeanCi,
    pub diversity: Option<MeanCi>,
    /// R@1, R@2, R@3; absent when the split has fewer than 32 prompts.
    pub r_precision: Option<[MeanCi; 3]>,
    /// Joint-position error of generated frames against ground truth.
    pub recon: MeanCi,
    pub seeds: Vec<u64>,
}

/// Line-delimited JSON, one record per row.
pub fn report_jsonl(rows: &[SplitReport]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Aligned plain-text table.
pub fn report_table(rows: &[SplitReport]) -> String {
    let header = ["model", "split", "n", "FID", "Diversity", "R@1", "R@2", "R@3", "Recon"];
    let na = || "n/a".to_string();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let rp = |k: usize| r.r_precision.map_or_else(na, |v| v[k].to_string());
            vec![
                r.model.clone(),
                r.split.clone(),
                r.n.to_string(),
                r.fid.to_string(),
                r.diversity.map_or_else(na, |d| d.to_string()),
                rp(0),
                rp(1),
                rp(2),
                r.recon.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    for row in body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}
