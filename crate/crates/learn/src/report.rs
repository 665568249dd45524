//! CSV output with fixed six-significant-digit number formatting.

use std::fmt::Write as _;
use std::path::Path;

use parkour_core::rewards::Metrics;

use crate::distill::DistillLog;
use crate::error::Result;
use crate::train::IterationLog;

pub const METRICS_HEADER: &str = "terrain,variant,mxd_mean,mxd_std,mev_mean,mev_std";

/// `%g`-style formatting with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can bump the exponent (e.g. 999999.5)
    let rounded: f64 = format!("{x:.5e}").parse().unwrap();
    let exp = if rounded.abs() >= 10f64.powi(exp + 1) { exp + 1 } else { exp };
    if (-4..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, x);
        trim_zeros(&s)
    } else {
        let s = format!("{x:.5e}");
        let (m, e) = s.split_once('e').unwrap();
        format!("{}e{e}", trim_zeros(m))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub terrain: String,
    pub variant: String,
    pub metrics: Metrics,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{}",
            self.terrain,
            self.variant,
            sig6(m.mxd_mean),
            sig6(m.mxd_std),
            sig6(m.mev_mean),
            sig6(m.mev_std)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    Ok(())
}

pub fn train_csv(logs: &[IterationLog]) -> String {
    let levels = logs.iter().map(|l| l.level_histogram.len()).max().unwrap_or(0);
    let mut s = String::from(
        "iteration,reward,tracking,clearance,stylized,regularization,episodes,mean_level,approx_kl,clip_fraction,value_loss,entropy,roa_loss",
    );
    for k in 0..levels {
        write!(s, ",level_{k}").unwrap();
    }
    s.push('\n');
    for l in logs {
        let st = &l.stats;
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            l.iteration,
            sig6(l.reward),
            sig6(l.tracking),
            sig6(l.clearance),
            sig6(l.stylized),
            sig6(l.regularization),
            l.episodes,
            sig6(l.mean_level),
            sig6(st.approx_kl),
            sig6(st.clip_fraction),
            sig6(st.value_loss),
            sig6(st.entropy),
            sig6(st.roa_loss)
        )
        .unwrap();
        for k in 0..levels {
            write!(s, ",{}", l.level_histogram.get(k).copied().unwrap_or(0)).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn distill_csv(logs: &[DistillLog]) -> String {
    let mut s = String::from("iteration,action_mse,yaw_loss,gate_accept,episodes\n");
    for l in logs {
        writeln!(s, "{},{},{},{},{}", l.iteration, sig6(l.action_mse), sig6(l.yaw_loss), sig6(l.gate_accept), l.episodes).unwrap();
    }
    s
}
