//! CSV report emission. Every report starts with a schema comment line.

use std::io::Write;
use std::path::Path;

use cyclediff_core::metrics::MCReport;

use crate::error::AppResult;

pub const EVALUATE_SCHEMA: &str = "# cyclediff evaluate schema v1";
pub const CONSISTENCY_SCHEMA: &str = "# cyclediff consistency schema v1";
pub const NMSSIM_SCHEMA: &str = "# cyclediff n-mssim schema v1";

pub struct CaseMetrics {
    pub case: String,
    pub mae: f64,
    pub psnr: f64,
    pub mssim: f64,
}

/// Per-case rows plus an aggregate row holding the per-case means.
pub fn write_evaluate_csv(path: &Path, rows: &[CaseMetrics]) -> AppResult<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{EVALUATE_SCHEMA}")?;
    writeln!(f, "case,mae,psnr,mssim")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.case, r.mae, r.psnr, r.mssim)?;
    }
    let n = rows.len().max(1) as f64;
    let agg = |f: fn(&CaseMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    writeln!(
        f,
        "aggregate,{},{},{}",
        agg(|r| r.mae),
        agg(|r| r.psnr),
        agg(|r| r.mssim)
    )?;
    Ok(())
}

pub struct ConsistencyRow {
    pub case: String,
    pub sampler: String,
    pub report: MCReport,
}

/// Main consistency table plus the N-MSSIM-vs-runs plot data.
pub fn write_consistency_csv(dir: &Path, rows: &[ConsistencyRow]) -> AppResult<()> {
    let mut f = std::fs::File::create(dir.join("consistency.csv"))?;
    writeln!(f, "{CONSISTENCY_SCHEMA}")?;
    writeln!(f, "case,sampler,runs,uncertainty,inconsistency,mae,psnr,mssim")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.case,
            r.sampler,
            r.report.runs,
            r.report.uncertainty,
            r.report.inconsistency,
            r.report.mae,
            r.report.psnr,
            r.report.mssim
        )?;
    }

    let mut g = std::fs::File::create(dir.join("nmssim.csv"))?;
    writeln!(g, "{NMSSIM_SCHEMA}")?;
    writeln!(g, "case,sampler,n,n_mssim")?;
    for r in rows {
        for (i, v) in r.report.n_mssim.iter().enumerate() {
            writeln!(g, "{},{},{},{}", r.case, r.sampler, i + 1, v)?;
        }
    }
    Ok(())
}
