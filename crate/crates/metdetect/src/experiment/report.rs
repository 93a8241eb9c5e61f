//! Report rendering: per-case records plus the three aggregate tables
//! (counts, performance percentages, significance tests), all recomputable
//! from the per-case CSV.

use super::{derived_seed, write_provenance, ExperimentReport};
use crate::error::{Error, Result};
use crate::stats::{summarize, MetricSummary};
use crate::unet::Arm;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCaseRecord {
    pub arm: Arm,
    pub case_id: String,
    pub fold: usize,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| Error::Input(format!("bad float {s:?}: {e}")))
    }
}

pub fn write_per_case_csv(records: &[PerCaseRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "arm,case_id,fold,tp,fn,fp,sensitivity,ppv,f1")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.arm,
            r.case_id,
            r.fold,
            r.tp,
            r.fn_,
            r.fp,
            opt(r.sensitivity),
            opt(r.ppv),
            opt(r.f1)
        )?;
    }
    Ok(())
}

pub fn load_per_case_csv(path: &Path) -> Result<Vec<PerCaseRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "arm,case_id,fold,tp,fn,fp,sensitivity,ppv,f1" {
        return Err(Error::Input(format!(
            "unexpected per-case CSV header: {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::Input(format!(
                "per-case CSV line {}: expected 9 columns, got {}",
                ln + 2,
                cols.len()
            )));
        }
        out.push(PerCaseRecord {
            arm: Arm::parse(cols[0])?,
            case_id: cols[1].to_string(),
            fold: cols[2].parse().map_err(|e| Error::Input(format!("{e}")))?,
            tp: cols[3].parse().map_err(|e| Error::Input(format!("{e}")))?,
            fn_: cols[4].parse().map_err(|e| Error::Input(format!("{e}")))?,
            fp: cols[5].parse().map_err(|e| Error::Input(format!("{e}")))?,
            sensitivity: parse_opt(cols[6])?,
            ppv: parse_opt(cols[7])?,
            f1: parse_opt(cols[8])?,
        });
    }
    Ok(out)
}

/// Summary of one measurement column for one arm (bootstrap seeded from the
/// master seed, the arm and the measure, so tables are reproducible from the
/// per-case records alone).
pub fn summarize_measure(
    records: &[PerCaseRecord],
    arm: Arm,
    measure: &str,
    master_seed: u64,
) -> Result<MetricSummary> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.arm == arm)
        .filter_map(|r| match measure {
            "tp" => Some(r.tp as f64),
            "fn" => Some(r.fn_ as f64),
            "fp" => Some(r.fp as f64),
            "sensitivity" => r.sensitivity,
            "ppv" => r.ppv,
            "f1" => r.f1,
            _ => None,
        })
        .collect();
    if values.is_empty() {
        return Err(Error::Summary(format!(
            "no defined {measure} values for arm {arm}"
        )));
    }
    summarize(
        &values,
        derived_seed(master_seed, &format!("{}:{measure}", arm.name())),
    )
}

fn count_columns(s: &MetricSummary) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        s.mean, s.sd, s.median, s.ci95_low, s.ci95_high, s.q25, s.q75
    )
}

fn pct_columns(s: &MetricSummary, n_excluded: usize) -> String {
    let pct = |v: f64| v * 100.0;
    format!(
        "{},{},{},{},{},{},{}",
        s.n,
        n_excluded,
        pct(s.median),
        pct(s.ci95_low),
        pct(s.ci95_high),
        pct(s.q25),
        pct(s.q75)
    )
}

/// Writes per_case.csv, table1.csv (TP/FN/FP summaries), table2.csv
/// (sensitivity/PPV/F1 in percent) and tests.csv with provenance sidecars.
pub fn render_tables(report: &ExperimentReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let hash = &report.config_hash;
    let seed = report.master_seed;

    let all_records: Vec<PerCaseRecord> = report
        .arms
        .iter()
        .flat_map(|a| a.records.iter().cloned())
        .collect();
    let per_case = out_dir.join("per_case.csv");
    write_per_case_csv(&all_records, &per_case)?;
    write_provenance(&per_case, hash, seed)?;

    if report.arms.is_empty() {
        // nothing to aggregate; leave an explicit marker instead of tables
        let warn = out_dir.join("warnings.txt");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&warn)?);
        writeln!(f, "no arms completed; no summary tables were rendered")?;
        for w in &report.warnings {
            writeln!(f, "{w}")?;
        }
        return Ok(());
    }

    let t1 = out_dir.join("table1.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&t1)?);
        writeln!(
            f,
            "arm,tp_mean,tp_sd,tp_median,tp_ci95_low,tp_ci95_high,tp_q25,tp_q75,\
             fn_mean,fn_sd,fn_median,fn_ci95_low,fn_ci95_high,fn_q25,fn_q75,\
             fp_mean,fp_sd,fp_median,fp_ci95_low,fp_ci95_high,fp_q25,fp_q75"
        )?;
        for arm in &report.arms {
            let tp = summarize_measure(&arm.records, arm.arm, "tp", seed)?;
            let fn_ = summarize_measure(&arm.records, arm.arm, "fn", seed)?;
            let fp = summarize_measure(&arm.records, arm.arm, "fp", seed)?;
            writeln!(
                f,
                "{},{},{},{}",
                arm.arm,
                count_columns(&tp),
                count_columns(&fn_),
                count_columns(&fp)
            )?;
        }
    }
    write_provenance(&t1, hash, seed)?;

    let t2 = out_dir.join("table2.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&t2)?);
        writeln!(
            f,
            "arm,sens_n,sens_excluded,sens_median_pct,sens_ci95_low_pct,sens_ci95_high_pct,sens_q25_pct,sens_q75_pct,\
             ppv_n,ppv_excluded,ppv_median_pct,ppv_ci95_low_pct,ppv_ci95_high_pct,ppv_q25_pct,ppv_q75_pct,\
             f1_n,f1_excluded,f1_median_pct,f1_ci95_low_pct,f1_ci95_high_pct,f1_q25_pct,f1_q75_pct"
        )?;
        for arm in &report.arms {
            let mut cols = vec![arm.arm.to_string()];
            for measure in ["sensitivity", "ppv", "f1"] {
                let s = summarize_measure(&arm.records, arm.arm, measure, seed)?;
                let excluded = arm.excluded.get(measure).copied().unwrap_or(0);
                cols.push(pct_columns(&s, excluded));
            }
            writeln!(f, "{}", cols.join(","))?;
        }
    }
    write_provenance(&t2, hash, seed)?;

    let tests = out_dir.join("tests.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tests)?);
        writeln!(
            f,
            "measurement,arm_a,arm_b,n_used,w,p,significant,highly_significant"
        )?;
        for t in &report.tests {
            let mut parts = t.label.splitn(3, ':');
            let measure = parts.next().unwrap_or_default();
            let arm_a = parts.next().unwrap_or_default();
            let arm_b = parts.next().unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                measure, arm_a, arm_b, t.n_used, t.w, t.p, t.significant, t.highly_significant
            )?;
        }
    }
    write_provenance(&tests, hash, seed)?;

    if !report.warnings.is_empty() {
        let warn = out_dir.join("warnings.txt");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&warn)?);
        for w in &report.warnings {
            writeln!(f, "{w}")?;
        }
    }
    Ok(())
}
