//! Experiment orchestration: arms x folds, end-to-end and deterministic.
//!
//! For every requested arm the runner registers the pre-diagnosis
//! examinations (dual arms only), builds one shared patient-grouped fold
//! split, trains per fold, infers that fold's held-out cases, evaluates
//! lesion-wise, and aggregates case-wise records into summary tables and
//! paired Wilcoxon tests. A fixed master seed reproduces every output file
//! byte for byte.

mod report;

pub use report::{load_per_case_csv, render_tables, write_per_case_csv, PerCaseRecord};

use crate::case::{load_cases, Case};
use crate::error::{Error, Result};
use crate::eval::{binarize, case_metrics, match_lesions, EvalParams};
use crate::phantom::{generate_dataset, PhantomParams};
use crate::registration::{align_case, RegistrationOptions};
use crate::stats::{bonferroni_flags, wilcoxon_signed_rank, TestResult};
use crate::training::{make_folds, train, TrainConfig};
use crate::unet::{infer_volume, Arm, InputConfiguration};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Case directories under this path.
    PhantomDir { path: PathBuf },
    /// Generate the dataset in memory from the master seed.
    Generate {
        cases: usize,
        #[serde(default)]
        params: PhantomParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub registration: RegistrationOptions,
    #[serde(default)]
    pub evaluation: EvalParams,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Config("arm list is empty".into()));
        }
        self.train.validate()?;
        self.registration.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub records: Vec<PerCaseRecord>,
    /// Cases whose sensitivity/PPV/F1 were undefined and excluded from the
    /// respective summaries.
    pub excluded: BTreeMap<String, usize>,
    pub registered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub arms: Vec<ArmReport>,
    pub tests: Vec<TestResult>,
    pub warnings: Vec<String>,
}

/// The paper's 25-test family: (measurement, arm, arm) in supplement order.
pub const CANONICAL_TESTS: [(&str, Arm, Arm); 25] = [
    ("fp", Arm::DualCe, Arm::DualAll),
    ("sensitivity", Arm::DualCe, Arm::DualAll),
    ("ppv", Arm::DualCe, Arm::DualAll),
    ("f1", Arm::DualCe, Arm::DualAll),
    ("sensitivity", Arm::DualCe, Arm::DualFlair),
    ("ppv", Arm::DualCe, Arm::DualFlair),
    ("f1", Arm::DualCe, Arm::DualFlair),
    ("sensitivity", Arm::DualCe, Arm::Ce),
    ("ppv", Arm::DualCe, Arm::Ce),
    ("f1", Arm::DualCe, Arm::Ce),
    ("sensitivity", Arm::DualCe, Arm::DualCeFlair),
    ("ppv", Arm::DualCe, Arm::DualCeFlair),
    ("f1", Arm::DualCe, Arm::DualCeFlair),
    ("sensitivity", Arm::DualCe, Arm::CeFlair),
    ("ppv", Arm::DualCe, Arm::CeFlair),
    ("f1", Arm::DualCe, Arm::CeFlair),
    ("sensitivity", Arm::DualAll, Arm::All),
    ("ppv", Arm::DualAll, Arm::All),
    ("f1", Arm::DualAll, Arm::All),
    ("sensitivity", Arm::Ce, Arm::All),
    ("ppv", Arm::Ce, Arm::All),
    ("f1", Arm::Ce, Arm::All),
    ("sensitivity", Arm::Ce, Arm::T1nCe),
    ("ppv", Arm::Ce, Arm::T1nCe),
    ("f1", Arm::Ce, Arm::T1nCe),
];

/// Stable per-(seed, arm, measure) bootstrap seed (FNV-1a over the label).
pub fn derived_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ master;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn load_or_generate(cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    match &cfg.data {
        DataSource::PhantomDir { path } => load_cases(path),
        DataSource::Generate { cases, params } => {
            generate_dataset(cfg.master_seed, params, *cases)
        }
    }
}

/// Runs one arm end to end over the shared fold split, producing one record
/// per case (each case is a test case of exactly one fold).
fn run_arm(
    arm: Arm,
    cases: &[Case],
    cfg: &ExperimentConfig,
    split: &crate::training::FoldSplit,
) -> Result<ArmReport> {
    let input = InputConfiguration::new(arm);
    let registered = input.is_dual();

    // mono-time arms skip registration entirely
    let working: Vec<Case> = if registered {
        let mut aligned = Vec::with_capacity(cases.len());
        for case in cases {
            let (a, _, _) = align_case(case, &cfg.registration)?;
            aligned.push(a);
        }
        aligned
    } else {
        cases.to_vec()
    };

    let by_id: BTreeMap<&str, &Case> = working.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut records = Vec::new();
    for fold in 0..split.k {
        let outcome = train(&working, &input, &cfg.train, split, fold)?;
        let mut test_ids = split.test_cases(fold);
        test_ids.sort();
        for id in test_ids {
            let case = by_id[id.as_str()];
            let heatmap = infer_volume(&outcome.net, case)?;
            let pred = binarize(&heatmap, cfg.evaluation.threshold)?;
            let mut m = match_lesions(&pred, &case.gt_mask, &cfg.evaluation)?;
            m.case_id = id.clone();
            let metrics = case_metrics(&m);
            records.push(PerCaseRecord {
                arm,
                case_id: id.clone(),
                fold,
                tp: m.true_positives,
                fn_: m.false_negatives,
                fp: m.false_positives,
                sensitivity: metrics.sensitivity,
                ppv: metrics.ppv,
                f1: metrics.f1,
            });
        }
    }
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let mut excluded = BTreeMap::new();
    excluded.insert(
        "sensitivity".to_string(),
        records.iter().filter(|r| r.sensitivity.is_none()).count(),
    );
    excluded.insert(
        "ppv".to_string(),
        records.iter().filter(|r| r.ppv.is_none()).count(),
    );
    excluded.insert(
        "f1".to_string(),
        records.iter().filter(|r| r.f1.is_none()).count(),
    );
    Ok(ArmReport {
        arm,
        records,
        excluded,
        registered,
    })
}

fn paired_values(
    a: &[PerCaseRecord],
    b: &[PerCaseRecord],
    measure: &str,
) -> (Vec<f64>, Vec<f64>) {
    let pick = |r: &PerCaseRecord| -> Option<f64> {
        match measure {
            "fp" => Some(r.fp as f64),
            "sensitivity" => r.sensitivity,
            "ppv" => r.ppv,
            "f1" => r.f1,
            _ => None,
        }
    };
    let bm: BTreeMap<&str, &PerCaseRecord> = b.iter().map(|r| (r.case_id.as_str(), r)).collect();
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for ra in a {
        if let Some(rb) = bm.get(ra.case_id.as_str()) {
            if let (Some(x), Some(y)) = (pick(ra), pick(rb)) {
                va.push(x);
                vb.push(y);
            }
        }
    }
    (va, vb)
}

/// Paired Wilcoxon tests over the canonical comparison family, restricted to
/// arms present in the report; Bonferroni flags use the family size actually
/// tested.
fn run_tests(arms: &[ArmReport], warnings: &mut Vec<String>) -> Vec<TestResult> {
    let by_arm: BTreeMap<Arm, &ArmReport> = arms.iter().map(|a| (a.arm, a)).collect();
    let mut attempted = 0usize;
    let mut results = Vec::new();
    for (measure, a, b) in CANONICAL_TESTS {
        let (Some(ra), Some(rb)) = (by_arm.get(&a), by_arm.get(&b)) else {
            continue;
        };
        attempted += 1;
        let (va, vb) = paired_values(&ra.records, &rb.records, measure);
        let label = format!("{measure}:{}:{}", a.name(), b.name());
        if va.is_empty() {
            warnings.push(format!("{label}: no jointly defined pairs"));
            continue;
        }
        match wilcoxon_signed_rank(&va, &vb) {
            Ok(mut t) => {
                t.label = label;
                results.push(t);
            }
            Err(e) => warnings.push(format!("{label}: {e}")),
        }
    }
    bonferroni_flags(results, attempted.max(1))
}

/// Runs the configured arms; any arm failure aborts that arm with a warning
/// while the others continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cases = load_or_generate(cfg)?;
    let split = make_folds(&cases, cfg.train.folds, cfg.master_seed)?;

    // fixed execution order regardless of the configured order
    let mut arms: Vec<Arm> = Arm::ALL
        .into_iter()
        .filter(|a| cfg.arms.contains(a))
        .collect();
    arms.dedup();

    let mut warnings = Vec::new();
    let mut arm_reports = Vec::new();
    for arm in arms {
        match run_arm(arm, &cases, cfg, &split) {
            Ok(r) => arm_reports.push(r),
            Err(e) => warnings.push(format!("arm {arm} aborted: {e}")),
        }
    }
    let tests = run_tests(&arm_reports, &mut warnings);

    let report = ExperimentReport {
        config_hash: cfg.config_hash(),
        master_seed: cfg.master_seed,
        arms: arm_reports,
        tests,
        warnings,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    render_tables(&report, &cfg.output_dir)?;
    Ok(report)
}

/// Provenance sidecar written next to every table.
#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
}

pub(crate) fn write_provenance(
    path: &Path,
    config_hash: &str,
    master_seed: u64,
) -> Result<()> {
    let p = Provenance {
        config_hash: config_hash.to_string(),
        master_seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let sidecar = PathBuf::from(format!("{}.provenance.json", path.display()));
    std::fs::write(sidecar, serde_json::to_string_pretty(&p)?)?;
    Ok(())
}

/// Builds an [`ExperimentReport`] from per-case records alone (used by the
/// `report` and `stats` commands and by the table audit).
pub fn report_from_records(
    records: Vec<PerCaseRecord>,
    master_seed: u64,
    config_hash: String,
) -> ExperimentReport {
    let mut by_arm: BTreeMap<Arm, Vec<PerCaseRecord>> = BTreeMap::new();
    for r in records {
        by_arm.entry(r.arm).or_default().push(r);
    }
    let mut arms = Vec::new();
    for arm in Arm::ALL {
        let Some(mut records) = by_arm.remove(&arm) else {
            continue;
        };
        records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let mut excluded = BTreeMap::new();
        excluded.insert(
            "sensitivity".to_string(),
            records.iter().filter(|r| r.sensitivity.is_none()).count(),
        );
        excluded.insert(
            "ppv".to_string(),
            records.iter().filter(|r| r.ppv.is_none()).count(),
        );
        excluded.insert(
            "f1".to_string(),
            records.iter().filter(|r| r.f1.is_none()).count(),
        );
        arms.push(ArmReport {
            arm,
            records,
            excluded,
            registered: InputConfiguration::new(arm).is_dual(),
        });
    }
    let mut warnings = Vec::new();
    let tests = run_tests(&arms, &mut warnings);
    ExperimentReport {
        config_hash,
        master_seed,
        arms,
        tests,
        warnings,
    }
}

/// Desk-scale and paper-scale experiment profiles. The desk profile shrinks
/// grid, epochs and sampling so a full matrix runs on one workstation CPU;
/// the paper profile keeps the clinical slab size and 70 epochs.
pub mod profiles {
    use super::*;
    use crate::registration::ParzenWindow;
    use crate::volume::Connectivity;

    pub fn desk_phantom() -> PhantomParams {
        PhantomParams {
            dims: [64, 64, 16],
            spacing: [3.0, 3.0, 8.0],
            ..Default::default()
        }
    }

    pub fn desk_train(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 20,
            seed,
            base_features: 8,
            depth: 4,
            ..Default::default()
        }
    }

    pub fn desk_registration() -> RegistrationOptions {
        RegistrationOptions {
            sample_fraction: 0.5,
            max_iterations: 120,
            ..Default::default()
        }
    }

    /// The clinical dilation range of 6 voxels was calibrated on 0.5 mm
    /// grids; 2 voxels at 3 mm desk resolution covers the same physical
    /// neighborhood.
    pub fn desk_eval() -> EvalParams {
        EvalParams {
            threshold: 0.5,
            dilation_radius_voxels: 2.0,
            connectivity: Connectivity::TwentySix,
        }
    }

    pub fn desk_config(master_seed: u64, cases: usize, output_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Generate {
                cases,
                params: desk_phantom(),
            },
            arms: Arm::ALL.to_vec(),
            train: desk_train(master_seed),
            registration: desk_registration(),
            evaluation: desk_eval(),
            output_dir,
            master_seed,
        }
    }

    pub fn paper_config(master_seed: u64, cases: usize, output_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Generate {
                cases,
                params: PhantomParams {
                    dims: [512, 512, 32],
                    spacing: [0.5, 0.5, 4.0],
                    ..Default::default()
                },
            },
            arms: Arm::ALL.to_vec(),
            train: TrainConfig {
                epochs: 70,
                seed: master_seed,
                base_features: 32,
                depth: 4,
                ..Default::default()
            },
            registration: RegistrationOptions {
                sample_fraction: 0.1,
                moving_window: ParzenWindow::CubicBspline,
                ..Default::default()
            },
            evaluation: EvalParams::default(),
            output_dir,
            master_seed,
        }
    }
}
