//! The case unit: one subject's paired examinations.
//!
//! A case couples the pre-diagnosis and diagnosis sequence sets with the
//! ground-truth lesion mask (always on the diagnosis ceT1w grid) and, for
//! phantom data, the construction truth used by oracle tests.

use crate::error::{Error, Result};
use crate::volume::{load_volume, save_volume, AffineTransform3D, BinaryMask, Volume};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum SequenceKind {
    T1w,
    CeT1w,
    T2w,
    Flair,
}

impl SequenceKind {
    pub const ALL: [SequenceKind; 4] = [
        SequenceKind::T1w,
        SequenceKind::CeT1w,
        SequenceKind::T2w,
        SequenceKind::Flair,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SequenceKind::T1w => "T1w",
            SequenceKind::CeT1w => "ceT1w",
            SequenceKind::T2w => "T2w",
            SequenceKind::Flair => "FLAIR",
        }
    }

    fn file_key(&self) -> &'static str {
        match self {
            SequenceKind::T1w => "t1w",
            SequenceKind::CeT1w => "cet1w",
            SequenceKind::T2w => "t2w",
            SequenceKind::Flair => "flair",
        }
    }
}

impl std::fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum TimePoint {
    Prediag,
    Diagnosis,
}

impl TimePoint {
    pub fn name(&self) -> &'static str {
        match self {
            TimePoint::Prediag => "prediag",
            TimePoint::Diagnosis => "diagnosis",
        }
    }
}

pub type SequenceSet = BTreeMap<SequenceKind, Volume>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compartment {
    Parenchymal,
    Dural,
    Leptomeningeal,
    Osseous,
    Subcutaneous,
}

impl Compartment {
    pub fn is_extracerebral(&self) -> bool {
        !matches!(self, Compartment::Parenchymal)
    }
}

/// Ground-truth description of one lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMeta {
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    pub compartment: Compartment,
    /// ceT1w lesion-to-brain intensity ratio.
    pub enhancement: f64,
}

/// A vessel rendered identically at both time points (anatomy-space polyline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselMeta {
    pub points_mm: Vec<[f64; 3]>,
    pub radius_mm: f64,
}

/// A transient bright blob present at a single time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub center_mm: [f64; 3],
    pub sigma_mm: f64,
    pub amplitude: f64,
    pub timepoint: TimePoint,
}

/// Construction truth carried by phantom cases for oracle tests.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhantomTruth {
    /// World-space misalignment applied when rendering the pre-diagnosis
    /// examination; the ideal registration transform is its inverse.
    pub misalignment: AffineTransform3D,
    pub vessels: Vec<VesselMeta>,
    pub artifacts: Vec<ArtifactMeta>,
    pub noise_sd: f64,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub patient_id: String,
    pub prediag: SequenceSet,
    pub diagnosis: SequenceSet,
    pub gt_mask: BinaryMask,
    pub lesions: Vec<LesionMeta>,
    pub phantom_truth: Option<PhantomTruth>,
}

impl Case {
    pub fn validate(&self) -> Result<()> {
        let ce = self
            .diagnosis
            .get(&SequenceKind::CeT1w)
            .ok_or_else(|| Error::Input(format!("case {}: diagnosis ceT1w missing", self.id)))?;
        if !self.gt_mask.geometry().approx_eq(ce.geometry(), 1e-9) {
            return Err(Error::Geometry(format!(
                "case {}: ground-truth mask grid differs from diagnosis ceT1w grid",
                self.id
            )));
        }
        Ok(())
    }

    pub fn sequence(&self, tp: TimePoint, kind: SequenceKind) -> Option<&Volume> {
        match tp {
            TimePoint::Prediag => self.prediag.get(&kind),
            TimePoint::Diagnosis => self.diagnosis.get(&kind),
        }
    }

    /// Grid all network inputs and outputs live on.
    pub fn reference_geometry(&self) -> &crate::volume::Geometry {
        self.diagnosis[&SequenceKind::CeT1w].geometry()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseManifest {
    case_id: String,
    patient_id: String,
    prediag_sequences: Vec<SequenceKind>,
    diagnosis_sequences: Vec<SequenceKind>,
    lesions: Vec<LesionMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phantom_truth: Option<PhantomTruth>,
}

/// Writes a case as one directory: per-sequence native volumes, the
/// ground-truth mask and a JSON manifest.
pub fn save_case(case: &Case, dir: &Path) -> Result<()> {
    case.validate()?;
    std::fs::create_dir_all(dir)?;
    for (tp, set) in [
        (TimePoint::Prediag, &case.prediag),
        (TimePoint::Diagnosis, &case.diagnosis),
    ] {
        for (kind, vol) in set {
            let name = format!("{}_{}.vol", tp.name(), kind.file_key());
            save_volume(vol, &dir.join(name))?;
        }
    }
    save_volume(&case.gt_mask.to_volume(), &dir.join("gt_mask.vol"))?;
    let manifest = CaseManifest {
        case_id: case.id.clone(),
        patient_id: case.patient_id.clone(),
        prediag_sequences: case.prediag.keys().copied().collect(),
        diagnosis_sequences: case.diagnosis.keys().copied().collect(),
        lesions: case.lesions.clone(),
        phantom_truth: case.phantom_truth.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_case(dir: &Path) -> Result<Case> {
    let manifest: CaseManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let load_set = |tp: TimePoint, kinds: &[SequenceKind]| -> Result<SequenceSet> {
        let mut set = SequenceSet::new();
        for kind in kinds {
            let name = format!("{}_{}.vol", tp.name(), kind.file_key());
            set.insert(*kind, load_volume(&dir.join(name))?);
        }
        Ok(set)
    };
    let prediag = load_set(TimePoint::Prediag, &manifest.prediag_sequences)?;
    let diagnosis = load_set(TimePoint::Diagnosis, &manifest.diagnosis_sequences)?;
    let gt_vol = load_volume(&dir.join("gt_mask.vol"))?;
    let gt_mask = BinaryMask::from_volume_thresholded(&gt_vol, 0.5);
    let case = Case {
        id: manifest.case_id,
        patient_id: manifest.patient_id,
        prediag,
        diagnosis,
        gt_mask,
        lesions: manifest.lesions,
        phantom_truth: manifest.phantom_truth,
    };
    case.validate()?;
    Ok(case)
}

/// Loads every case directory under `root`, sorted by case id.
pub fn load_cases(root: &Path) -> Result<Vec<Case>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!(
            "no case directories with manifest.json under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_case(d)).collect()
}
