//! Early-fusion input assembly: each experiment arm names which
//! (time point, sequence) pairs enter the network, and every named slot
//! contributes a 3-slice axial slab, so the channel count is
//! `slots * (2 * half_width + 1)`.

use crate::case::{Case, SequenceKind, TimePoint};
use crate::error::{Error, Result};
use crate::nn::Tensor4;
use crate::volume::{zscore_normalize, Volume};
use serde::{Deserialize, Serialize};

/// The eleven experiment arms. Dual arms see both examinations, mono arms
/// only the diagnosis examination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    DualAll,
    DualCe,
    DualNative,
    DualNT1,
    DualT2,
    DualFlair,
    DualCeFlair,
    T1nCe,
    All,
    Ce,
    CeFlair,
}

impl Arm {
    /// Paper-order listing (dual arms first, then mono equivalents).
    pub const ALL: [Arm; 11] = [
        Arm::DualAll,
        Arm::DualCe,
        Arm::DualNative,
        Arm::DualNT1,
        Arm::DualT2,
        Arm::DualFlair,
        Arm::DualCeFlair,
        Arm::T1nCe,
        Arm::All,
        Arm::Ce,
        Arm::CeFlair,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::DualAll => "dual_all",
            Arm::DualCe => "dual_ce",
            Arm::DualNative => "dual_native",
            Arm::DualNT1 => "dual_nT1",
            Arm::DualT2 => "dual_T2",
            Arm::DualFlair => "dual_FLAIR",
            Arm::DualCeFlair => "dual_ce+FLAIR",
            Arm::T1nCe => "T1n_ce",
            Arm::All => "all",
            Arm::Ce => "ce",
            Arm::CeFlair => "ce+FLAIR",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown arm {s:?}; expected one of {}",
                    Arm::ALL.map(|a| a.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Arm {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Arm::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Ordered channel-slot list for one arm plus the slab half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputConfiguration {
    pub arm: Arm,
    pub slots: Vec<(TimePoint, SequenceKind)>,
    pub slab_half_width: usize,
}

impl InputConfiguration {
    pub fn new(arm: Arm) -> Self {
        Self::with_half_width(arm, 1)
    }

    pub fn with_half_width(arm: Arm, slab_half_width: usize) -> Self {
        use SequenceKind::*;
        let dual = |seqs: &[SequenceKind]| {
            let mut slots: Vec<(TimePoint, SequenceKind)> = seqs
                .iter()
                .map(|&s| (TimePoint::Prediag, s))
                .collect();
            slots.extend(seqs.iter().map(|&s| (TimePoint::Diagnosis, s)));
            slots
        };
        let mono = |seqs: &[SequenceKind]| {
            seqs.iter()
                .map(|&s| (TimePoint::Diagnosis, s))
                .collect::<Vec<_>>()
        };
        let slots = match arm {
            Arm::DualAll => dual(&[T1w, CeT1w, T2w, Flair]),
            Arm::DualCe => dual(&[CeT1w]),
            Arm::DualNative => dual(&[T1w, T2w, Flair]),
            Arm::DualNT1 => dual(&[T1w]),
            Arm::DualT2 => dual(&[T2w]),
            Arm::DualFlair => dual(&[Flair]),
            Arm::DualCeFlair => dual(&[CeT1w, Flair]),
            // pre-diagnosis native T1 paired with the diagnosis ceT1w
            Arm::T1nCe => vec![(TimePoint::Prediag, T1w), (TimePoint::Diagnosis, CeT1w)],
            Arm::All => mono(&[T1w, CeT1w, T2w, Flair]),
            Arm::Ce => mono(&[CeT1w]),
            Arm::CeFlair => mono(&[CeT1w, Flair]),
        };
        Self {
            arm,
            slots,
            slab_half_width,
        }
    }

    pub fn channels(&self) -> usize {
        self.slots.len() * (2 * self.slab_half_width + 1)
    }

    /// Whether the arm consumes the pre-diagnosis examination (and therefore
    /// needs registration).
    pub fn is_dual(&self) -> bool {
        self.slots.iter().any(|(tp, _)| *tp == TimePoint::Prediag)
    }
}

/// Per-case normalized slot volumes, prepared once so repeated slice
/// assembly does not re-normalize.
pub struct PreparedCase {
    pub case_id: String,
    pub dims: [usize; 3],
    planes: Vec<Volume>,
    config: InputConfiguration,
}

pub fn prepare_case(case: &Case, config: &InputConfiguration) -> Result<PreparedCase> {
    let dims = case.reference_geometry().dims;
    let mut planes = Vec::with_capacity(config.slots.len());
    for (tp, kind) in &config.slots {
        let vol = case.sequence(*tp, *kind).ok_or_else(|| {
            Error::Config(format!(
                "case {}: arm {} requires the {} {} sequence, which is missing",
                case.id,
                config.arm,
                tp.name(),
                kind
            ))
        })?;
        if vol.dims() != dims {
            return Err(Error::Geometry(format!(
                "case {}: {} {} grid {:?} differs from reference {:?}; align the case first",
                case.id,
                tp.name(),
                kind,
                vol.dims(),
                dims
            )));
        }
        planes.push(zscore_normalize(vol)?);
    }
    Ok(PreparedCase {
        case_id: case.id.clone(),
        dims,
        planes,
        config: config.clone(),
    })
}

impl PreparedCase {
    /// Network input for slice `z`: per slot, slices z-hw ..= z+hw with edge
    /// clamping, channels in slot order.
    pub fn assemble(&self, z: usize) -> Result<Tensor4> {
        let [nx, ny, nz] = self.dims;
        if z >= nz {
            return Err(Error::Input(format!(
                "slice {z} out of range for {nz} slices"
            )));
        }
        let hw = self.config.slab_half_width as i64;
        let mut out = Tensor4::zeros([1, self.config.channels(), ny, nx]);
        let mut c = 0usize;
        for vol in &self.planes {
            for dz in -hw..=hw {
                let zz = (z as i64 + dz).clamp(0, nz as i64 - 1) as usize;
                let plane = out.plane_mut(0, c);
                for y in 0..ny {
                    for x in 0..nx {
                        plane[y * nx + x] = vol.get(x, y, zz) as f64;
                    }
                }
                c += 1;
            }
        }
        Ok(out)
    }
}

/// One-shot assembly of a single slice slab (normalizes per volume each
/// call; batch consumers should prepare the case once instead).
pub fn assemble_input(case: &Case, config: &InputConfiguration, z: usize) -> Result<Tensor4> {
    prepare_case(case, config)?.assemble(z)
}
