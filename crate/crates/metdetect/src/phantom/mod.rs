//! Seeded generator of paired-time-point synthetic head volumes.
//!
//! A case renders one anatomy (nested ellipsoid layers, curvilinear
//! enhancing vessels) at two time points. Lesions exist only at diagnosis.
//! Vessels sit at identical anatomy positions at both time points while
//! bright artifact blobs are drawn independently per time point, so a
//! network that sees both examinations can suppress exactly the confounders
//! a single-time-point network cannot. The pre-diagnosis examination is
//! rendered through a random affine misalignment, which the registration
//! stage has to undo.

mod scene;

pub(crate) use scene::render_case_volumes;

use crate::case::{ArtifactMeta, Case, Compartment, LesionMeta, PhantomTruth, TimePoint, VesselMeta};
use crate::error::{Error, Result};
use crate::volume::{AffineTransform3D, Geometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

/// Φ⁻¹(0.75): quartile offset of the unit normal.
const Z_Q75: f64 = 0.674_489_750_196_082;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Lesions per case: `max(1, 1 + Poisson(lambda))`; 2.5 gives median 3.
    pub lesion_count_lambda: f64,
    pub diameter_median_mm: f64,
    pub diameter_q25_mm: f64,
    pub diameter_q75_mm: f64,
    /// Fraction of lesions outside the brain parenchyma.
    pub extracerebral_fraction: f64,
    pub vessel_count: usize,
    pub artifact_rate_per_timepoint: f64,
    /// ceT1w lesion-to-brain intensity ratio.
    pub enhancement_contrast: f64,
    pub max_misalignment_mm: f64,
    pub max_misalignment_deg: f64,
    pub misalignment_scale_range: [f64; 2],
    pub noise_sd: f64,
    /// Half-intensity edge width of the lesion profile.
    pub lesion_edge_mm: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [128, 128, 32],
            spacing: [1.5, 1.5, 4.0],
            lesion_count_lambda: 2.5,
            diameter_median_mm: 4.2,
            diameter_q25_mm: 3.0,
            diameter_q75_mm: 7.1,
            extracerebral_fraction: 26.0 / 494.0,
            vessel_count: 8,
            artifact_rate_per_timepoint: 1.5,
            enhancement_contrast: 2.2,
            max_misalignment_mm: 4.0,
            max_misalignment_deg: 4.0,
            misalignment_scale_range: [0.98, 1.02],
            noise_sd: 0.04,
            lesion_edge_mm: 0.8,
        }
    }
}

impl PhantomParams {
    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Parameter(format!(
                "grid dims {:?} too small for a head phantom",
                self.dims
            )));
        }
        if self.lesion_count_lambda < 0.0
            || self.extracerebral_fraction < 0.0
            || self.extracerebral_fraction > 1.0
            || self.artifact_rate_per_timepoint < 0.0
        {
            return Err(Error::Parameter("negative count parameter".into()));
        }
        if !(self.diameter_q25_mm > 0.0
            && self.diameter_q25_mm <= self.diameter_median_mm
            && self.diameter_median_mm <= self.diameter_q75_mm)
        {
            return Err(Error::Parameter(format!(
                "diameter quartiles ({}, {}, {}) must be positive and ordered",
                self.diameter_q25_mm, self.diameter_median_mm, self.diameter_q75_mm
            )));
        }
        let head = HeadModel::from_params(self);
        let min_radius = head.radii.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if self.diameter_q75_mm >= min_radius {
            return Err(Error::Parameter(format!(
                "upper-quartile lesion diameter {} mm does not fit the head (radius {min_radius:.1} mm)",
                self.diameter_q75_mm
            )));
        }
        if self.max_misalignment_mm > 10.0 || self.max_misalignment_deg > 10.0 {
            return Err(Error::Parameter(
                "misalignment ranges are bounded by 10 mm and 10 degrees".into(),
            ));
        }
        if self.misalignment_scale_range[0] > self.misalignment_scale_range[1]
            || self.misalignment_scale_range[0] < 0.9
            || self.misalignment_scale_range[1] > 1.1
        {
            return Err(Error::Parameter(format!(
                "misalignment scale range {:?} out of bounds",
                self.misalignment_scale_range
            )));
        }
        Ok(())
    }
}

/// Nested-ellipsoid head: normalized radius rho selects the tissue layer.
#[derive(Debug, Clone)]
pub(crate) struct HeadModel {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

pub(crate) const RHO_BRAIN: f64 = 0.80;
pub(crate) const RHO_CSF: f64 = 0.85;
pub(crate) const RHO_SKULL: f64 = 0.93;

impl HeadModel {
    pub fn from_params(params: &PhantomParams) -> Self {
        let ext = [
            params.dims[0] as f64 * params.spacing[0],
            params.dims[1] as f64 * params.spacing[1],
            params.dims[2] as f64 * params.spacing[2],
        ];
        Self {
            center: [0.5 * ext[0], 0.5 * ext[1], 0.5 * ext[2]],
            radii: [0.44 * ext[0], 0.46 * ext[1], 0.47 * ext[2]],
        }
    }

    #[inline]
    pub fn rho(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s.sqrt()
    }

    /// World point at normalized radius `rho` along direction `dir`.
    fn point_at(&self, rho: f64, dir: [f64; 3]) -> [f64; 3] {
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let mut p = self.center;
        for a in 0..3 {
            p[a] += rho * self.radii[a] * dir[a] / norm;
        }
        p
    }
}

/// Split log-normal matching the reported median and quartiles exactly:
/// below the median log-scale sigma is fitted to q25, above to q75.
pub(crate) fn sample_diameter(params: &PhantomParams, rng: &mut ChaCha8Rng) -> f64 {
    let mu = params.diameter_median_mm.ln();
    let sigma_low = (params.diameter_median_mm / params.diameter_q25_mm).ln() / Z_Q75;
    let sigma_high = (params.diameter_q75_mm / params.diameter_median_mm).ln() / Z_Q75;
    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
    let sigma = if z < 0.0 { sigma_low } else { sigma_high };
    (mu + sigma * z).exp()
}

/// `max(1, 1 + Poisson(lambda))`; a lambda of exactly 0 disables lesions
/// entirely (lesion-free cases for change-detection baselines).
fn sample_lesion_count(params: &PhantomParams, rng: &mut ChaCha8Rng) -> usize {
    if params.lesion_count_lambda <= 0.0 {
        return 0;
    }
    let p = Poisson::new(params.lesion_count_lambda).unwrap();
    1 + p.sample(rng) as usize
}

fn sample_compartment(params: &PhantomParams, rng: &mut ChaCha8Rng) -> Compartment {
    if rng.gen::<f64>() >= params.extracerebral_fraction {
        return Compartment::Parenchymal;
    }
    // relative frequencies of the reported extracerebral lesions: 16 dural,
    // 8 leptomeningeal, 1 osseous, 1 subcutaneous
    let r = rng.gen::<f64>() * 26.0;
    if r < 16.0 {
        Compartment::Dural
    } else if r < 24.0 {
        Compartment::Leptomeningeal
    } else if r < 25.0 {
        Compartment::Osseous
    } else {
        Compartment::Subcutaneous
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn sample_center(
    head: &HeadModel,
    compartment: Compartment,
    radius_mm: f64,
    rng: &mut ChaCha8Rng,
) -> [f64; 3] {
    match compartment {
        Compartment::Parenchymal => {
            // rejection-sample inside the brain with margin for the radius
            let margin = radius_mm / head.radii.iter().cloned().fold(f64::INFINITY, f64::min);
            let rho_max = (RHO_BRAIN - margin).max(0.1);
            loop {
                let p = [
                    head.center[0] + (rng.gen::<f64>() * 2.0 - 1.0) * head.radii[0] * rho_max,
                    head.center[1] + (rng.gen::<f64>() * 2.0 - 1.0) * head.radii[1] * rho_max,
                    head.center[2] + (rng.gen::<f64>() * 2.0 - 1.0) * head.radii[2] * rho_max,
                ];
                if head.rho(p) <= rho_max {
                    return p;
                }
            }
        }
        Compartment::Dural | Compartment::Leptomeningeal => {
            // on the brain convexity (upper hemisphere of the boundary)
            let mut dir = random_unit_vector(rng);
            dir[2] = dir[2].abs().max(0.2);
            let rho = if compartment == Compartment::Dural {
                (RHO_BRAIN + RHO_CSF) / 2.0
            } else {
                RHO_BRAIN
            };
            head.point_at(rho, dir)
        }
        Compartment::Osseous => head.point_at((RHO_CSF + RHO_SKULL) / 2.0, random_unit_vector(rng)),
        Compartment::Subcutaneous => head.point_at((RHO_SKULL + 1.0) / 2.0, random_unit_vector(rng)),
    }
}

fn lesions_overlap(a: &LesionMeta, b: &LesionMeta, clearance_mm: f64) -> bool {
    let d2: f64 = (0..3)
        .map(|i| (a.center_mm[i] - b.center_mm[i]).powi(2))
        .sum();
    let min_dist = 0.5 * (a.diameter_mm + b.diameter_mm) + clearance_mm;
    d2 < min_dist * min_dist
}

fn near_vessel(center: [f64; 3], radius_mm: f64, vessels: &[VesselMeta], clearance_mm: f64) -> bool {
    for v in vessels {
        for seg in v.points_mm.windows(2) {
            let d = point_segment_distance(center, seg[0], seg[1]);
            if d < radius_mm + v.radius_mm + clearance_mm {
                return true;
            }
        }
    }
    false
}

pub(crate) fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn draw_case_lesions(
    params: &PhantomParams,
    head: &HeadModel,
    vessels: &[VesselMeta],
    rng: &mut ChaCha8Rng,
) -> Vec<LesionMeta> {
    let count = sample_lesion_count(params, rng);
    let clearance = 2.0 * params.spacing[0].max(params.spacing[2]);
    let mut lesions: Vec<LesionMeta> = Vec::with_capacity(count);
    for _ in 0..count {
        let diameter = sample_diameter(params, rng);
        let compartment = sample_compartment(params, rng);
        // at least 10% above the configured contrast so noise cannot push a
        // lesion's mean below the enhancement_contrast * brain level
        let enhancement = params.enhancement_contrast * (1.1 + 0.2 * rng.gen::<f64>());
        // placement with rejection against existing structures
        let mut attempt = 0;
        let center = loop {
            let c = sample_center(head, compartment, diameter / 2.0, rng);
            let candidate = LesionMeta {
                center_mm: c,
                diameter_mm: diameter,
                compartment,
                enhancement,
            };
            let clash = lesions.iter().any(|l| lesions_overlap(l, &candidate, clearance))
                || near_vessel(c, diameter / 2.0, vessels, clearance);
            if !clash || attempt > 200 {
                break c;
            }
            attempt += 1;
        };
        lesions.push(LesionMeta {
            center_mm: center,
            diameter_mm: diameter,
            compartment,
            enhancement,
        });
    }
    lesions
}

/// Samples the per-case lesion populations without rendering; deterministic
/// given the seed. Diameters follow a split log-normal pinned to the
/// reported median 4.2 mm and quartiles (3.0, 7.1) mm; per-case counts are a
/// shifted Poisson with median 3.
pub fn sample_lesion_population(
    seed: u64,
    params: &PhantomParams,
    n_cases: usize,
) -> Result<Vec<Vec<LesionMeta>>> {
    params.validate()?;
    if n_cases == 0 {
        return Err(Error::Parameter("n_cases must be >= 1".into()));
    }
    let head = HeadModel::from_params(params);
    let mut out = Vec::with_capacity(n_cases);
    for case_idx in 0..n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x1e51_0000 + case_idx as u64);
        out.push(draw_case_lesions(params, &head, &[], &mut rng));
    }
    Ok(out)
}

fn draw_vessels(params: &PhantomParams, head: &HeadModel, rng: &mut ChaCha8Rng) -> Vec<VesselMeta> {
    let mut vessels = Vec::with_capacity(params.vessel_count);
    for _ in 0..params.vessel_count {
        // mostly z-running tubes so axial slices see lesion-like bright dots
        let x = head.center[0] + (rng.gen::<f64>() * 2.0 - 1.0) * 0.55 * head.radii[0];
        let y = head.center[1] + (rng.gen::<f64>() * 2.0 - 1.0) * 0.55 * head.radii[1];
        let z_span = (0.3 + 0.4 * rng.gen::<f64>()) * head.radii[2];
        let z0 = head.center[2] - z_span;
        let z1 = head.center[2] + z_span;
        let wobble = 0.08 * head.radii[0];
        let n_pts = 5;
        let mut points = Vec::with_capacity(n_pts);
        for i in 0..n_pts {
            let t = i as f64 / (n_pts - 1) as f64;
            points.push([
                x + (rng.gen::<f64>() * 2.0 - 1.0) * wobble,
                y + (rng.gen::<f64>() * 2.0 - 1.0) * wobble,
                z0 + t * (z1 - z0),
            ]);
        }
        vessels.push(VesselMeta {
            points_mm: points,
            radius_mm: 0.9 + 0.5 * rng.gen::<f64>(),
        });
    }
    vessels
}

fn draw_artifacts(
    params: &PhantomParams,
    head: &HeadModel,
    timepoint: TimePoint,
    rng: &mut ChaCha8Rng,
) -> Vec<ArtifactMeta> {
    let count = if params.artifact_rate_per_timepoint > 0.0 {
        Poisson::new(params.artifact_rate_per_timepoint).unwrap().sample(rng) as usize
    } else {
        0
    };
    (0..count)
        .map(|_| {
            let dir = random_unit_vector(rng);
            let rho = rng.gen::<f64>() * 0.95;
            ArtifactMeta {
                center_mm: head.point_at(rho, dir),
                sigma_mm: 1.5 + 2.0 * rng.gen::<f64>(),
                amplitude: 0.35 + 0.45 * rng.gen::<f64>(),
                timepoint,
            }
        })
        .collect()
}

fn draw_misalignment(params: &PhantomParams, head: &HeadModel, rng: &mut ChaCha8Rng) -> AffineTransform3D {
    let axis = random_unit_vector(rng);
    let angle = (rng.gen::<f64>() * params.max_misalignment_deg).to_radians();
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    let mut rot = [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ];
    let scale = params.misalignment_scale_range[0]
        + rng.gen::<f64>() * (params.misalignment_scale_range[1] - params.misalignment_scale_range[0]);
    for row in rot.iter_mut() {
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    let dir = random_unit_vector(rng);
    let mag = rng.gen::<f64>() * params.max_misalignment_mm;
    let mut xf = AffineTransform3D::about_center(rot, head.center);
    for a in 0..3 {
        xf.translation[a] += mag * dir[a];
    }
    xf
}

/// Generates one case; bit-identical for identical seed and parameters.
pub fn generate_case(seed: u64, params: &PhantomParams) -> Result<Case> {
    params.validate()?;
    let head = HeadModel::from_params(params);

    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let vessels = draw_vessels(params, &head, &mut stream(1));
    let lesions = draw_case_lesions(params, &head, &vessels, &mut stream(2));
    let misalignment = draw_misalignment(params, &head, &mut stream(3));
    let mut artifacts = draw_artifacts(params, &head, TimePoint::Prediag, &mut stream(4));
    artifacts.extend(draw_artifacts(params, &head, TimePoint::Diagnosis, &mut stream(5)));

    let truth = PhantomTruth {
        misalignment,
        vessels,
        artifacts,
        noise_sd: params.noise_sd,
    };
    let (prediag, diagnosis, gt_mask) =
        render_case_volumes(seed, params, &head, &lesions, &truth)?;

    let case = Case {
        id: format!("case{seed:05}"),
        patient_id: String::new(),
        prediag,
        diagnosis,
        gt_mask,
        lesions,
        phantom_truth: Some(truth),
    };
    case.validate()?;
    Ok(case)
}

/// Generates `n_cases` cases under one master seed, grouping consecutive
/// cases into synthetic patients of alternating size 2 and 3.
pub fn generate_dataset(seed: u64, params: &PhantomParams, n_cases: usize) -> Result<Vec<Case>> {
    let mut cases = Vec::with_capacity(n_cases);
    let mut patient = 0usize;
    let mut in_patient = 0usize;
    let mut patient_size = 2usize;
    for i in 0..n_cases {
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let mut case = generate_case(case_seed, params)?;
        case.id = format!("case{i:04}");
        case.patient_id = format!("patient{patient:03}");
        cases.push(case);
        in_patient += 1;
        if in_patient >= patient_size {
            patient += 1;
            in_patient = 0;
            patient_size = if patient_size == 2 { 3 } else { 2 };
        }
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{connected_components, Connectivity};

    fn small_params() -> PhantomParams {
        PhantomParams {
            dims: [48, 48, 16],
            spacing: [3.0, 3.0, 6.0],
            ..Default::default()
        }
    }

    #[test]
    fn population_is_deterministic() {
        let p = small_params();
        let a = sample_lesion_population(7, &p, 5).unwrap();
        let b = sample_lesion_population(7, &p, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_extracerebral_fraction_all_parenchymal() {
        let p = PhantomParams {
            extracerebral_fraction: 0.0,
            ..small_params()
        };
        let pop = sample_lesion_population(3, &p, 40).unwrap();
        assert!(pop
            .iter()
            .flatten()
            .all(|l| l.compartment == Compartment::Parenchymal));
    }

    #[test]
    fn diameter_quartiles_match_reported_values() {
        let p = PhantomParams::default();
        let pop = sample_lesion_population(11, &p, 400).unwrap();
        let mut d: Vec<f64> = pop.iter().flatten().map(|l| l.diameter_mm).collect();
        assert!(d.len() >= 1000, "only {} lesions", d.len());
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| crate::stats::quantile_sorted(&d, p);
        assert!((q(0.5) - 4.2).abs() < 0.3, "median {}", q(0.5));
        assert!((q(0.25) - 3.0).abs() < 0.5, "q25 {}", q(0.25));
        assert!((q(0.75) - 7.1).abs() < 0.5, "q75 {}", q(0.75));
    }

    #[test]
    fn case_count_median_is_three() {
        let p = PhantomParams::default();
        let pop = sample_lesion_population(13, &p, 1001).unwrap();
        let mut counts: Vec<f64> = pop.iter().map(|c| c.len() as f64).collect();
        counts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(counts[counts.len() / 2], 3.0);
        assert!(counts.iter().all(|&c| c >= 1.0));
    }

    #[test]
    fn generate_case_is_bit_deterministic() {
        let p = small_params();
        let a = generate_case(42, &p).unwrap();
        let b = generate_case(42, &p).unwrap();
        assert_eq!(a.gt_mask.voxels(), b.gt_mask.voxels());
        for kind in crate::case::SequenceKind::ALL {
            assert_eq!(
                a.diagnosis[&kind].voxels(),
                b.diagnosis[&kind].voxels(),
                "{kind} diagnosis"
            );
            assert_eq!(
                a.prediag[&kind].voxels(),
                b.prediag[&kind].voxels(),
                "{kind} prediag"
            );
        }
        assert_eq!(a.lesions, b.lesions);
    }

    #[test]
    fn ground_truth_components_match_lesion_count() {
        let p = small_params();
        for seed in [1u64, 2, 3, 4, 5] {
            let case = generate_case(seed, &p).unwrap();
            let cc = connected_components(&case.gt_mask, Connectivity::TwentySix);
            assert_eq!(
                cc.count() as usize,
                case.lesions.len(),
                "seed {seed}: {} components vs {} lesions",
                cc.count(),
                case.lesions.len()
            );
        }
    }

    #[test]
    fn lesions_enhance_on_diagnosis_cet1w() {
        let p = small_params();
        let case = generate_case(9, &p).unwrap();
        let ce = &case.diagnosis[&crate::case::SequenceKind::CeT1w];
        let cc = connected_components(&case.gt_mask, Connectivity::TwentySix);
        let brain_mean = 0.60; // brain ceT1w base intensity
        for label in 1..=cc.count() {
            let vals: Vec<f64> = cc
                .labels()
                .iter()
                .zip(ce.voxels())
                .filter(|(l, _)| **l == label)
                .map(|(_, v)| *v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(
                mean >= p.enhancement_contrast * brain_mean,
                "component {label}: mean {mean} below {}",
                p.enhancement_contrast * brain_mean
            );
        }
    }

    #[test]
    fn lesions_absent_from_prediag() {
        let p = small_params();
        let case = generate_case(17, &p).unwrap();
        let truth = case.phantom_truth.as_ref().unwrap();
        let pre_ce = &case.prediag[&crate::case::SequenceKind::CeT1w];
        let inv = truth.misalignment.inverse().unwrap();
        let geom = pre_ce.geometry();
        let brain_base = 0.60;
        for lesion in &case.lesions {
            if lesion.compartment != Compartment::Parenchymal {
                continue;
            }
            // anatomy position renders in the prediag grid at T^-1(p)
            let idx = geom.world_to_index(inv.apply(lesion.center_mm));
            let i = [
                idx[0].round() as usize,
                idx[1].round() as usize,
                idx[2].round() as usize,
            ];
            let v = pre_ce.get(i[0], i[1], i[2]) as f64;
            assert!(
                (v - brain_base).abs() <= 2.0 * p.noise_sd + 0.05,
                "prediag intensity {v} at lesion site deviates from background"
            );
        }
    }

    #[test]
    fn vessels_persist_at_matching_anatomy_positions() {
        let p = small_params();
        let case = generate_case(23, &p).unwrap();
        let truth = case.phantom_truth.as_ref().unwrap();
        let inv = truth.misalignment.inverse().unwrap();
        let diag_ce = &case.diagnosis[&crate::case::SequenceKind::CeT1w];
        let pre_ce = &case.prediag[&crate::case::SequenceKind::CeT1w];
        let geom = diag_ce.geometry();
        let head = HeadModel::from_params(&p);
        let vessel_level = 0.60 * p.enhancement_contrast; // >> brain base
        let mut checked = 0;
        for vessel in &truth.vessels {
            for seg in vessel.points_mm.windows(2) {
                for t in [0.25, 0.5, 0.75] {
                    let anat = [
                        seg[0][0] + t * (seg[1][0] - seg[0][0]),
                        seg[0][1] + t * (seg[1][1] - seg[0][1]),
                        seg[0][2] + t * (seg[1][2] - seg[0][2]),
                    ];
                    if head.rho(anat) > RHO_BRAIN {
                        continue;
                    }
                    // within one voxel of the mapped position, both time
                    // points must show the enhanced vessel
                    let max_near = |vol: &crate::volume::Volume, idx: [f64; 3]| {
                        let mut best = f64::NEG_INFINITY;
                        let dims = vol.dims();
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let i = idx[0].round() as i64 + dx;
                                    let j = idx[1].round() as i64 + dy;
                                    let k = idx[2].round() as i64 + dz;
                                    if i < 0 || j < 0 || k < 0
                                        || i >= dims[0] as i64
                                        || j >= dims[1] as i64
                                        || k >= dims[2] as i64
                                    {
                                        continue;
                                    }
                                    best = best.max(vol.get(i as usize, j as usize, k as usize)
                                        as f64);
                                }
                            }
                        }
                        best
                    };
                    let dv = max_near(diag_ce, geom.world_to_index(anat));
                    let pv = max_near(pre_ce, geom.world_to_index(inv.apply(anat)));
                    let enhanced = 0.60 + 0.5 * (vessel_level - 0.60);
                    assert!(dv > enhanced, "diagnosis vessel neighborhood {dv}");
                    assert!(pv > enhanced, "prediag vessel neighborhood {pv}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "too few vessel samples inside the brain");
    }

    #[test]
    fn dataset_groups_patients() {
        let p = small_params();
        let cases = generate_dataset(5, &p, 7).unwrap();
        assert_eq!(cases.len(), 7);
        assert_eq!(cases[0].patient_id, cases[1].patient_id);
        assert_ne!(cases[1].patient_id, cases[2].patient_id);
        // ids unique
        let mut ids: Vec<_> = cases.iter().map(|c| c.id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 7);
    }

    #[test]
    fn misalignment_stays_in_bounds() {
        let p = PhantomParams {
            max_misalignment_mm: 20.0,
            ..small_params()
        };
        assert!(p.validate().is_err());
    }
}
