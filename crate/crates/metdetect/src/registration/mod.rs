//! Affine registration: Mattes mutual information maximized by a
//! regular-step gradient ascent over a coarse-to-fine pyramid.
//!
//! The optimizer walks in a scaled parameter space (translations in mm,
//! linear-part entries scaled by the fixed-image radius so one step moves
//! volume corners comparably), halves its step whenever the gradient
//! direction reverses, and stops at a minimum step or an iteration cap. The
//! best-metric transform seen is returned.

mod mattes;

pub use mattes::{mattes_mi, params_to_transform, transform_to_params, MattesMetric, AFFINE_PARAMS};

use crate::case::{Case, SequenceKind, SequenceSet};
use crate::error::{Error, Result};
use crate::volume::{resample, AffineTransform3D, Geometry, Interp, Volume};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParzenWindow {
    /// Zero-order window; used on the fixed axis and available on the moving
    /// axis for analytic histogram tests.
    Box,
    /// Cubic B-spline window on the moving axis (the default), which makes
    /// the metric differentiable.
    CubicBspline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationOptions {
    pub histogram_bins: usize,
    /// Fraction of fixed voxels used as samples; below 1.0 the subset is
    /// drawn with `sample_seed`.
    pub sample_fraction: f64,
    pub sample_seed: u64,
    /// Amplitude (voxels) of the deterministic sub-voxel jitter applied to
    /// sample positions; 0 samples exactly at voxel centers.
    pub sample_jitter: f64,
    pub pyramid_levels: usize,
    pub initial_step: f64,
    pub relaxation_factor: f64,
    pub min_step: f64,
    pub max_iterations: usize,
    /// Scale dividing the linear-part gradient; `None` uses the fixed-image
    /// radius in mm.
    pub linear_scale: Option<f64>,
    pub moving_window: ParzenWindow,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self {
            histogram_bins: 32,
            sample_fraction: 1.0,
            sample_seed: 0,
            sample_jitter: 0.5,
            pyramid_levels: 3,
            initial_step: 1.0,
            relaxation_factor: 0.5,
            min_step: 1e-4,
            max_iterations: 200,
            linear_scale: None,
            moving_window: ParzenWindow::CubicBspline,
        }
    }
}

impl RegistrationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_bins < 8 {
            return Err(Error::Parameter(format!(
                "histogram_bins must be >= 8, got {}",
                self.histogram_bins
            )));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "sample_fraction must be in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if !(self.relaxation_factor > 0.0 && self.relaxation_factor < 1.0) {
            return Err(Error::Parameter(format!(
                "relaxation_factor must be in (0, 1), got {}",
                self.relaxation_factor
            )));
        }
        if !(self.min_step < self.initial_step) {
            return Err(Error::Parameter(format!(
                "min_step {} must be below initial_step {}",
                self.min_step, self.initial_step
            )));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Parameter("pyramid_levels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceReason {
    MinStep,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub level: usize,
    pub iteration: usize,
    pub step: f64,
    pub metric: f64,
    pub params: [f64; AFFINE_PARAMS],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegistrationTrace {
    pub rows: Vec<TraceRow>,
    pub level_outcomes: Vec<ConvergenceReason>,
}

impl RegistrationTrace {
    /// CSV export: level, iteration, step, metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "level,iteration,step,metric")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.level, r.iteration, r.step, r.metric)?;
        }
        Ok(())
    }

    /// Running maximum of the metric over all recorded iterations.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.rows
            .iter()
            .map(|r| {
                best = best.max(r.metric);
                best
            })
            .collect()
    }
}

/// Separable Gaussian smoothing followed by stride subsampling, per-axis.
fn smooth_and_downsample(vol: &Volume, factors: [usize; 3]) -> Volume {
    let g = vol.geometry();
    let [nx, ny, nz] = g.dims;
    let mut data: Vec<f64> = vol.voxels().iter().map(|&v| v as f64).collect();

    for axis in 0..3 {
        let f = factors[axis];
        if f <= 1 {
            continue;
        }
        let sigma = 0.5 * f as f64;
        let radius = (2.5 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut ksum = 0.0;
        for t in -radius..=radius {
            let w = (-(t * t) as f64 / (2.0 * sigma * sigma)).exp();
            kernel.push(w);
            ksum += w;
        }
        for k in kernel.iter_mut() {
            *k /= ksum;
        }
        let n = [nx, ny, nz][axis] as i64;
        let mut out = vec![0.0f64; data.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let pos = [i as i64, j as i64, k as i64];
                    let mut acc = 0.0;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let mut p = pos;
                        // reflect boundary
                        let mut q = p[axis] + ki as i64 - radius;
                        if q < 0 {
                            q = -q;
                        }
                        if q >= n {
                            q = 2 * n - 2 - q;
                        }
                        p[axis] = q.clamp(0, n - 1);
                        acc += kw * data[(p[0] + nx as i64 * (p[1] + ny as i64 * p[2])) as usize];
                    }
                    out[i + nx * (j + ny * k)] = acc;
                }
            }
        }
        data = out;
    }

    let new_dims = [
        nx.div_ceil(factors[0]),
        ny.div_ceil(factors[1]),
        nz.div_ceil(factors[2]),
    ];
    let mut voxels = Vec::with_capacity(new_dims[0] * new_dims[1] * new_dims[2]);
    for k in 0..new_dims[2] {
        for j in 0..new_dims[1] {
            for i in 0..new_dims[0] {
                let src = (i * factors[0]) + nx * ((j * factors[1]) + ny * (k * factors[2]));
                voxels.push(data[src] as f32);
            }
        }
    }
    let geom = Geometry {
        dims: new_dims,
        spacing: [
            g.spacing[0] * factors[0] as f64,
            g.spacing[1] * factors[1] as f64,
            g.spacing[2] * factors[2] as f64,
        ],
        origin: g.origin,
        direction: g.direction,
    };
    Volume::new(geom, voxels).expect("downsampled volume is valid")
}

/// Per-axis shrink factors for one pyramid level: powers of two, bounded so
/// no axis drops below 8 voxels.
fn level_factors(dims: [usize; 3], level: usize, levels: usize) -> [usize; 3] {
    let global = 1usize << (levels - 1 - level);
    let mut f = [1usize; 3];
    for a in 0..3 {
        let mut fa = global;
        while fa > 1 && dims[a] / fa < 8 {
            fa /= 2;
        }
        f[a] = fa.max(1);
    }
    f
}

fn dot(a: &[f64; AFFINE_PARAMS], b: &[f64; AFFINE_PARAMS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn optimize_level(
    metric: &MattesMetric,
    start: [f64; AFFINE_PARAMS],
    scales: &[f64; AFFINE_PARAMS],
    opts: &RegistrationOptions,
    level: usize,
    trace: &mut RegistrationTrace,
) -> Result<[f64; AFFINE_PARAMS]> {
    let mut q = [0.0; AFFINE_PARAMS];
    for i in 0..AFFINE_PARAMS {
        q[i] = start[i] * scales[i];
    }
    let theta_of = |q: &[f64; AFFINE_PARAMS]| {
        let mut th = [0.0; AFFINE_PARAMS];
        for i in 0..AFFINE_PARAMS {
            th[i] = q[i] / scales[i];
        }
        th
    };

    let mut step = opts.initial_step;
    let mut best_q = q;
    let mut best_mi = f64::NEG_INFINITY;
    let mut g_prev: Option<[f64; AFFINE_PARAMS]> = None;
    let mut reason = ConvergenceReason::MaxIterations;

    for iteration in 0..opts.max_iterations {
        let theta = theta_of(&q);
        let (mi, g_theta) = metric.value_and_gradient(&params_to_transform(&theta))?;
        trace.rows.push(TraceRow {
            level,
            iteration,
            step,
            metric: mi,
            params: theta,
        });
        if mi > best_mi {
            best_mi = mi;
            best_q = q;
        }

        let mut gq = [0.0; AFFINE_PARAMS];
        for i in 0..AFFINE_PARAMS {
            gq[i] = g_theta[i] / scales[i];
        }
        if let Some(gp) = &g_prev {
            if dot(&gq, gp) < 0.0 {
                step *= opts.relaxation_factor;
            }
        }
        if step < opts.min_step {
            reason = ConvergenceReason::MinStep;
            break;
        }
        let norm = dot(&gq, &gq).sqrt();
        if norm < 1e-300 {
            reason = ConvergenceReason::MinStep;
            break;
        }
        for i in 0..AFFINE_PARAMS {
            q[i] += step * gq[i] / norm; // ascent
        }
        g_prev = Some(gq);
    }
    trace.level_outcomes.push(reason);
    Ok(theta_of(&best_q))
}

/// Registers `moving` onto `fixed`, returning the transform that maps
/// fixed-space world points into moving space, plus the optimizer trace.
/// Deterministic given options and inputs.
pub fn register_affine(
    fixed: &Volume,
    moving: &Volume,
    opts: &RegistrationOptions,
) -> Result<(AffineTransform3D, RegistrationTrace)> {
    opts.validate()?;
    let radius = opts
        .linear_scale
        .unwrap_or_else(|| fixed.geometry().radius_mm());
    let mut scales = [1.0; AFFINE_PARAMS];
    for s in scales.iter_mut().skip(3) {
        *s = radius;
    }

    let mut params = transform_to_params(&AffineTransform3D::identity());
    let mut trace = RegistrationTrace::default();
    for level in 0..opts.pyramid_levels {
        let ff = level_factors(fixed.dims(), level, opts.pyramid_levels);
        let mf = level_factors(moving.dims(), level, opts.pyramid_levels);
        let fixed_l = if ff == [1, 1, 1] {
            fixed.clone()
        } else {
            smooth_and_downsample(fixed, ff)
        };
        let moving_l = if mf == [1, 1, 1] {
            moving.clone()
        } else {
            smooth_and_downsample(moving, mf)
        };
        let metric = MattesMetric::new(&fixed_l, &moving_l, opts)?;
        params = optimize_level(&metric, params, &scales, opts, level, &mut trace)
            .map_err(|e| match e {
                Error::InsufficientOverlap(m) => {
                    Error::Registration(format!("pyramid level {level}: insufficient overlap: {m}"))
                }
                other => other,
            })?;
    }
    Ok((params_to_transform(&params), trace))
}

/// Registers the pre-diagnosis ceT1w to the diagnosis ceT1w and applies the
/// single found transform to every pre-diagnosis sequence, resampling all of
/// them onto the diagnosis ceT1w grid with cubic B-spline interpolation.
pub fn align_case(
    case: &Case,
    opts: &RegistrationOptions,
) -> Result<(Case, AffineTransform3D, RegistrationTrace)> {
    let fixed = case
        .diagnosis
        .get(&SequenceKind::CeT1w)
        .ok_or_else(|| Error::Input(format!("case {}: diagnosis ceT1w missing", case.id)))?;
    let moving = case.prediag.get(&SequenceKind::CeT1w).ok_or_else(|| {
        Error::Input(format!(
            "case {}: pre-diagnosis ceT1w missing, cannot register time points",
            case.id
        ))
    })?;
    let (xform, trace) = register_affine(fixed, moving, opts)?;

    let mut aligned = SequenceSet::new();
    for (kind, vol) in &case.prediag {
        aligned.insert(
            *kind,
            resample(vol, fixed.geometry(), &xform, Interp::CubicBspline)?,
        );
    }
    let mut out = case.clone();
    out.prediag = aligned;
    Ok((out, xform, trace))
}
