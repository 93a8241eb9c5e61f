//! Mattes mutual information between a fixed and a moving volume.
//!
//! The joint intensity histogram uses zero-order (box) windowing on the
//! fixed axis and, by default, cubic B-spline Parzen windowing on the moving
//! axis. Moving intensities are read through a prefiltered cubic B-spline
//! interpolator, so the metric is smooth in the transform parameters and its
//! gradient can be accumulated analytically alongside the histogram.
//!
//! MI = sum_{f,m} p(f,m) ln( p(f,m) / (p(f) p(m)) ), in nats.

use crate::error::{Error, Result};
use crate::volume::resample::{bspline3, bspline3_deriv};
use crate::volume::{mat3, AffineTransform3D, BsplineInterpolator, Geometry, Volume};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParzenWindow, RegistrationOptions};

/// Number of affine parameters: 3 translations then the 9 linear entries in
/// row-major order.
pub const AFFINE_PARAMS: usize = 12;

pub fn transform_to_params(t: &AffineTransform3D) -> [f64; AFFINE_PARAMS] {
    let mut p = [0.0; AFFINE_PARAMS];
    p[..3].copy_from_slice(&t.translation);
    for r in 0..3 {
        for c in 0..3 {
            p[3 + 3 * r + c] = t.linear[r][c];
        }
    }
    p
}

pub fn params_to_transform(p: &[f64; AFFINE_PARAMS]) -> AffineTransform3D {
    let mut linear = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            linear[r][c] = p[3 + 3 * r + c];
        }
    }
    AffineTransform3D {
        linear,
        translation: [p[0], p[1], p[2]],
    }
}

struct FixedSample {
    world: [f64; 3],
    fixed_bin: u16,
    /// Per-sample offset of the moving-axis bin coordinate, in bin units.
    /// Randomizing the phase between intensities and bin centers keeps the
    /// Parzen discretization loss independent of the transform.
    bin_dither: f64,
}

/// Precomputed state for repeated metric evaluations against one
/// fixed/moving pair (one pyramid level).
pub struct MattesMetric {
    bins: usize,
    window: ParzenWindow,
    samples: Vec<FixedSample>,
    moving: BsplineInterpolator,
    moving_geom: Geometry,
    moving_min: f64,
    moving_binw: f64,
    fixed_constant: bool,
    moving_constant: bool,
    /// world gradient = direction * (index gradient / spacing)
    moving_dir: [[f64; 3]; 3],
    moving_inv_spacing: [f64; 3],
}

impl MattesMetric {
    pub fn new(fixed: &Volume, moving: &Volume, opts: &RegistrationOptions) -> Result<Self> {
        opts.validate()?;
        let bins = opts.histogram_bins;

        // choose fixed samples (raster order; seeded subset if requested)
        let n = fixed.voxels().len();
        let indices: Vec<usize> = if opts.sample_fraction < 1.0 {
            let take = ((n as f64 * opts.sample_fraction) as usize).max(2);
            let mut all: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
            all.partial_shuffle(&mut rng, take);
            let mut sel = all[..take].to_vec();
            sel.sort_unstable();
            sel
        } else {
            (0..n).collect()
        };

        // Sub-voxel jitter keeps sample positions off the moving grid at
        // every transform, which suppresses the spurious interpolation
        // maxima an aligned-grid histogram develops. The jittered fixed
        // intensities are read through a spline interpolator once.
        let jitter = opts.sample_jitter;
        let fixed_interp = if jitter > 0.0 {
            Some(BsplineInterpolator::new(fixed))
        } else {
            None
        };
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(opts.sample_seed.wrapping_add(0x9e37));

        let fg = fixed.geometry();
        let [nx, ny, nz] = fg.dims;
        let mut positions = Vec::with_capacity(indices.len());
        let mut values = Vec::with_capacity(indices.len());
        for &i in &indices {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            let mut idx = [x as f64, y as f64, z as f64];
            let v = if let Some(interp) = &fixed_interp {
                use rand::Rng;
                for (a, n) in idx.iter_mut().zip([nx, ny, nz]) {
                    *a = (*a + jitter * (jitter_rng.gen::<f64>() - 0.5))
                        .clamp(0.0, (n - 1) as f64);
                }
                interp.value(idx)
            } else {
                fixed.voxels()[i] as f64
            };
            positions.push(idx);
            values.push(v);
        }

        let mut f_min = f64::INFINITY;
        let mut f_max = f64::NEG_INFINITY;
        for &v in &values {
            f_min = f_min.min(v);
            f_max = f_max.max(v);
        }
        let fixed_constant = !(f_max > f_min);
        let f_binw = if fixed_constant {
            1.0
        } else {
            (f_max - f_min) / bins as f64
        };

        let mut dither_rng = ChaCha8Rng::seed_from_u64(opts.sample_seed.wrapping_add(0x79b9));
        let samples: Vec<FixedSample> = positions
            .iter()
            .zip(&values)
            .map(|(idx, &v)| {
                use rand::Rng;
                let world = fg.index_to_world(*idx);
                let fb = if fixed_constant {
                    0
                } else {
                    (((v - f_min) / f_binw) as usize).min(bins - 1) as u16
                };
                let bin_dither = if jitter > 0.0 {
                    dither_rng.gen::<f64>() - 0.5
                } else {
                    0.0
                };
                FixedSample {
                    world,
                    fixed_bin: fb,
                    bin_dither,
                }
            })
            .collect();

        // moving intensity range over the whole moving volume, so the
        // binning does not depend on the transform
        let mut m_min = f64::INFINITY;
        let mut m_max = f64::NEG_INFINITY;
        for &v in moving.voxels() {
            m_min = m_min.min(v as f64);
            m_max = m_max.max(v as f64);
        }
        let moving_constant = !(m_max > m_min);
        let moving_binw = if moving_constant {
            1.0
        } else {
            (m_max - m_min) / bins as f64
        };

        let mg = moving.geometry().clone();
        Ok(Self {
            bins,
            window: opts.moving_window,
            samples,
            moving: BsplineInterpolator::new(moving),
            moving_inv_spacing: [
                1.0 / mg.spacing[0],
                1.0 / mg.spacing[1],
                1.0 / mg.spacing[2],
            ],
            moving_dir: mg.direction,
            moving_geom: mg,
            moving_min: m_min,
            moving_binw,
            fixed_constant,
            moving_constant,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Metric value only.
    pub fn value(&self, xform: &AffineTransform3D) -> Result<f64> {
        self.evaluate(xform, false).map(|(v, _)| v)
    }

    /// Metric value and analytic gradient with respect to the 12 affine
    /// parameters (translations, then row-major linear entries).
    pub fn value_and_gradient(
        &self,
        xform: &AffineTransform3D,
    ) -> Result<(f64, [f64; AFFINE_PARAMS])> {
        self.evaluate(xform, true)
    }

    fn evaluate(
        &self,
        xform: &AffineTransform3D,
        with_grad: bool,
    ) -> Result<(f64, [f64; AFFINE_PARAMS])> {
        if !xform.is_invertible() {
            return Err(Error::Geometry(
                "registration transform is singular".into(),
            ));
        }
        if self.fixed_constant || self.moving_constant {
            // degenerate marginal: MI is defined to be 0
            return Ok((0.0, [0.0; AFFINE_PARAMS]));
        }
        let bins = self.bins;
        let mut joint = vec![0.0f64; bins * bins];

        struct Cached {
            fixed_bin: u16,
            u: f64,
            grad_over_binw: [f64; 3],
            world: [f64; 3],
        }
        let mut cache: Vec<Cached> = Vec::new();
        if with_grad {
            cache.reserve(self.samples.len());
        }

        let mut in_count = 0usize;
        for s in &self.samples {
            let y = xform.apply(s.world);
            let idx = self.moving_geom.world_to_index(y);
            if !self.moving.in_bounds(idx) {
                continue;
            }
            in_count += 1;
            let f = s.fixed_bin as usize;
            match self.window {
                ParzenWindow::Box => {
                    let v = self.moving.value(idx);
                    let m = (((v - self.moving_min) / self.moving_binw) as usize).min(bins - 1);
                    joint[f * bins + m] += 1.0;
                }
                ParzenWindow::CubicBspline => {
                    let (v, gidx) = if with_grad {
                        self.moving.value_and_gradient(idx)
                    } else {
                        (self.moving.value(idx), [0.0; 3])
                    };
                    // continuous bin coordinate relative to bin centers
                    let u = (v - self.moving_min) / self.moving_binw - 0.5 + s.bin_dither;
                    let base = u.floor() as i64 - 1;
                    for t in 0..4 {
                        let m = base + t;
                        let w = bspline3(u - m as f64);
                        if w == 0.0 {
                            continue;
                        }
                        let mc = m.clamp(0, bins as i64 - 1) as usize;
                        joint[f * bins + mc] += w;
                    }
                    if with_grad {
                        // world gradient of the moving intensity, pre-divided
                        // by the moving bin width
                        let gi = [
                            gidx[0] * self.moving_inv_spacing[0],
                            gidx[1] * self.moving_inv_spacing[1],
                            gidx[2] * self.moving_inv_spacing[2],
                        ];
                        let gw = mat3::mul_vec(&self.moving_dir, gi);
                        cache.push(Cached {
                            fixed_bin: s.fixed_bin,
                            u,
                            grad_over_binw: [
                                gw[0] / self.moving_binw,
                                gw[1] / self.moving_binw,
                                gw[2] / self.moving_binw,
                            ],
                            world: s.world,
                        });
                    }
                }
            }
        }
        if in_count < 2 {
            return Err(Error::InsufficientOverlap(format!(
                "only {in_count} fixed samples map inside the moving volume"
            )));
        }

        let norm = 1.0 / in_count as f64;
        for p in joint.iter_mut() {
            *p *= norm;
        }
        let mut pf = vec![0.0f64; bins];
        let mut pm = vec![0.0f64; bins];
        for f in 0..bins {
            for m in 0..bins {
                let p = joint[f * bins + m];
                pf[f] += p;
                pm[m] += p;
            }
        }
        let mut mi = 0.0;
        for f in 0..bins {
            if pf[f] <= 0.0 {
                continue;
            }
            for m in 0..bins {
                let p = joint[f * bins + m];
                if p > 0.0 && pm[m] > 0.0 {
                    mi += p * (p / (pf[f] * pm[m])).ln();
                }
            }
        }

        let mut grad = [0.0; AFFINE_PARAMS];
        if with_grad && self.window == ParzenWindow::CubicBspline {
            // dMI/dtheta = sum_{f,m} dp/dtheta * ln(p(f,m)/p_m(m))
            let mut lnfac = vec![0.0f64; bins * bins];
            for f in 0..bins {
                for m in 0..bins {
                    let p = joint[f * bins + m];
                    if p > 0.0 && pm[m] > 0.0 {
                        lnfac[f * bins + m] = (p / pm[m]).ln();
                    }
                }
            }
            for c in &cache {
                let f = c.fixed_bin as usize;
                let base = c.u.floor() as i64 - 1;
                // du/dtheta_j = grad_over_binw . dy/dtheta_j
                for t in 0..4 {
                    let m = base + t;
                    let dw = bspline3_deriv(c.u - m as f64);
                    if dw == 0.0 {
                        continue;
                    }
                    let mc = m.clamp(0, bins as i64 - 1) as usize;
                    let factor = dw * norm * lnfac[f * bins + mc];
                    if factor == 0.0 {
                        continue;
                    }
                    for a in 0..3 {
                        let ga = factor * c.grad_over_binw[a];
                        grad[a] += ga; // translation t_a
                        grad[3 + 3 * a] += ga * c.world[0]; // L_{a,0}
                        grad[3 + 3 * a + 1] += ga * c.world[1]; // L_{a,1}
                        grad[3 + 3 * a + 2] += ga * c.world[2]; // L_{a,2}
                    }
                }
            }
        }
        Ok((mi, grad))
    }
}

/// One-shot Mattes mutual information between two volumes under a transform.
pub fn mattes_mi(
    fixed: &Volume,
    moving: &Volume,
    xform: &AffineTransform3D,
    opts: &RegistrationOptions,
) -> Result<f64> {
    MattesMetric::new(fixed, moving, opts)?.value(xform)
}
