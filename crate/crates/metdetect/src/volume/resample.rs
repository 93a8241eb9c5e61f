//! Geometric resampling: nearest, trilinear and cubic B-spline interpolation.
//!
//! The cubic interpolator prefilters the sample values into B-spline
//! coefficients (recursive causal/anticausal filtering, mirror boundaries)
//! so that the spline passes through the original samples exactly.

use super::{mat3, AffineTransform3D, Geometry, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interp {
    Nearest,
    Trilinear,
    CubicBspline,
}

/// Cubic B-spline kernel β³(t), support (-2, 2).
#[inline]
pub(crate) fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// First derivative of β³.
#[inline]
pub(crate) fn bspline3_deriv(t: f64) -> f64 {
    let a = t.abs();
    let s = if t < 0.0 { -1.0 } else { 1.0 };
    if a < 1.0 {
        s * (-2.0 * a + 1.5 * a * a)
    } else if a < 2.0 {
        let b = 2.0 - a;
        s * (-0.5 * b * b)
    } else {
        0.0
    }
}

/// Mirror an index into [0, n-1] (whole-sample symmetric boundary).
#[inline]
fn mirror(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n {
        m = period - m;
    }
    m as usize
}

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// In-place cubic B-spline prefilter along one line of samples.
fn prefilter_line(line: &mut [f64]) {
    let n = line.len();
    if n == 1 {
        return;
    }
    let z = POLE;
    let lambda = 6.0;
    for v in line.iter_mut() {
        *v *= lambda;
    }
    // causal initialization over the mirrored signal: truncate the geometric
    // sum for long lines, use the exact full-period form for short ones
    let horizon = ((-30.0f64) / z.abs().ln()).ceil() as usize; // ~1e-13 accuracy
    let sum = if horizon < n {
        let mut sum = line[0];
        let mut zn = 1.0;
        for item in line.iter().take(horizon).skip(1) {
            zn *= z;
            sum += zn * item;
        }
        sum
    } else {
        let period = 2 * (n - 1);
        let mut sum = 0.0;
        let mut zn = 1.0;
        for k in 0..period {
            sum += zn * line[mirror(k as i64, n as i64)];
            zn *= z;
        }
        sum / (1.0 - z.powi(period as i32))
    };
    line[0] = sum;
    for k in 1..n {
        line[k] += z * line[k - 1];
    }
    // anticausal
    line[n - 1] = (z / (z * z - 1.0)) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

/// Prefiltered cubic B-spline interpolator over a volume.
///
/// Evaluation reproduces the original samples at grid points and is C²
/// between them, which keeps similarity metrics differentiable.
pub struct BsplineInterpolator {
    dims: [usize; 3],
    coeffs: Vec<f64>,
}

impl BsplineInterpolator {
    pub fn new(vol: &Volume) -> Self {
        let dims = vol.dims();
        let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
        let mut coeffs: Vec<f64> = vol.voxels().iter().map(|&v| v as f64).collect();

        // filter along x
        let mut line = vec![0.0; nx.max(ny).max(nz)];
        for k in 0..nz {
            for j in 0..ny {
                let base = nx * (j + ny * k);
                line[..nx].copy_from_slice(&coeffs[base..base + nx]);
                prefilter_line(&mut line[..nx]);
                coeffs[base..base + nx].copy_from_slice(&line[..nx]);
            }
        }
        // along y
        for k in 0..nz {
            for i in 0..nx {
                for j in 0..ny {
                    line[j] = coeffs[i + nx * (j + ny * k)];
                }
                prefilter_line(&mut line[..ny]);
                for j in 0..ny {
                    coeffs[i + nx * (j + ny * k)] = line[j];
                }
            }
        }
        // along z
        for j in 0..ny {
            for i in 0..nx {
                for k in 0..nz {
                    line[k] = coeffs[i + nx * (j + ny * k)];
                }
                prefilter_line(&mut line[..nz]);
                for k in 0..nz {
                    coeffs[i + nx * (j + ny * k)] = line[k];
                }
            }
        }
        Self { dims, coeffs }
    }

    #[inline]
    pub fn in_bounds(&self, idx: [f64; 3]) -> bool {
        (0..3).all(|d| idx[d] >= 0.0 && idx[d] <= (self.dims[d] - 1) as f64)
    }

    /// Spline value at a continuous index (caller checks bounds).
    pub fn value(&self, idx: [f64; 3]) -> f64 {
        self.eval(idx, false).0
    }

    /// Spline value and gradient in index units.
    pub fn value_and_gradient(&self, idx: [f64; 3]) -> (f64, [f64; 3]) {
        self.eval(idx, true)
    }

    fn eval(&self, idx: [f64; 3], with_grad: bool) -> (f64, [f64; 3]) {
        let [nx, ny, nz] = self.dims;
        let mut wx = [0.0; 4];
        let mut wy = [0.0; 4];
        let mut wz = [0.0; 4];
        let mut dwx = [0.0; 4];
        let mut dwy = [0.0; 4];
        let mut dwz = [0.0; 4];
        let mut ix = [0usize; 4];
        let mut iy = [0usize; 4];
        let mut iz = [0usize; 4];

        let setup = |x: f64,
                     n: usize,
                     w: &mut [f64; 4],
                     dw: &mut [f64; 4],
                     ind: &mut [usize; 4]| {
            let base = x.floor() as i64 - 1;
            for (t, wi) in w.iter_mut().enumerate() {
                let pos = base + t as i64;
                *wi = bspline3(x - pos as f64);
                dw[t] = bspline3_deriv(x - pos as f64);
                ind[t] = mirror(pos, n as i64);
            }
        };
        setup(idx[0], nx, &mut wx, &mut dwx, &mut ix);
        setup(idx[1], ny, &mut wy, &mut dwy, &mut iy);
        setup(idx[2], nz, &mut wz, &mut dwz, &mut iz);

        let mut val = 0.0;
        let mut grad = [0.0; 3];
        for c in 0..4 {
            let zk = iz[c] * ny;
            for b in 0..4 {
                let row = (zk + iy[b]) * nx;
                let wyz = wy[b] * wz[c];
                let mut s = 0.0;
                let mut sx = 0.0;
                for a in 0..4 {
                    let v = self.coeffs[row + ix[a]];
                    s += wx[a] * v;
                    sx += dwx[a] * v;
                }
                val += s * wyz;
                if with_grad {
                    grad[0] += sx * wyz;
                    grad[1] += s * dwy[b] * wz[c];
                    grad[2] += s * wy[b] * dwz[c];
                }
            }
        }
        (val, grad)
    }
}

#[inline]
fn sample_nearest(vol: &Volume, idx: [f64; 3]) -> Option<f32> {
    let d = vol.dims();
    let mut c = [0usize; 3];
    for a in 0..3 {
        let r = idx[a].round();
        if r < 0.0 || r > (d[a] - 1) as f64 {
            return None;
        }
        c[a] = r as usize;
    }
    Some(vol.get(c[0], c[1], c[2]))
}

#[inline]
fn sample_trilinear(vol: &Volume, idx: [f64; 3]) -> Option<f32> {
    let d = vol.dims();
    for a in 0..3 {
        if idx[a] < 0.0 || idx[a] > (d[a] - 1) as f64 {
            return None;
        }
    }
    let fx = idx[0].floor();
    let fy = idx[1].floor();
    let fz = idx[2].floor();
    let i0 = fx as usize;
    let j0 = fy as usize;
    let k0 = fz as usize;
    let i1 = (i0 + 1).min(d[0] - 1);
    let j1 = (j0 + 1).min(d[1] - 1);
    let k1 = (k0 + 1).min(d[2] - 1);
    let tx = (idx[0] - fx) as f32;
    let ty = (idx[1] - fy) as f32;
    let tz = (idx[2] - fz) as f32;

    let c000 = vol.get(i0, j0, k0);
    let c100 = vol.get(i1, j0, k0);
    let c010 = vol.get(i0, j1, k0);
    let c110 = vol.get(i1, j1, k0);
    let c001 = vol.get(i0, j0, k1);
    let c101 = vol.get(i1, j0, k1);
    let c011 = vol.get(i0, j1, k1);
    let c111 = vol.get(i1, j1, k1);

    let c00 = c000 + (c100 - c000) * tx;
    let c10 = c010 + (c110 - c010) * tx;
    let c01 = c001 + (c101 - c001) * tx;
    let c11 = c011 + (c111 - c011) * tx;
    let c0 = c00 + (c10 - c00) * ty;
    let c1 = c01 + (c11 - c01) * ty;
    Some(c0 + (c1 - c0) * tz)
}

/// Resamples `vol` onto `target` geometry through an affine transform that
/// maps target-space world points into `vol`'s world space. Out-of-bounds
/// points fill with 0.
pub fn resample(
    vol: &Volume,
    target: &Geometry,
    xform: &AffineTransform3D,
    interp: Interp,
) -> Result<Volume> {
    resample_impl(vol, target, xform, interp, false)
}

fn resample_impl(
    vol: &Volume,
    target: &Geometry,
    xform: &AffineTransform3D,
    interp: Interp,
    clamp_border: bool,
) -> Result<Volume> {
    target.validate()?;
    if !xform.is_invertible() {
        return Err(Error::Geometry(
            "resampling transform is singular".into(),
        ));
    }
    if vol.voxels().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("volume contains non-finite values".into()));
    }

    let bspline = match interp {
        Interp::CubicBspline => Some(BsplineInterpolator::new(vol)),
        _ => None,
    };

    let [nx, ny, nz] = target.dims;
    let sd = vol.dims();
    let mut out = vec![0.0f32; target.voxel_count()];

    let src = vol.geometry();
    let mut o = 0usize;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let w = target.index_to_world([i as f64, j as f64, k as f64]);
                let m = xform.apply(w);
                let mut idx = src.world_to_index(m);
                if clamp_border {
                    for a in 0..3 {
                        idx[a] = idx[a].clamp(0.0, (sd[a] - 1) as f64);
                    }
                }
                let v = match interp {
                    Interp::Nearest => sample_nearest(vol, idx),
                    Interp::Trilinear => sample_trilinear(vol, idx),
                    Interp::CubicBspline => {
                        let b = bspline.as_ref().unwrap();
                        if b.in_bounds(idx) {
                            Some(b.value(idx) as f32)
                        } else {
                            None
                        }
                    }
                };
                out[o] = v.unwrap_or(0.0);
                o += 1;
            }
        }
    }
    Volume::new(target.clone(), out)
}

/// Regrids to an isotropic in-plane resolution, preserving the physical
/// field of view and the through-plane grid.
pub fn regrid_inplane(vol: &Volume, target_inplane_mm: f64) -> Result<Volume> {
    if !(target_inplane_mm > 0.0) {
        return Err(Error::Parameter(format!(
            "target in-plane spacing must be positive, got {target_inplane_mm}"
        )));
    }
    let g = vol.geometry();
    if g.dims[0] < 2 || g.dims[1] < 2 {
        return Err(Error::Geometry(
            "in-plane dims must be at least 2 for regridding".into(),
        ));
    }
    let t = target_inplane_mm;
    let new_nx = ((g.dims[0] as f64 * g.spacing[0]) / t).round().max(1.0) as usize;
    let new_ny = ((g.dims[1] as f64 * g.spacing[1]) / t).round().max(1.0) as usize;

    // Keep the voxel-edge field of view: first new center sits at
    // (t - s) / 2 along each in-plane axis, in that axis's direction.
    let shift = [(t - g.spacing[0]) / 2.0, (t - g.spacing[1]) / 2.0];
    let delta = mat3::mul_vec(&g.direction, [shift[0], shift[1], 0.0]);
    let target = Geometry {
        dims: [new_nx, new_ny, g.dims[2]],
        spacing: [t, t, g.spacing[2]],
        origin: [
            g.origin[0] + delta[0],
            g.origin[1] + delta[1],
            g.origin[2] + delta[2],
        ],
        direction: g.direction,
    };
    // Border samples sit half a voxel outside the center hull under the
    // edge-preserving field of view; clamp instead of zero-filling there.
    resample_impl(
        vol,
        &target,
        &AffineTransform3D::identity(),
        Interp::Trilinear,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn ramp_volume() -> Volume {
        // values 0,2,4 along x
        let g = Geometry::new([3, 1, 1], [1.0; 3], [0.0; 3]);
        Volume::new(g, vec![0.0, 2.0, 4.0]).unwrap()
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::new(dims, [1.0; 3], [0.0; 3]);
        let v: Vec<f32> = (0..g.voxel_count()).map(|_| rng.gen::<f32>()).collect();
        Volume::new(g, v).unwrap()
    }

    #[test]
    fn identity_resample_is_identity() {
        let vol = random_volume([6, 5, 4], 1);
        for interp in [Interp::Nearest, Interp::Trilinear] {
            let out = resample(
                &vol,
                vol.geometry(),
                &AffineTransform3D::identity(),
                interp,
            )
            .unwrap();
            assert_eq!(out.voxels(), vol.voxels(), "{interp:?}");
        }
        let out = resample(
            &vol,
            vol.geometry(),
            &AffineTransform3D::identity(),
            Interp::CubicBspline,
        )
        .unwrap();
        for (a, b) in out.voxels().iter().zip(vol.voxels()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn integer_shift_lands_on_grid() {
        let g = Geometry::new([4, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]);
        let vol = Volume::new(g.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // shift of exactly one voxel (2 mm) along x
        let xform = AffineTransform3D::translation([2.0, 0.0, 0.0]);
        let out = resample(&vol, &g, &xform, Interp::Trilinear).unwrap();
        assert_eq!(out.voxels(), &[2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn half_voxel_shift_interpolates_ramp() {
        let vol = ramp_volume();
        let xform = AffineTransform3D::translation([0.5, 0.0, 0.0]);
        let out = resample(&vol, vol.geometry(), &xform, Interp::Trilinear).unwrap();
        assert!((out.voxels()[0] - 1.0).abs() < 1e-6);
        assert!((out.voxels()[1] - 3.0).abs() < 1e-6);
        assert_eq!(out.voxels()[2], 0.0); // sampled past the last column
    }

    #[test]
    fn singular_transform_rejected() {
        let vol = ramp_volume();
        let mut xform = AffineTransform3D::identity();
        xform.linear[0][0] = 0.0;
        let err = resample(&vol, vol.geometry(), &xform, Interp::Trilinear).unwrap_err();
        assert!(matches!(err, crate::error::Error::Geometry(_)));
    }

    #[test]
    fn bspline_reproduces_samples() {
        let vol = random_volume([9, 7, 5], 42);
        let interp = BsplineInterpolator::new(&vol);
        for k in 0..5 {
            for j in 0..7 {
                for i in 0..9 {
                    let v = interp.value([i as f64, j as f64, k as f64]);
                    assert!(
                        (v - vol.get(i, j, k) as f64).abs() < 1e-6,
                        "mismatch at {i},{j},{k}"
                    );
                }
            }
        }
    }

    #[test]
    fn bspline_gradient_matches_finite_differences() {
        let vol = random_volume([10, 9, 8], 7);
        let interp = BsplineInterpolator::new(&vol);
        let pts = [[4.3, 3.7, 2.9], [2.1, 5.5, 4.2], [6.9, 2.2, 3.3]];
        let h = 1e-5;
        for p in pts {
            let (_, g) = interp.value_and_gradient(p);
            for d in 0..3 {
                let mut lo = p;
                let mut hi = p;
                lo[d] -= h;
                hi[d] += h;
                let fd = (interp.value(hi) - interp.value(lo)) / (2.0 * h);
                assert!((fd - g[d]).abs() < 1e-5, "axis {d}: {fd} vs {}", g[d]);
            }
        }
    }

    #[test]
    fn regrid_preserves_value_when_already_at_target() {
        let vol = random_volume([10, 10, 3], 3);
        let out = regrid_inplane(&vol, 1.0).unwrap();
        assert_eq!(out.dims(), vol.dims());
        for (a, b) in out.voxels().iter().zip(vol.voxels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn regrid_factor_two() {
        let g = Geometry::new([10, 10, 2], [1.0, 1.0, 3.0], [5.0, -2.0, 0.0]);
        let v: Vec<f32> = (0..200).map(|i| i as f32).collect();
        let vol = Volume::new(g, v).unwrap();
        let out = regrid_inplane(&vol, 0.5).unwrap();
        assert_eq!(out.dims(), [20, 20, 2]);
        // physical extent preserved
        let e_in = 10.0f64 * 1.0;
        let e_out = 20.0f64 * 0.5;
        assert!((e_in - e_out).abs() < 1e-12);
    }

    #[test]
    fn regrid_constant_stays_constant() {
        let g = Geometry::new([7, 9, 2], [1.3, 0.8, 2.0], [0.0; 3]);
        let vol = Volume::new(g, vec![5.5; 126]).unwrap();
        let out = regrid_inplane(&vol, 0.5).unwrap();
        for &v in out.voxels() {
            assert!((v - 5.5).abs() < 1e-5);
        }
    }

    #[test]
    fn regrid_rejects_degenerate() {
        let g = Geometry::new([1, 10, 2], [1.0; 3], [0.0; 3]);
        let vol = Volume::new(g, vec![0.0; 20]).unwrap();
        assert!(regrid_inplane(&vol, 0.5).is_err());
        let g2 = Geometry::new([10, 10, 2], [1.0; 3], [0.0; 3]);
        let vol2 = Volume::new(g2, vec![0.0; 200]).unwrap();
        assert!(regrid_inplane(&vol2, -1.0).is_err());
    }
}
