//! 3D scalar volumes, masks and label maps with world-space geometry.
//!
//! A [`Volume`] couples a voxel buffer (x-fastest ordering) with the grid
//! geometry that places it in world space: spacing in mm/voxel, an origin in
//! mm and an orthonormal direction matrix. All pipeline stages exchange data
//! through these types; they are immutable after construction and safe to
//! share across threads.

mod io;
mod morph;
pub(crate) mod resample;

pub use io::{load_volume, save_volume, VolumeFormat};
pub use morph::{connected_components, dilate, Connectivity};
pub use resample::{regrid_inplane, resample, BsplineInterpolator, Interp};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub(crate) mod mat3 {
    pub type Mat3 = [[f64; 3]; 3];

    pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    pub fn mul_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        out
    }

    pub fn det(m: &Mat3) -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(m: &Mat3) -> Option<Mat3> {
        let d = det(m);
        if d.abs() < 1e-12 {
            return None;
        }
        let inv_d = 1.0 / d;
        let mut out = [[0.0; 3]; 3];
        out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_d;
        out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_d;
        out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_d;
        out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_d;
        out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_d;
        out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_d;
        out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_d;
        out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_d;
        out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_d;
        Some(out)
    }
}

/// Grid geometry shared by [`Volume`], [`BinaryMask`] and [`LabelMap`].
///
/// World position of voxel `(i, j, k)` is
/// `origin + direction * (spacing .* [i, j, k])`, with voxel `(0, 0, 0)`
/// centered on `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            origin,
            direction: mat3::IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!(
                "all dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!(
                "all spacing components must be positive, got {:?}",
                self.spacing
            )));
        }
        let d = mat3::det(&self.direction).abs();
        if (d - 1.0).abs() > 1e-6 {
            return Err(Error::Geometry(format!(
                "direction matrix must be orthonormal (|det| = 1), got |det| = {d}"
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index for voxel `(i, j, k)`, x-fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn index_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        let scaled = [
            idx[0] * self.spacing[0],
            idx[1] * self.spacing[1],
            idx[2] * self.spacing[2],
        ];
        let rotated = mat3::mul_vec(&self.direction, scaled);
        [
            rotated[0] + self.origin[0],
            rotated[1] + self.origin[1],
            rotated[2] + self.origin[2],
        ]
    }

    /// Continuous voxel index of a world point. The direction matrix is
    /// orthonormal, so its inverse is the transpose.
    #[inline]
    pub fn world_to_index(&self, world: [f64; 3]) -> [f64; 3] {
        let rel = [
            world[0] - self.origin[0],
            world[1] - self.origin[1],
            world[2] - self.origin[2],
        ];
        let unrot = [
            self.direction[0][0] * rel[0] + self.direction[1][0] * rel[1] + self.direction[2][0] * rel[2],
            self.direction[0][1] * rel[0] + self.direction[1][1] * rel[1] + self.direction[2][1] * rel[2],
            self.direction[0][2] * rel[0] + self.direction[1][2] * rel[1] + self.direction[2][2] * rel[2],
        ];
        [
            unrot[0] / self.spacing[0],
            unrot[1] / self.spacing[1],
            unrot[2] / self.spacing[2],
        ]
    }

    /// Physical radius: half the diagonal of the grid extent in mm.
    pub fn radius_mm(&self) -> f64 {
        let ext = [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ];
        0.5 * (ext[0] * ext[0] + ext[1] * ext[1] + ext[2] * ext[2]).sqrt()
    }

    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        if self.dims != other.dims {
            return false;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        (0..3).all(|i| close(self.spacing[i], other.spacing[i]))
            && (0..3).all(|i| close(self.origin[i], other.origin[i]))
            && (0..3).all(|i| (0..3).all(|j| close(self.direction[i][j], other.direction[i][j])))
    }
}

/// A 3D scalar image: grid geometry plus an intensity buffer in x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geom: Geometry,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, voxels: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if voxels.len() != geom.voxel_count() {
            return Err(Error::Geometry(format!(
                "buffer length {} does not match dims {:?} ({} voxels)",
                voxels.len(),
                geom.dims,
                geom.voxel_count()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "volume contains non-finite intensities".into(),
            ));
        }
        Ok(Self { geom, voxels })
    }

    pub fn zeros(geom: Geometry) -> Result<Self> {
        let n = geom.voxel_count();
        Self::new(geom, vec![0.0; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.geom.index(i, j, k)]
    }

    pub fn into_parts(self) -> (Geometry, Vec<f32>) {
        (self.geom, self.voxels)
    }

    pub fn mean_sd(&self) -> (f64, f64) {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .voxels
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }
}

/// A mask on a volume grid; voxels are strictly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geom: Geometry,
    voxels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(geom: Geometry, voxels: Vec<u8>) -> Result<Self> {
        geom.validate()?;
        if voxels.len() != geom.voxel_count() {
            return Err(Error::Geometry(format!(
                "mask buffer length {} does not match dims {:?}",
                voxels.len(),
                geom.dims
            )));
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(Self { geom, voxels })
    }

    pub fn zeros(geom: Geometry) -> Result<Self> {
        let n = geom.voxel_count();
        Self::new(geom, vec![0; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.voxels[self.geom.index(i, j, k)]
    }

    pub fn count_set(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    /// Lossless view as a float volume (0.0 / 1.0 intensities).
    pub fn to_volume(&self) -> Volume {
        Volume {
            geom: self.geom.clone(),
            voxels: self.voxels.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Reinterpret a volume as a mask; any value > 0.5 becomes 1.
    pub fn from_volume_thresholded(vol: &Volume, threshold: f32) -> Self {
        Self {
            geom: vol.geom.clone(),
            voxels: vol
                .voxels
                .iter()
                .map(|&v| if v > threshold { 1 } else { 0 })
                .collect(),
        }
    }
}

/// Connected-component labels on a mask grid: 0 is background, components
/// are labeled 1..=count in raster order of their first-encountered voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geom: Geometry,
    labels: Vec<u32>,
    count: u32,
}

impl LabelMap {
    pub(crate) fn from_raw(geom: Geometry, labels: Vec<u32>, count: u32) -> Self {
        Self {
            geom,
            labels,
            count,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Number of components K; labels run 1..=K.
    pub fn count(&self) -> u32 {
        self.count
    }

    /// Voxel count of every component, indexed by `label - 1`.
    pub fn component_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count as usize];
        for &l in &self.labels {
            if l > 0 {
                sizes[(l - 1) as usize] += 1;
            }
        }
        sizes
    }
}

/// Affine world-space transform mapping fixed-space points to moving-space
/// points: `y = linear * x + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform3D {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for AffineTransform3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform3D {
    pub fn identity() -> Self {
        Self {
            linear: mat3::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            linear: mat3::IDENTITY,
            translation: t,
        }
    }

    /// Rotation about the z axis by `degrees`, applied about world point `center`.
    pub fn rotation_z(degrees: f64, center: [f64; 3]) -> Self {
        let r = degrees.to_radians();
        let (s, c) = r.sin_cos();
        let linear = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        Self::about_center(linear, center)
    }

    /// Builds `y = L (x - center) + center + t`.
    pub fn about_center(linear: [[f64; 3]; 3], center: [f64; 3]) -> Self {
        let lc = mat3::mul_vec(&linear, center);
        Self {
            linear,
            translation: [center[0] - lc[0], center[1] - lc[1], center[2] - lc[2]],
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let lp = mat3::mul_vec(&self.linear, p);
        [
            lp[0] + self.translation[0],
            lp[1] + self.translation[1],
            lp[2] + self.translation[2],
        ]
    }

    pub fn is_invertible(&self) -> bool {
        mat3::det(&self.linear).abs() >= 1e-12
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = mat3::inverse(&self.linear).ok_or_else(|| {
            Error::Geometry("transform linear part is singular, cannot invert".into())
        })?;
        let it = mat3::mul_vec(&inv, self.translation);
        Ok(Self {
            linear: inv,
            translation: [-it[0], -it[1], -it[2]],
        })
    }

    /// Composition `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let linear = mat3::mul(&self.linear, &other.linear);
        let lt = mat3::mul_vec(&self.linear, other.translation);
        Self {
            linear,
            translation: [
                lt[0] + self.translation[0],
                lt[1] + self.translation[1],
                lt[2] + self.translation[2],
            ],
        }
    }

    /// Mean displacement in mm between this and `other` over the grid's voxel
    /// world points.
    pub fn mean_displacement_mm(&self, other: &Self, grid: &Geometry) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    let w = grid.index_to_world([i as f64, j as f64, k as f64]);
                    let a = self.apply(w);
                    let b = other.apply(w);
                    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                    sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    n += 1;
                }
            }
        }
        sum / n as f64
    }
}

/// Standardizes a volume to zero mean and unit (population) standard deviation.
pub fn zscore_normalize(vol: &Volume) -> Result<Volume> {
    let (mean, sd) = vol.mean_sd();
    if sd == 0.0 || !vol.voxels.iter().any(|&v| v != vol.voxels[0]) {
        return Err(Error::Degenerate(
            "constant volume cannot be z-score normalized".into(),
        ));
    }
    let voxels = vol
        .voxels
        .iter()
        .map(|&v| ((v as f64 - mean) / sd) as f32)
        .collect();
    Ok(Volume {
        geom: vol.geom.clone(),
        voxels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geom() -> Geometry {
        Geometry::new([4, 3, 2], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    }

    #[test]
    fn volume_rejects_wrong_buffer_length() {
        let err = Volume::new(small_geom(), vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn volume_rejects_nan() {
        let mut v = vec![0.0f32; 24];
        v[3] = f32::NAN;
        let err = Volume::new(small_geom(), v).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn geometry_rejects_nonorthonormal_direction() {
        let mut g = small_geom();
        g.direction[0][0] = 2.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn world_index_round_trip() {
        let mut g = Geometry::new([8, 8, 8], [0.5, 0.7, 2.0], [10.0, -4.0, 3.0]);
        let th = 0.3f64;
        g.direction = [
            [th.cos(), -th.sin(), 0.0],
            [th.sin(), th.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let idx = [3.25, 1.5, 6.75];
        let w = g.index_to_world(idx);
        let back = g.world_to_index(w);
        for d in 0..3 {
            assert!((back[d] - idx[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_two_values() {
        let g = small_geom();
        let v: Vec<f32> = (0..24).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }).collect();
        let z = zscore_normalize(&Volume::new(g, v).unwrap()).unwrap();
        for (i, &zv) in z.voxels().iter().enumerate() {
            let expect = if i % 2 == 0 { -1.0 } else { 1.0 };
            assert!((zv - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn zscore_three_values_population_sd() {
        let g = Geometry::new([3, 1, 1], [1.0; 3], [0.0; 3]);
        let z = zscore_normalize(&Volume::new(g, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let expect = [-1.224745, 0.0, 1.224745];
        for (zv, e) in z.voxels().iter().zip(expect) {
            assert!((*zv as f64 - e).abs() < 1e-4, "{zv} vs {e}");
        }
    }

    #[test]
    fn zscore_idempotent_on_normalized() {
        let g = Geometry::new([4, 4, 4], [1.0; 3], [0.0; 3]);
        let vals: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let z1 = zscore_normalize(&Volume::new(g, vals).unwrap()).unwrap();
        let z2 = zscore_normalize(&z1).unwrap();
        for (a, b) in z1.voxels().iter().zip(z2.voxels()) {
            assert!((a - b).abs() < 1e-5);
        }
        let (mean, sd) = z2.mean_sd();
        assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zscore_batch_mean_sd_property() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let g = Geometry::new([6, 5, 4], [1.0; 3], [0.0; 3]);
            let v: Vec<f32> = (0..g.voxel_count())
                .map(|_| rng.gen::<f32>() * 50.0 - 10.0)
                .collect();
            let z = zscore_normalize(&Volume::new(g, v).unwrap()).unwrap();
            let (mean, sd) = z.mean_sd();
            assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zscore_rejects_constant() {
        let g = small_geom();
        let err = zscore_normalize(&Volume::new(g, vec![3.0; 24]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn affine_inverse_round_trip() {
        let t = AffineTransform3D::rotation_z(17.0, [4.0, -2.0, 1.0]).compose(
            &AffineTransform3D::translation([3.0, -1.0, 0.5]),
        );
        let inv = t.inverse().unwrap();
        let p = [1.2, 3.4, -0.7];
        let back = inv.apply(t.apply(p));
        for d in 0..3 {
            assert!((back[d] - p[d]).abs() < 1e-10);
        }
    }
}
