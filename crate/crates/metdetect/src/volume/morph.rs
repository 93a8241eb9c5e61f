//! Binary morphology and connected-component labeling.
//!
//! Dilation uses an exact squared Euclidean distance transform
//! (separable lower-envelope algorithm), so `dilate(m, r)` sets exactly the
//! voxels whose Euclidean distance to the nearest set voxel is <= r, measured
//! in voxel units.

use super::{BinaryMask, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Faces, edges and corners.
    TwentySix,
}

const INF: f64 = 1e18;

/// 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    // replace the lone parabola
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Squared Euclidean distance (in voxel units) from each voxel to the nearest
/// set voxel of the mask. Unreachable (empty mask) stays at a large sentinel.
pub(crate) fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let [nx, ny, nz] = mask.dims();
    let mut dist: Vec<f64> = mask
        .voxels()
        .iter()
        .map(|&v| if v == 1 { 0.0 } else { INF })
        .collect();

    let max_n = nx.max(ny).max(nz);
    let mut f = vec![0.0; max_n];
    let mut d = vec![0.0; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0.0; max_n + 1];

    // x pass
    for k in 0..nz {
        for j in 0..ny {
            let base = nx * (j + ny * k);
            f[..nx].copy_from_slice(&dist[base..base + nx]);
            edt_1d(&f[..nx], &mut d[..nx], &mut v[..nx], &mut z[..nx + 1]);
            dist[base..base + nx].copy_from_slice(&d[..nx]);
        }
    }
    // y pass
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                f[j] = dist[i + nx * (j + ny * k)];
            }
            edt_1d(&f[..ny], &mut d[..ny], &mut v[..ny], &mut z[..ny + 1]);
            for j in 0..ny {
                dist[i + nx * (j + ny * k)] = d[j];
            }
        }
    }
    // z pass
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                f[k] = dist[i + nx * (j + ny * k)];
            }
            edt_1d(&f[..nz], &mut d[..nz], &mut v[..nz], &mut z[..nz + 1]);
            for k in 0..nz {
                dist[i + nx * (j + ny * k)] = d[k];
            }
        }
    }
    dist
}

/// Dilates by a Euclidean ball of `radius_voxels` (voxel units): output voxel
/// is 1 iff some input voxel lies within distance <= radius. Monotone and
/// extensive by construction.
pub fn dilate(mask: &BinaryMask, radius_voxels: f64) -> Result<BinaryMask> {
    if !(radius_voxels > 0.0) {
        return Err(Error::Parameter(format!(
            "dilation radius must be positive, got {radius_voxels}"
        )));
    }
    if mask.is_empty() {
        return Ok(mask.clone());
    }
    let r2 = radius_voxels * radius_voxels;
    let dist = squared_distance_transform(mask);
    let voxels = dist.iter().map(|&d| if d <= r2 { 1u8 } else { 0 }).collect();
    BinaryMask::new(mask.geometry().clone(), voxels)
}

fn neighbor_offsets(connectivity: Connectivity) -> Vec<[i64; 3]> {
    let mut offs = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                match connectivity {
                    Connectivity::Six if manhattan == 1 => offs.push([dx, dy, dz]),
                    Connectivity::TwentySix => offs.push([dx, dy, dz]),
                    _ => {}
                }
            }
        }
    }
    offs
}

/// Labels connected components. Labels are assigned in raster order of each
/// component's first-encountered voxel, so the result is deterministic.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> LabelMap {
    let [nx, ny, nz] = mask.dims();
    let offs = neighbor_offsets(connectivity);
    let mut labels = vec![0u32; mask.voxels().len()];
    let mut count = 0u32;
    let mut queue: Vec<usize> = Vec::new();

    for start in 0..mask.voxels().len() {
        if mask.voxels()[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.clear();
        queue.push(start);
        while let Some(cur) = queue.pop() {
            let i = (cur % nx) as i64;
            let j = ((cur / nx) % ny) as i64;
            let k = (cur / (nx * ny)) as i64;
            for off in &offs {
                let (ni, nj, nk) = (i + off[0], j + off[1], k + off[2]);
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni >= nx || nj >= ny || nk >= nz {
                    continue;
                }
                let nidx = ni + nx * (nj + ny * nk);
                if mask.voxels()[nidx] == 1 && labels[nidx] == 0 {
                    labels[nidx] = count;
                    queue.push(nidx);
                }
            }
        }
    }
    LabelMap::from_raw(mask.geometry().clone(), labels, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn mask_with(dims: [usize; 3], set: &[[usize; 3]]) -> BinaryMask {
        let g = Geometry::new(dims, [1.0; 3], [0.0; 3]);
        let mut v = vec![0u8; g.voxel_count()];
        for s in set {
            v[g.index(s[0], s[1], s[2])] = 1;
        }
        BinaryMask::new(g, v).unwrap()
    }

    #[test]
    fn dilate_radius_one_is_face_neighborhood() {
        let m = mask_with([5, 5, 5], &[[2, 2, 2]]);
        let d = dilate(&m, 1.0).unwrap();
        assert_eq!(d.count_set(), 7);
        assert_eq!(d.get(2, 2, 2), 1);
        assert_eq!(d.get(1, 2, 2), 1);
        assert_eq!(d.get(3, 2, 2), 1);
        assert_eq!(d.get(2, 1, 2), 1);
        assert_eq!(d.get(2, 3, 2), 1);
        assert_eq!(d.get(2, 2, 1), 1);
        assert_eq!(d.get(2, 2, 3), 1);
        // diagonal at sqrt(2) excluded
        assert_eq!(d.get(1, 1, 2), 0);
    }

    #[test]
    fn dilate_empty_stays_empty() {
        let m = mask_with([4, 4, 4], &[]);
        let d = dilate(&m, 3.0).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn dilate_rejects_nonpositive_radius() {
        let m = mask_with([4, 4, 4], &[[0, 0, 0]]);
        assert!(dilate(&m, 0.0).is_err());
        assert!(dilate(&m, -1.0).is_err());
    }

    #[test]
    fn dilation_fuses_voxels_ten_apart_with_radius_six() {
        let m = mask_with([16, 3, 3], &[[2, 1, 1], [12, 1, 1]]);
        let d = dilate(&m, 6.0).unwrap();
        let cc = connected_components(&d, Connectivity::TwentySix);
        assert_eq!(cc.count(), 1);
    }

    #[test]
    fn components_corner_connectivity() {
        let m = mask_with([4, 4, 4], &[[1, 1, 1], [2, 2, 2]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 2);
    }

    #[test]
    fn components_empty_mask() {
        let m = mask_with([4, 4, 4], &[]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 0);
    }

    #[test]
    fn component_labels_are_raster_ordered_and_sizes_sum() {
        let m = mask_with(
            [6, 6, 1],
            &[[4, 0, 0], [0, 2, 0], [1, 2, 0], [4, 4, 0]],
        );
        let cc = connected_components(&m, Connectivity::Six);
        assert_eq!(cc.count(), 3);
        // first-encountered raster order: (4,0) then (0,2) then (4,4)
        assert_eq!(cc.labels()[m.geometry().index(4, 0, 0)], 1);
        assert_eq!(cc.labels()[m.geometry().index(0, 2, 0)], 2);
        assert_eq!(cc.labels()[m.geometry().index(1, 2, 0)], 2);
        assert_eq!(cc.labels()[m.geometry().index(4, 4, 0)], 3);
        let sizes = cc.component_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), m.count_set());
    }

    /// Discretization rule under test: composing two ball dilations can
    /// only ever reach a subset of the single dilation by the summed radius
    /// (triangle inequality on the continuous distances), and dilation is
    /// extensive. Equality does not hold on a grid: an integer point within
    /// a+b of the input need not decompose into integer steps within a and b.
    #[test]
    fn dilation_composition_is_contained_in_summed_radius() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for trial in 0..50 {
            let g = Geometry::new([16, 16, 16], [1.0; 3], [0.0; 3]);
            let v: Vec<u8> = (0..g.voxel_count())
                .map(|_| u8::from(rng.gen::<f64>() < 0.01))
                .collect();
            let m = BinaryMask::new(g, v).unwrap();
            if m.is_empty() {
                continue;
            }
            let (a, b) = (1.0 + 2.0 * rng.gen::<f64>(), 1.0 + 2.0 * rng.gen::<f64>());
            let double = dilate(&dilate(&m, a).unwrap(), b).unwrap();
            let single = dilate(&m, a + b).unwrap();
            for (i, (&d, &s)) in double.voxels().iter().zip(single.voxels()).enumerate() {
                assert!(d <= s, "trial {trial}: composition exceeds summed ball at {i}");
            }
            // extensive: input contained in every dilation
            for (&mv, &dv) in m.voxels().iter().zip(double.voxels()) {
                assert!(mv <= dv);
            }
        }
    }

    #[test]
    fn distance_transform_matches_brute_force_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let g = Geometry::new([9, 8, 7], [1.0; 3], [0.0; 3]);
            let v: Vec<u8> = (0..g.voxel_count())
                .map(|_| if rng.gen::<f64>() < 0.08 { 1 } else { 0 })
                .collect();
            let m = BinaryMask::new(g.clone(), v).unwrap();
            if m.is_empty() {
                continue;
            }
            let dist = squared_distance_transform(&m);
            let set: Vec<[i64; 3]> = (0..g.voxel_count())
                .filter(|&i| m.voxels()[i] == 1)
                .map(|i| {
                    [
                        (i % 9) as i64,
                        ((i / 9) % 8) as i64,
                        (i / 72) as i64,
                    ]
                })
                .collect();
            for k in 0..7i64 {
                for j in 0..8i64 {
                    for i in 0..9i64 {
                        let best = set
                            .iter()
                            .map(|s| {
                                let d = [i - s[0], j - s[1], k - s[2]];
                                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64
                            })
                            .fold(f64::INFINITY, f64::min);
                        let got = dist[(i + 9 * (j + 8 * k)) as usize];
                        assert!(
                            (got - best).abs() < 1e-9,
                            "at {i},{j},{k}: {got} vs {best}"
                        );
                    }
                }
            }
        }
    }
}
