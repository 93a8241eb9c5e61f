//! Per-slice PNG overlays: grayscale base image, probability-tinted heat map
//! and annotation contours, one image per axial slice.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume};
use image::{Rgb, RgbImage};
use std::path::Path;

fn normalize_window(vol: &Volume) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in vol.voxels() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// Is this masked voxel on the in-plane boundary of its component?
fn is_contour(mask: &BinaryMask, x: usize, y: usize, z: usize) -> bool {
    let [nx, ny, _] = mask.dims();
    if mask.get(x, y, z) == 0 {
        return false;
    }
    let neighbors = [
        (x.wrapping_sub(1), y),
        (x + 1, y),
        (x, y.wrapping_sub(1)),
        (x, y + 1),
    ];
    neighbors
        .iter()
        .any(|&(a, b)| a >= nx || b >= ny || mask.get(a, b, z) == 0)
}

/// Writes `slice_XXX.png` files mirroring the probability heat-map overlay
/// figure: base image in gray, heat map as a red tint, annotation as yellow
/// contours.
pub fn write_overlays(
    base: &Volume,
    heat: &Volume,
    annotation: Option<&BinaryMask>,
    dir: &Path,
) -> Result<usize> {
    if base.dims() != heat.dims() {
        return Err(Error::Geometry(format!(
            "base dims {:?} differ from heat map dims {:?}",
            base.dims(),
            heat.dims()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let [nx, ny, nz] = base.dims();
    let (lo, hi) = normalize_window(base);
    for z in 0..nz {
        let mut img = RgbImage::new(nx as u32, ny as u32);
        for y in 0..ny {
            for x in 0..nx {
                let g = ((base.get(x, y, z) - lo) / (hi - lo)).clamp(0.0, 1.0);
                let p = heat.get(x, y, z).clamp(0.0, 1.0);
                let alpha = 0.7 * p;
                let r = g * (1.0 - alpha) + alpha;
                let gb = g * (1.0 - alpha);
                let mut px = [
                    (r * 255.0) as u8,
                    (gb * 255.0) as u8,
                    (gb * 255.0) as u8,
                ];
                if let Some(ann) = annotation {
                    if is_contour(ann, x, y, z) {
                        px = [255, 230, 0];
                    }
                }
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        let path = dir.join(format!("slice_{z:03}.png"));
        img.save(&path)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(nz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn overlays_written_per_slice() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([8, 8, 3], [1.0; 3], [0.0; 3]);
        let base = Volume::new(g.clone(), (0..192).map(|i| i as f32).collect()).unwrap();
        let heat = Volume::new(g.clone(), vec![0.25; 192]).unwrap();
        let mut ann = vec![0u8; 192];
        ann[g.index(4, 4, 1)] = 1;
        let mask = BinaryMask::new(g, ann).unwrap();
        let n = write_overlays(&base, &heat, Some(&mask), dir.path()).unwrap();
        assert_eq!(n, 3);
        for z in 0..3 {
            assert!(dir.path().join(format!("slice_{z:03}.png")).exists());
        }
    }
}
