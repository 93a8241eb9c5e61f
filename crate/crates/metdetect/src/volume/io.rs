//! Volume persistence.
//!
//! Two formats are supported:
//!
//! * native: `<name>.vol.raw` (little-endian f32 buffer, x-fastest) plus a
//!   `<name>.vol.json` sidecar holding the grid geometry. Round trips are
//!   bit-exact.
//! * NIfTI-1 single-file `.nii` (348-byte header, magic `n+1\0`, float32
//!   data, little-endian) for interchange with standard tooling.

use super::{Geometry, Volume};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Native,
    Nifti1,
}

fn detect_format(path: &Path) -> VolumeFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => VolumeFormat::Nifti1,
        _ => VolumeFormat::Native,
    }
}

/// Strips a trailing `.vol`, `.vol.raw` or `.vol.json` so that any of the
/// sibling paths addresses the same native volume.
fn native_base(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".vol.raw", ".vol.json", ".vol"] {
        if let Some(stripped) = s.strip_suffix(suffix) {
            return PathBuf::from(stripped);
        }
    }
    path.to_path_buf()
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    match detect_format(path) {
        VolumeFormat::Native => save_native(vol, path),
        VolumeFormat::Nifti1 => save_nifti(vol, path),
    }
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    match detect_format(path) {
        VolumeFormat::Native => load_native(path),
        VolumeFormat::Nifti1 => load_nifti(path),
    }
}

fn save_native(vol: &Volume, path: &Path) -> Result<()> {
    let base = native_base(path);
    let raw_path = PathBuf::from(format!("{}.vol.raw", base.display()));
    let json_path = PathBuf::from(format!("{}.vol.json", base.display()));

    let json = serde_json::to_string_pretty(vol.geometry())?;
    std::fs::write(&json_path, json)?;

    let mut w = BufWriter::new(File::create(&raw_path)?);
    for &v in vol.voxels() {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

fn load_native(path: &Path) -> Result<Volume> {
    let base = native_base(path);
    let raw_path = PathBuf::from(format!("{}.vol.raw", base.display()));
    let json_path = PathBuf::from(format!("{}.vol.json", base.display()));

    let geom: Geometry = serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
    geom.validate()?;
    let n = geom.voxel_count();

    let mut r = BufReader::new(File::open(&raw_path)?);
    let mut voxels = vec![0f32; n];
    for (i, v) in voxels.iter_mut().enumerate() {
        *v = r.read_f32::<LittleEndian>().map_err(|_| Error::Format {
            path: raw_path.clone(),
            offset: (i * 4) as u64,
            message: format!("raw buffer truncated, expected {n} f32 values"),
        })?;
    }
    Volume::new(geom, voxels)
}

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: u64 = 352;
const OFFSET_DIM: usize = 40;
const OFFSET_DATATYPE: usize = 70;
const OFFSET_BITPIX: usize = 72;
const OFFSET_PIXDIM: usize = 76;
const OFFSET_VOX_OFFSET: usize = 108;
const OFFSET_SCL_SLOPE: usize = 112;
const OFFSET_SCL_INTER: usize = 116;
const OFFSET_XYZT_UNITS: usize = 123;
const OFFSET_SFORM_CODE: usize = 254;
const OFFSET_QOFFSET_X: usize = 268;
const OFFSET_SROW_X: usize = 280;
const OFFSET_MAGIC: usize = 344;
const DATATYPE_FLOAT32: i16 = 16;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}
fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}
fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn save_nifti(vol: &Volume, path: &Path) -> Result<()> {
    let g = vol.geometry();
    let mut h = vec![0u8; NIFTI_HEADER_SIZE];
    put_i32(&mut h, 0, NIFTI_HEADER_SIZE as i32);

    put_i16(&mut h, OFFSET_DIM, 3);
    for a in 0..3 {
        if g.dims[a] > i16::MAX as usize {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: OFFSET_DIM as u64,
                message: format!("dim {} = {} overflows the NIfTI-1 i16 dim field", a, g.dims[a]),
            });
        }
        put_i16(&mut h, OFFSET_DIM + 2 * (a + 1), g.dims[a] as i16);
    }
    for a in 4..8 {
        put_i16(&mut h, OFFSET_DIM + 2 * a, 1);
    }

    put_i16(&mut h, OFFSET_DATATYPE, DATATYPE_FLOAT32);
    put_i16(&mut h, OFFSET_BITPIX, 32);

    put_f32(&mut h, OFFSET_PIXDIM, 1.0); // qfac
    for a in 0..3 {
        put_f32(&mut h, OFFSET_PIXDIM + 4 * (a + 1), g.spacing[a] as f32);
    }

    put_f32(&mut h, OFFSET_VOX_OFFSET, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, OFFSET_SCL_SLOPE, 1.0);
    put_f32(&mut h, OFFSET_SCL_INTER, 0.0);
    h[OFFSET_XYZT_UNITS] = 2; // millimetres

    put_i16(&mut h, OFFSET_SFORM_CODE, 2); // aligned anatomy
    for row in 0..3 {
        for col in 0..3 {
            put_f32(
                &mut h,
                OFFSET_SROW_X + 16 * row + 4 * col,
                (g.direction[row][col] * g.spacing[col]) as f32,
            );
        }
        put_f32(&mut h, OFFSET_SROW_X + 16 * row + 12, g.origin[row] as f32);
        put_f32(&mut h, OFFSET_QOFFSET_X + 4 * row, g.origin[row] as f32);
    }

    h[OFFSET_MAGIC..OFFSET_MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&h)?;
    w.write_all(&[0u8; 4])?; // no header extensions
    for &v in vol.voxels() {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

/// Re-orthonormalizes a direction matrix read from single-precision srow
/// fields (normalize columns, then Gram-Schmidt).
fn orthonormalize(d: &mut [[f64; 3]; 3]) {
    let mut cols = [[0.0f64; 3]; 3];
    for c in 0..3 {
        for r in 0..3 {
            cols[c][r] = d[r][c];
        }
    }
    for c in 0..3 {
        for p in 0..c {
            let dot: f64 = (0..3).map(|r| cols[c][r] * cols[p][r]).sum();
            for r in 0..3 {
                cols[c][r] -= dot * cols[p][r];
            }
        }
        let norm: f64 = (0..3).map(|r| cols[c][r] * cols[c][r]).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..3 {
                cols[c][r] /= norm;
            }
        }
    }
    for c in 0..3 {
        for r in 0..3 {
            d[r][c] = cols[c][r];
        }
    }
}

fn load_nifti(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = vec![0u8; NIFTI_HEADER_SIZE];
    r.read_exact(&mut h).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: "file shorter than the 348-byte NIfTI-1 header".into(),
    })?;

    let magic = &h[OFFSET_MAGIC..OFFSET_MAGIC + 4];
    if magic != b"n+1\0" {
        let message = if magic == b"ni1\0" {
            "two-file NIfTI (magic \"ni1\") is not supported, expected \"n+1\"".to_string()
        } else {
            format!(
                "bad magic {:?}, expected \"n+1\\0\"",
                String::from_utf8_lossy(magic)
            )
        };
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: OFFSET_MAGIC as u64,
            message,
        });
    }

    let sizeof_hdr = get_i32(&h, 0);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        let message = if sizeof_hdr.swap_bytes() == NIFTI_HEADER_SIZE as i32 {
            "big-endian NIfTI-1 is not supported".to_string()
        } else {
            format!("sizeof_hdr = {sizeof_hdr}, expected 348")
        };
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message,
        });
    }

    let datatype = get_i16(&h, OFFSET_DATATYPE);
    if datatype != DATATYPE_FLOAT32 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: OFFSET_DATATYPE as u64,
            message: format!("datatype {datatype} unsupported, only float32 (16) is handled"),
        });
    }

    let ndim = get_i16(&h, OFFSET_DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: OFFSET_DIM as u64,
            message: format!("dim[0] = {ndim} outside 1..=7"),
        });
    }
    let mut dims = [1usize; 3];
    let mut total: usize = 1;
    for a in 0..ndim as usize {
        let d = get_i16(&h, OFFSET_DIM + 2 * (a + 1));
        if d < 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (OFFSET_DIM + 2 * (a + 1)) as u64,
                message: format!("dim[{}] = {d} must be >= 1", a + 1),
            });
        }
        if a < 3 {
            dims[a] = d as usize;
        } else if d != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (OFFSET_DIM + 2 * (a + 1)) as u64,
                message: format!("dim[{}] = {d}: only 3D volumes are supported", a + 1),
            });
        }
        total = total.checked_mul(d as usize).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: OFFSET_DIM as u64,
            message: "dimension product overflows".into(),
        })?;
    }

    let mut spacing = [1.0f64; 3];
    for a in 0..3 {
        let p = get_f32(&h, OFFSET_PIXDIM + 4 * (a + 1)) as f64;
        if p > 0.0 && p.is_finite() {
            spacing[a] = p;
        } else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (OFFSET_PIXDIM + 4 * (a + 1)) as u64,
                message: format!("pixdim[{}] = {p} must be positive", a + 1),
            });
        }
    }

    let sform_code = get_i16(&h, OFFSET_SFORM_CODE);
    let mut origin = [0.0f64; 3];
    let mut direction = super::mat3::IDENTITY;
    if sform_code > 0 {
        for row in 0..3 {
            for col in 0..3 {
                direction[row][col] =
                    get_f32(&h, OFFSET_SROW_X + 16 * row + 4 * col) as f64 / spacing[col];
            }
            origin[row] = get_f32(&h, OFFSET_SROW_X + 16 * row + 12) as f64;
        }
        orthonormalize(&mut direction);
    } else {
        for row in 0..3 {
            origin[row] = get_f32(&h, OFFSET_QOFFSET_X + 4 * row) as f64;
        }
    }

    let vox_offset = get_f32(&h, OFFSET_VOX_OFFSET) as u64;
    if vox_offset < NIFTI_HEADER_SIZE as u64 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: OFFSET_VOX_OFFSET as u64,
            message: format!("vox_offset = {vox_offset} points inside the header"),
        });
    }
    let mut skip = vec![0u8; (vox_offset as usize).saturating_sub(NIFTI_HEADER_SIZE)];
    r.read_exact(&mut skip).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        offset: NIFTI_HEADER_SIZE as u64,
        message: "file truncated before voxel data".into(),
    })?;

    let slope = get_f32(&h, OFFSET_SCL_SLOPE);
    let inter = get_f32(&h, OFFSET_SCL_INTER);
    let apply_scaling = slope != 0.0 && (slope != 1.0 || inter != 0.0);

    let mut voxels = vec![0f32; total];
    for (i, v) in voxels.iter_mut().enumerate() {
        let raw = r.read_f32::<LittleEndian>().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: vox_offset + (i * 4) as u64,
            message: format!("voxel data truncated, expected {total} float32 values"),
        })?;
        *v = if apply_scaling { raw * slope + inter } else { raw };
    }

    let geom = Geometry {
        dims,
        spacing,
        origin,
        direction,
    };
    Volume::new(geom, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_volume(seed: u64) -> Volume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Geometry::new(
            [16, 16, 16],
            [0.5 + rng.gen::<f64>(), 0.5 + rng.gen::<f64>(), 0.5 + rng.gen::<f64>()],
            [rng.gen::<f64>() * 20.0 - 10.0, rng.gen::<f64>() * 20.0, -3.0],
        );
        let th: f64 = rng.gen::<f64>() - 0.5;
        g.direction = [
            [th.cos(), -th.sin(), 0.0],
            [th.sin(), th.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let v: Vec<f32> = (0..g.voxel_count()).map(|_| rng.gen::<f32>() * 100.0).collect();
        Volume::new(g, v).unwrap()
    }

    #[test]
    fn native_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vol = random_volume(5);
        let path = dir.path().join("test.vol");
        save_volume(&vol, &path).unwrap();
        assert!(dir.path().join("test.vol.raw").exists());
        assert!(dir.path().join("test.vol.json").exists());
        let back = load_volume(&path).unwrap();
        assert_eq!(back.voxels(), vol.voxels());
        assert!(back.geometry().approx_eq(vol.geometry(), 0.0));
        // loading via either concrete file also works
        let via_raw = load_volume(&dir.path().join("test.vol.raw")).unwrap();
        assert_eq!(via_raw.voxels(), vol.voxels());
    }

    #[test]
    fn nifti_round_trip_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let vol = random_volume(11);
        let path = dir.path().join("test.nii");
        save_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.dims(), vol.dims());
        for (a, b) in back.voxels().iter().zip(vol.voxels()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        let (g1, g2) = (vol.geometry(), back.geometry());
        for a in 0..3 {
            assert!((g1.spacing[a] - g2.spacing[a]).abs() < 1e-5);
            assert!((g1.origin[a] - g2.origin[a]).abs() < 1e-4);
            for b in 0..3 {
                assert!((g1.direction[a][b] - g2.direction[a][b]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn nifti_bad_magic_names_offset_344() {
        let dir = tempfile::tempdir().unwrap();
        let vol = random_volume(2);
        let path = dir.path().join("bad.nii");
        save_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[OFFSET_MAGIC..OFFSET_MAGIC + 4].copy_from_slice(b"xxx\0");
        std::fs::write(&path, bytes).unwrap();
        match load_volume(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 344),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn nifti_truncated_data_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let vol = random_volume(3);
        let path = dir.path().join("trunc.nii");
        save_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match load_volume(&path).unwrap_err() {
            Error::Format { offset, .. } => assert!(offset >= NIFTI_VOX_OFFSET),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn nifti_rejects_unsupported_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let vol = random_volume(4);
        let path = dir.path().join("dt.nii");
        save_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[OFFSET_DATATYPE..OFFSET_DATATYPE + 2].copy_from_slice(&4i16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_volume(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, OFFSET_DATATYPE as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
