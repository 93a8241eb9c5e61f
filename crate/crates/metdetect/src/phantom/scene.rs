//! Voxel rendering of the phantom scene at both time points.
//!
//! All structures live in anatomy space. The diagnosis examination samples
//! the scene directly; the pre-diagnosis examination samples it through the
//! misalignment transform, exactly as a repositioned head would appear on a
//! fresh scan. Lesions are rendered into the diagnosis volumes only.

use super::{HeadModel, PhantomParams, RHO_BRAIN, RHO_CSF, RHO_SKULL};
use crate::case::{LesionMeta, PhantomTruth, SequenceKind, SequenceSet, TimePoint};
use crate::error::Result;
use crate::volume::{AffineTransform3D, BinaryMask, Geometry, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEQ_ORDER: [SequenceKind; 4] = SequenceKind::ALL;

/// Per-layer base intensities in normalized units, ordered
/// (air, skin, skull, CSF, brain) x (T1w, ceT1w, T2w, FLAIR).
const TISSUE_TABLE: [[f64; 4]; 5] = [
    [0.02, 0.02, 0.02, 0.02],
    [0.75, 0.78, 0.55, 0.50],
    [0.12, 0.12, 0.10, 0.10],
    [0.22, 0.22, 0.95, 0.12],
    [0.62, 0.60, 0.50, 0.58],
];

const BRAIN: usize = 4;

#[inline]
fn layer_of(rho: f64) -> usize {
    if rho > 1.0 {
        0
    } else if rho > RHO_SKULL {
        1
    } else if rho > RHO_CSF {
        2
    } else if rho > RHO_BRAIN {
        3
    } else {
        4
    }
}

fn seq_index(kind: SequenceKind) -> usize {
    match kind {
        SequenceKind::T1w => 0,
        SequenceKind::CeT1w => 1,
        SequenceKind::T2w => 2,
        SequenceKind::Flair => 3,
    }
}

/// Lesion target intensity per sequence: strong gadolinium enhancement on
/// ceT1w, mild native-T1 hyperintensity, mild T2/FLAIR changes.
fn lesion_targets(lesion: &LesionMeta) -> [f64; 4] {
    [
        TISSUE_TABLE[BRAIN][0] * 1.35,
        TISSUE_TABLE[BRAIN][1] * lesion.enhancement,
        TISSUE_TABLE[BRAIN][2] * 1.15,
        TISSUE_TABLE[BRAIN][3] * 1.25,
    ]
}

/// Vessels enhance like lesions on ceT1w; that is the confounder.
fn vessel_targets(params: &PhantomParams) -> [f64; 4] {
    [
        TISSUE_TABLE[BRAIN][0] * 1.15,
        TISSUE_TABLE[BRAIN][1] * params.enhancement_contrast * 1.1,
        TISSUE_TABLE[BRAIN][2] * 1.05,
        TISSUE_TABLE[BRAIN][3] * 1.05,
    ]
}

/// Full-intensity radius of a lesion on this grid: at least the geometric
/// radius, extended so the voxel nearest the center always renders at full
/// intensity (sub-voxel lesions stay conspicuous, like small enhancing
/// metastases on clinical ceT1w).
pub(crate) fn lesion_render_radius(geom: &Geometry, lesion: &LesionMeta) -> f64 {
    let ci = geom.world_to_index(lesion.center_mm);
    let ni = [
        (ci[0].round() as i64).clamp(0, geom.dims[0] as i64 - 1) as f64,
        (ci[1].round() as i64).clamp(0, geom.dims[1] as i64 - 1) as f64,
        (ci[2].round() as i64).clamp(0, geom.dims[2] as i64 - 1) as f64,
    ];
    let nw = geom.index_to_world(ni);
    let d = ((nw[0] - lesion.center_mm[0]).powi(2)
        + (nw[1] - lesion.center_mm[1]).powi(2)
        + (nw[2] - lesion.center_mm[2]).powi(2))
    .sqrt();
    (lesion.diameter_mm / 2.0).max(d + 0.01)
}

/// Unit plateau with a Gaussian shoulder outside radius `r0`; half intensity
/// at `r0 + edge`.
#[inline]
fn profile(dist: f64, r0: f64, edge: f64) -> f64 {
    if dist <= r0 {
        1.0
    } else {
        let t = (dist - r0) / edge;
        (-std::f64::consts::LN_2 * t * t).exp()
    }
}

/// Index-space bounding box of an anatomy-space AABB, seen through the
/// time point's anatomy transform (voxel world -> anatomy).
fn index_bbox(
    geom: &Geometry,
    to_anatomy_inv: &AffineTransform3D,
    lo: [f64; 3],
    hi: [f64; 3],
    pad: f64,
) -> ([usize; 3], [usize; 3]) {
    let mut imin = [f64::INFINITY; 3];
    let mut imax = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let p = [
            if corner & 1 == 0 { lo[0] } else { hi[0] },
            if corner & 2 == 0 { lo[1] } else { hi[1] },
            if corner & 4 == 0 { lo[2] } else { hi[2] },
        ];
        let world = to_anatomy_inv.apply(p);
        let idx = geom.world_to_index(world);
        for a in 0..3 {
            imin[a] = imin[a].min(idx[a]);
            imax[a] = imax[a].max(idx[a]);
        }
    }
    let mut lo_i = [0usize; 3];
    let mut hi_i = [0usize; 3];
    for a in 0..3 {
        let pad_vox = pad / geom.spacing[a];
        lo_i[a] = (imin[a] - pad_vox).floor().max(0.0) as usize;
        hi_i[a] = ((imax[a] + pad_vox).ceil() as i64).clamp(0, geom.dims[a] as i64 - 1) as usize;
    }
    (lo_i, hi_i)
}

struct TimepointRender {
    /// One buffer per sequence in `SEQ_ORDER`.
    buffers: [Vec<f32>; 4],
}

fn render_timepoint(
    params: &PhantomParams,
    head: &HeadModel,
    geom: &Geometry,
    to_anatomy: &AffineTransform3D,
    lesions: &[LesionMeta],
    truth: &PhantomTruth,
    timepoint: TimePoint,
) -> Result<TimepointRender> {
    let n = geom.voxel_count();
    let [nx, ny, nz] = geom.dims;
    let inv = to_anatomy.inverse()?;

    // base layers
    let mut layer = vec![0u8; n];
    {
        let mut o = 0usize;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let w = geom.index_to_world([i as f64, j as f64, k as f64]);
                    let p = to_anatomy.apply(w);
                    layer[o] = layer_of(head.rho(p)) as u8;
                    o += 1;
                }
            }
        }
    }
    let mut buffers: [Vec<f32>; 4] = std::array::from_fn(|s| {
        layer
            .iter()
            .map(|&l| TISSUE_TABLE[l as usize][s] as f32)
            .collect()
    });

    let edge = params.lesion_edge_mm;
    let mut stamp = |lo: [f64; 3], hi: [f64; 3], pad: f64, f: &mut dyn FnMut(usize, [f64; 3], &mut [Vec<f32>; 4])| {
        let (lo_i, hi_i) = index_bbox(geom, &inv, lo, hi, pad);
        for k in lo_i[2]..=hi_i[2] {
            for j in lo_i[1]..=hi_i[1] {
                for i in lo_i[0]..=hi_i[0] {
                    let w = geom.index_to_world([i as f64, j as f64, k as f64]);
                    let p = to_anatomy.apply(w);
                    let o = i + nx * (j + ny * k);
                    f(o, p, &mut buffers);
                }
            }
        }
    };

    // vessels: present at both time points at identical anatomy positions
    let vtargets = vessel_targets(params);
    for vessel in &truth.vessels {
        for seg in vessel.points_mm.windows(2) {
            let lo = [
                seg[0][0].min(seg[1][0]),
                seg[0][1].min(seg[1][1]),
                seg[0][2].min(seg[1][2]),
            ];
            let hi = [
                seg[0][0].max(seg[1][0]),
                seg[0][1].max(seg[1][1]),
                seg[0][2].max(seg[1][2]),
            ];
            let reach = vessel.radius_mm + 2.5 * edge;
            stamp(lo, hi, reach, &mut |o, p, bufs| {
                let d = super::point_segment_distance(p, seg[0], seg[1]);
                let w = profile(d, vessel.radius_mm, edge);
                if w > 1e-3 {
                    for s in 0..4 {
                        let cur = bufs[s][o] as f64;
                        bufs[s][o] = (cur + (vtargets[s] - cur) * w) as f32;
                    }
                }
            });
        }
    }

    // lesions: diagnosis only
    if timepoint == TimePoint::Diagnosis {
        for lesion in lesions {
            let r = lesion_render_radius(geom, lesion);
            let targets = lesion_targets(lesion);
            let c = lesion.center_mm;
            let reach = r + 2.5 * edge;
            stamp(
                [c[0] - r, c[1] - r, c[2] - r],
                [c[0] + r, c[1] + r, c[2] + r],
                reach,
                &mut |o, p, bufs| {
                    let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2))
                        .sqrt();
                    let w = profile(d, r, edge);
                    if w > 1e-3 {
                        for s in 0..4 {
                            let cur = bufs[s][o] as f64;
                            bufs[s][o] = (cur + (targets[s] - cur) * w) as f32;
                        }
                    }
                },
            );
        }
    }

    // artifacts: independent per time point
    for artifact in truth.artifacts.iter().filter(|a| a.timepoint == timepoint) {
        let c = artifact.center_mm;
        let reach = 3.0 * artifact.sigma_mm;
        stamp(
            [c[0] - reach, c[1] - reach, c[2] - reach],
            [c[0] + reach, c[1] + reach, c[2] + reach],
            0.0,
            &mut |o, p, bufs| {
                let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                let g = (-d2 / (2.0 * artifact.sigma_mm * artifact.sigma_mm)).exp();
                // full strength on ceT1w, attenuated elsewhere
                let amps = [0.4, 1.0, 0.4, 0.4];
                for s in 0..4 {
                    bufs[s][o] += (artifact.amplitude * amps[s] * g) as f32;
                }
            },
        );
    }

    Ok(TimepointRender { buffers })
}

/// Renders both time points plus the ground-truth mask. The mask covers the
/// full-intensity plateau of every lesion (voxel centers within the lesion
/// radius), with the voxel nearest the center always included so sub-voxel
/// lesions stay represented.
pub fn render_case_volumes(
    seed: u64,
    params: &PhantomParams,
    head: &HeadModel,
    lesions: &[LesionMeta],
    truth: &PhantomTruth,
) -> Result<(SequenceSet, SequenceSet, BinaryMask)> {
    let geom = params.geometry();
    let identity = AffineTransform3D::identity();

    let diag = render_timepoint(
        params,
        head,
        &geom,
        &identity,
        lesions,
        truth,
        TimePoint::Diagnosis,
    )?;
    let pre = render_timepoint(
        params,
        head,
        &geom,
        &truth.misalignment,
        lesions,
        truth,
        TimePoint::Prediag,
    )?;

    // ground-truth mask on the diagnosis grid
    let [nx, ny, _] = geom.dims;
    let mut mask = vec![0u8; geom.voxel_count()];
    for lesion in lesions {
        let c = lesion.center_mm;
        let r = lesion_render_radius(&geom, lesion);
        let (lo_i, hi_i) = index_bbox(
            &geom,
            &identity,
            [c[0] - r, c[1] - r, c[2] - r],
            [c[0] + r, c[1] + r, c[2] + r],
            0.0,
        );
        for k in lo_i[2]..=hi_i[2] {
            for j in lo_i[1]..=hi_i[1] {
                for i in lo_i[0]..=hi_i[0] {
                    let w = geom.index_to_world([i as f64, j as f64, k as f64]);
                    let d2 =
                        (w[0] - c[0]).powi(2) + (w[1] - c[1]).powi(2) + (w[2] - c[2]).powi(2);
                    if d2 <= r * r + 1e-9 {
                        mask[i + nx * (j + ny * k)] = 1;
                    }
                }
            }
        }
    }

    // additive noise, one stream per (time point, sequence)
    let noise = Normal::new(0.0, params.noise_sd).unwrap();
    let finish = |render: TimepointRender, tp_stream: u64| -> Result<SequenceSet> {
        let mut set = SequenceSet::new();
        for (kind, mut buf) in SEQ_ORDER.into_iter().zip(render.buffers) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(tp_stream + seq_index(kind) as u64);
            if params.noise_sd > 0.0 {
                for v in buf.iter_mut() {
                    *v += noise.sample(&mut rng) as f32;
                }
            }
            set.insert(kind, Volume::new(geom.clone(), buf)?);
        }
        Ok(set)
    };
    let prediag = finish(pre, 0x0a00)?;
    let diagnosis = finish(diag, 0x0b00)?;
    let gt = BinaryMask::new(geom, mask)?;
    Ok((prediag, diagnosis, gt))
}
