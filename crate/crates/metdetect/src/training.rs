//! Training loop, augmentation, and patient-grouped cross-validation.
//!
//! Folds partition cases at the patient level so no subject leaks between
//! training and test sets; the inner 75/25 train/validation split is also
//! patient-disjoint. Each epoch draws, per training case, every slice that
//! intersects ground truth plus an equal number of random negative slices.
//! Validation loss is recorded per epoch but never used for stopping.

use crate::case::Case;
use crate::error::{Error, Result};
use crate::nn::{adam_step, segmentation_loss, AdamState, Tensor4};
use crate::unet::{build_unet, prepare_case, InputConfiguration, PreparedCase, UNet};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub enabled: bool,
    pub mirror_probability: f64,
    pub contrast_range: [f64; 2],
    pub noise_sd_max: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            enabled: true,
            mirror_probability: 0.5,
            contrast_range: [0.75, 1.25],
            noise_sd_max: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentParams,
    pub folds: usize,
    pub inner_validation_fraction: f64,
    pub base_features: usize,
    pub depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            learning_rate: 2e-4,
            batch_size: 4,
            seed: 0,
            augment: AugmentParams::default(),
            folds: 5,
            inner_validation_fraction: 0.25,
            base_features: 8,
            depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.inner_validation_fraction) {
            return Err(Error::Parameter(
                "inner validation fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Patient-grouped fold assignment: case id -> fold index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
    patient_of: BTreeMap<String, String>,
}

impl FoldSplit {
    pub fn test_cases(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Patient-disjoint inner split of everything outside `fold` into
    /// training and validation case ids.
    pub fn train_val_cases(&self, fold: usize, val_fraction: f64) -> (Vec<String>, Vec<String>) {
        let pool: Vec<String> = self
            .assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect();
        let mut by_patient: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for id in &pool {
            by_patient
                .entry(self.patient_of[id].clone())
                .or_default()
                .push(id.clone());
        }
        let mut patients: Vec<String> = by_patient.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(fold as u64 + 1));
        patients.shuffle(&mut rng);
        let val_target = (pool.len() as f64 * val_fraction).round() as usize;
        let mut val = Vec::new();
        let mut train = Vec::new();
        let n_patients = patients.len();
        for (pi, p) in patients.into_iter().enumerate() {
            let cases = &by_patient[&p];
            // fill validation up to the target, overshooting by at most one
            // patient's worth of cases (groups are indivisible); the last
            // patient always trains so the training set is never empty
            if val.len() < val_target && pi + 1 < n_patients {
                val.extend(cases.iter().cloned());
            } else {
                train.extend(cases.iter().cloned());
            }
        }
        train.sort();
        val.sort();
        (train, val)
    }
}

impl FoldSplit {
    /// Split whose fold 0 holds no cases: training on fold 0 sees every
    /// case (memorization/overfit harnesses).
    pub fn all_training(cases: &[Case], seed: u64) -> Self {
        let mut assignment = BTreeMap::new();
        let mut patient_of = BTreeMap::new();
        for c in cases {
            assignment.insert(c.id.clone(), 1usize);
            patient_of.insert(c.id.clone(), c.patient_id.clone());
        }
        Self {
            k: 2,
            seed,
            assignment,
            patient_of,
        }
    }
}

/// Deterministic patient-grouped k-fold split, balanced by case count.
pub fn make_folds(cases: &[Case], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::Parameter("fold count must be >= 1".into()));
    }
    let mut by_patient: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in cases {
        by_patient
            .entry(c.patient_id.clone())
            .or_default()
            .push(c.id.clone());
    }
    if by_patient.len() < k {
        return Err(Error::Input(format!(
            "{} patients cannot fill {k} folds",
            by_patient.len()
        )));
    }
    let mut patients: Vec<String> = by_patient.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let mut fold_sizes = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    let mut patient_of = BTreeMap::new();
    for p in patients {
        let fold = (0..k).min_by_key(|&f| (fold_sizes[f], f)).unwrap();
        for id in &by_patient[&p] {
            assignment.insert(id.clone(), fold);
            patient_of.insert(id.clone(), p.clone());
            fold_sizes[fold] += 1;
        }
    }
    Ok(FoldSplit {
        k,
        seed,
        assignment,
        patient_of,
    })
}

/// The random draws of one augmentation application, separated from the
/// deterministic transform so tests can force any combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraws {
    pub mirror_x: bool,
    pub mirror_y: bool,
    pub mirror_z: bool,
    pub contrast: f64,
    pub noise_sd: f64,
}

impl AugmentDraws {
    pub fn identity() -> Self {
        Self {
            mirror_x: false,
            mirror_y: false,
            mirror_z: false,
            contrast: 1.0,
            noise_sd: 0.0,
        }
    }

    pub fn sample(params: &AugmentParams, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mirror_x: rng.gen::<f64>() < params.mirror_probability,
            mirror_y: rng.gen::<f64>() < params.mirror_probability,
            mirror_z: rng.gen::<f64>() < params.mirror_probability,
            contrast: params.contrast_range[0]
                + rng.gen::<f64>() * (params.contrast_range[1] - params.contrast_range[0]),
            noise_sd: rng.gen::<f64>() * params.noise_sd_max,
        }
    }
}

fn mirror_plane_x(plane: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        plane[y * w..(y + 1) * w].reverse();
    }
}

fn mirror_plane_y(plane: &mut [f64], h: usize, w: usize) {
    for y in 0..h / 2 {
        for x in 0..w {
            plane.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

/// Applies one augmentation to a sample. The z mirror reverses each slot's
/// slab slice order (the mask rides on the center slice and is unchanged);
/// in-plane mirrors flip image and mask together; contrast scales around
/// each channel's mean; noise is additive Gaussian on the image only.
pub fn apply_augment(
    input: &mut Tensor4,
    mask: &mut Tensor4,
    draws: &AugmentDraws,
    slab_half_width: usize,
    rng: &mut ChaCha8Rng,
) {
    let [_, c, h, w] = input.shape;
    let slab = 2 * slab_half_width + 1;

    if draws.mirror_z && slab > 1 {
        debug_assert_eq!(c % slab, 0);
        for slot in 0..c / slab {
            for o in 0..slab / 2 {
                let a = slot * slab + o;
                let b = slot * slab + (slab - 1 - o);
                let (lo, hi) = (a.min(b), a.max(b));
                // split at hi to swap two channel planes
                let plane_len = h * w;
                let (head, tail) = input.data.split_at_mut(hi * plane_len);
                head[lo * plane_len..(lo + 1) * plane_len].swap_with_slice(&mut tail[..plane_len]);
            }
        }
    }
    if draws.mirror_x {
        for ci in 0..c {
            mirror_plane_x(input.plane_mut(0, ci), h, w);
        }
        mirror_plane_x(mask.plane_mut(0, 0), h, w);
    }
    if draws.mirror_y {
        for ci in 0..c {
            mirror_plane_y(input.plane_mut(0, ci), h, w);
        }
        mirror_plane_y(mask.plane_mut(0, 0), h, w);
    }
    if draws.contrast != 1.0 {
        for ci in 0..c {
            let plane = input.plane_mut(0, ci);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            for v in plane.iter_mut() {
                *v = mean + draws.contrast * (*v - mean);
            }
        }
    }
    if draws.noise_sd > 0.0 {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, draws.noise_sd).unwrap();
        for v in input.data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainingHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,val_loss,wall_seconds")?;
        for (i, e) in self.epochs.iter().enumerate() {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{},{}", i + 1, e.train_loss, val, e.wall_seconds)?;
        }
        Ok(())
    }
}

/// Audit record of every sample drawn during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub epoch: usize,
    pub case_id: String,
    pub z: usize,
    pub positive: bool,
}

pub struct TrainOutcome {
    pub net: UNet,
    pub history: TrainingHistory,
    pub sample_log: Vec<SampleRecord>,
    pub train_case_ids: Vec<String>,
    pub val_case_ids: Vec<String>,
}

struct CaseSlices {
    prepared: PreparedCase,
    gt_planes: Vec<Vec<f64>>, // per z, (h*w) foreground indicators
    positive_z: Vec<usize>,
    negative_z: Vec<usize>,
}

fn prepare_case_slices(case: &Case, config: &InputConfiguration) -> Result<CaseSlices> {
    let prepared = prepare_case(case, config)?;
    let [nx, ny, nz] = prepared.dims;
    let mut gt_planes = Vec::with_capacity(nz);
    let mut positive_z = Vec::new();
    let mut negative_z = Vec::new();
    for z in 0..nz {
        let mut plane = vec![0.0f64; nx * ny];
        let mut any = false;
        for y in 0..ny {
            for x in 0..nx {
                if case.gt_mask.get(x, y, z) == 1 {
                    plane[y * nx + x] = 1.0;
                    any = true;
                }
            }
        }
        gt_planes.push(plane);
        if any {
            positive_z.push(z);
        } else {
            negative_z.push(z);
        }
    }
    Ok(CaseSlices {
        prepared,
        gt_planes,
        positive_z,
        negative_z,
    })
}

/// Every ground-truth-intersecting slice of every case plus an equal number
/// of random negative slices. Positives and negatives are shuffled within
/// their groups and interleaved, so consecutive mini-batches mix both kinds
/// and the batch-summed Dice term never sees an all-background batch while
/// positives remain.
fn epoch_samples(
    data: &[CaseSlices],
    epoch: usize,
    seed: u64,
    log: &mut Vec<SampleRecord>,
) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xe70c_0000 + epoch as u64);
    let mut positives: Vec<(usize, usize)> = Vec::new();
    let mut negatives: Vec<(usize, usize)> = Vec::new();
    for (ci, cs) in data.iter().enumerate() {
        for &z in &cs.positive_z {
            positives.push((ci, z));
            log.push(SampleRecord {
                epoch,
                case_id: cs.prepared.case_id.clone(),
                z,
                positive: true,
            });
        }
        let n_neg = cs.positive_z.len().min(cs.negative_z.len());
        let mut negs = cs.negative_z.clone();
        negs.shuffle(&mut rng);
        for &z in negs.iter().take(n_neg) {
            negatives.push((ci, z));
            log.push(SampleRecord {
                epoch,
                case_id: cs.prepared.case_id.clone(),
                z,
                positive: false,
            });
        }
    }
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(positives.len() + negatives.len());
    let mut pi = positives.into_iter();
    let mut ni = negatives.into_iter();
    loop {
        match (pi.next(), ni.next()) {
            (Some(p), Some(n)) => {
                samples.push(p);
                samples.push(n);
            }
            (Some(p), None) => samples.push(p),
            (None, Some(n)) => samples.push(n),
            (None, None) => break,
        }
    }
    samples
}

fn batch_tensors(
    data: &[CaseSlices],
    config: &InputConfiguration,
    batch: &[(usize, usize)],
    augment: Option<(&AugmentParams, u64, usize, usize)>,
) -> Result<(Tensor4, Tensor4)> {
    let [nx, ny, _] = data[batch[0].0].prepared.dims;
    let channels = config.channels();
    let b = batch.len();
    let mut x = Tensor4::zeros([b, channels, ny, nx]);
    let mut t = Tensor4::zeros([b, 1, ny, nx]);
    for (bi, &(ci, z)) in batch.iter().enumerate() {
        let mut sample = data[ci].prepared.assemble(z)?;
        let mut mask = Tensor4::from_vec([1, 1, ny, nx], data[ci].gt_planes[z].clone())?;
        if let Some((params, seed, epoch, base_index)) = augment {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(
                0xa060_0000 | ((epoch as u64) << 20) | (base_index as u64 + bi as u64),
            );
            let draws = AugmentDraws::sample(params, &mut rng);
            apply_augment(&mut sample, &mut mask, &draws, config.slab_half_width, &mut rng);
        }
        for c in 0..channels {
            x.plane_mut(bi, c).copy_from_slice(sample.plane(0, c));
        }
        t.plane_mut(bi, 0).copy_from_slice(mask.plane(0, 0));
    }
    Ok((x, t))
}

/// Trains a network for one fold. Deterministic given the seed.
pub fn train(
    cases: &[Case],
    config: &InputConfiguration,
    tc: &TrainConfig,
    fold: &FoldSplit,
    fold_index: usize,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let (train_ids, val_ids) = fold.train_val_cases(fold_index, tc.inner_validation_fraction);
    if train_ids.is_empty() {
        return Err(Error::Input("no training cases in this fold".into()));
    }
    let by_id: BTreeMap<&str, &Case> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let pick = |ids: &[String]| -> Result<Vec<CaseSlices>> {
        ids.iter()
            .map(|id| {
                let case = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Input(format!("case {id} not found")))?;
                prepare_case_slices(case, config)
            })
            .collect()
    };
    let train_data = pick(&train_ids)?;
    let val_data = pick(&val_ids)?;

    let mut net = build_unet(config, tc.base_features, tc.depth, tc.seed)?;
    let mut adam: BTreeMap<String, (AdamState, AdamState)> = BTreeMap::new();
    net.visit_params(|name, p| {
        adam.insert(
            name.to_string(),
            (
                AdamState::new(p.weights.numel(), tc.learning_rate),
                AdamState::new(p.bias.len(), tc.learning_rate),
            ),
        );
    });

    let mut history = TrainingHistory::default();
    let mut sample_log = Vec::new();
    for epoch in 0..tc.epochs {
        let t0 = std::time::Instant::now();
        let samples = epoch_samples(&train_data, epoch, tc.seed, &mut sample_log);
        if samples.is_empty() {
            return Err(Error::Input(
                "no training samples: no slice intersects ground truth".into(),
            ));
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_no, batch) in samples.chunks(tc.batch_size).enumerate() {
            let aug = tc
                .augment
                .enabled
                .then_some((&tc.augment, tc.seed, epoch, batch_no * tc.batch_size));
            let (x, t) = batch_tensors(&train_data, config, batch, aug)?;
            let (logits, cache) = net.forward(&x)?;
            let (loss, dlogits) = segmentation_loss(&logits, &t)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            let grads = net.backward(&cache, &dlogits)?;
            net.visit_params_mut(|name, p| {
                if let (Some((dw, db)), Some((sw, sb))) = (grads.get(name), adam.get_mut(name)) {
                    adam_step(&mut p.weights.data, &dw.data, sw).expect("finite gradients");
                    adam_step(&mut p.bias, db, sb).expect("finite gradients");
                }
            });
            loss_sum += loss.total;
            batches += 1;
        }

        let val_loss = if val_data.is_empty() {
            None
        } else {
            let mut vl = 0.0;
            let mut vb = 0usize;
            let mut vlog = Vec::new();
            let vsamples = epoch_samples(&val_data, epoch, tc.seed ^ 0x5a5a, &mut vlog);
            for batch in vsamples.chunks(tc.batch_size) {
                let (x, t) = batch_tensors(&val_data, config, batch, None)?;
                let (logits, _) = net.forward(&x)?;
                let (loss, _) = segmentation_loss(&logits, &t)?;
                vl += loss.total;
                vb += 1;
            }
            (vb > 0).then(|| vl / vb as f64)
        };

        history.epochs.push(EpochStats {
            train_loss: loss_sum / batches as f64,
            val_loss,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        net,
        history,
        sample_log,
        train_case_ids: train_ids,
        val_case_ids: val_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomParams};
    use crate::unet::Arm;

    fn mini_cases(n: usize) -> Vec<Case> {
        let params = PhantomParams {
            dims: [32, 32, 8],
            spacing: [4.0, 4.0, 8.0],
            vessel_count: 3,
            ..Default::default()
        };
        generate_dataset(77, &params, n).unwrap()
    }

    #[test]
    fn folds_partition_cases() {
        let cases = mini_cases(10);
        let split = make_folds(&cases, 4, 9).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for f in 0..4 {
            for id in split.test_cases(f) {
                assert!(seen.insert(id), "case appears in two folds");
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn patients_share_a_fold() {
        let cases = mini_cases(10);
        let split = make_folds(&cases, 4, 3).unwrap();
        let mut fold_of_patient: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &cases {
            let f = split.assignment[&c.id];
            if let Some(&prev) = fold_of_patient.get(c.patient_id.as_str()) {
                assert_eq!(prev, f, "patient {} split across folds", c.patient_id);
            }
            fold_of_patient.insert(&c.patient_id, f);
        }
    }

    #[test]
    fn balanced_folds_for_single_case_patients() {
        // 10 patients with one case each over 5 folds: exactly 2 per fold
        let mut cases = mini_cases(10);
        for (i, c) in cases.iter_mut().enumerate() {
            c.patient_id = format!("p{i}");
        }
        let split = make_folds(&cases, 5, 1).unwrap();
        for f in 0..5 {
            assert_eq!(split.test_cases(f).len(), 2);
        }
    }

    #[test]
    fn too_few_patients_is_an_error() {
        let cases = mini_cases(4); // 2 patients
        assert!(make_folds(&cases, 5, 0).is_err());
    }

    #[test]
    fn inner_split_is_patient_disjoint() {
        let cases = mini_cases(12);
        let split = make_folds(&cases, 3, 5).unwrap();
        let (train, val) = split.train_val_cases(0, 0.25);
        assert!(!train.is_empty() && !val.is_empty());
        let patient = |id: &String| split.patient_of[id].clone();
        let train_p: std::collections::BTreeSet<_> = train.iter().map(patient).collect();
        let val_p: std::collections::BTreeSet<_> = val.iter().map(patient).collect();
        assert!(train_p.is_disjoint(&val_p));
        // none of them in the test fold
        for id in train.iter().chain(&val) {
            assert_ne!(split.assignment[id], 0);
        }
    }

    #[test]
    fn identity_draws_leave_sample_unchanged() {
        let mut x = Tensor4::from_vec([1, 3, 2, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        let mut m = Tensor4::zeros([1, 1, 2, 2]);
        let orig = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        apply_augment(&mut x, &mut m, &AugmentDraws::identity(), 1, &mut rng);
        assert_eq!(x, orig);
    }

    #[test]
    fn double_mirror_restores_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..48).map(|_| rng.gen::<f64>()).collect();
        let mut x = Tensor4::from_vec([1, 3, 4, 4], data.clone()).unwrap();
        let mut m = Tensor4::from_vec([1, 1, 4, 4], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let m0 = m.clone();
        let draws = AugmentDraws {
            mirror_x: true,
            ..AugmentDraws::identity()
        };
        apply_augment(&mut x, &mut m, &draws, 1, &mut rng);
        assert_ne!(x.data, data);
        apply_augment(&mut x, &mut m, &draws, 1, &mut rng);
        assert_eq!(x.data, data);
        assert_eq!(m, m0);
    }

    #[test]
    fn mask_mirrors_with_image() {
        // lesion indicator at (y=1, x=0) must move to x = w-1 under x mirror
        let mut x = Tensor4::zeros([1, 3, 2, 4]);
        let mut m = Tensor4::zeros([1, 1, 2, 4]);
        *m.at_mut(0, 0, 1, 0) = 1.0;
        let draws = AugmentDraws {
            mirror_x: true,
            ..AugmentDraws::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        apply_augment(&mut x, &mut m, &draws, 1, &mut rng);
        assert_eq!(m.at(0, 0, 1, 3), 1.0);
        assert_eq!(m.at(0, 0, 1, 0), 0.0);
    }

    #[test]
    fn z_mirror_reverses_slab_order_per_slot() {
        // two slots of 3 slices: channels (0,1,2) and (3,4,5)
        let mut x = Tensor4::from_vec([1, 6, 1, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut m = Tensor4::zeros([1, 1, 1, 1]);
        let draws = AugmentDraws {
            mirror_z: true,
            ..AugmentDraws::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        apply_augment(&mut x, &mut m, &draws, 1, &mut rng);
        assert_eq!(x.data, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let cases = mini_cases(6);
        let split = make_folds(&cases, 3, 1).unwrap();
        let cfg = InputConfiguration::new(Arm::Ce);
        let tc = TrainConfig {
            epochs: 2,
            base_features: 2,
            depth: 2,
            seed: 4,
            ..Default::default()
        };
        let a = train(&cases, &cfg, &tc, &split, 0).unwrap();
        let b = train(&cases, &cfg, &tc, &split, 0).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.history.epochs.len(), 2);
        for (ea, eb) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(ea.train_loss, eb.train_loss);
            assert_eq!(ea.val_loss, eb.val_loss);
            assert!(ea.train_loss.is_finite());
        }
        assert!(a.history.epochs[0].val_loss.is_some());
    }

    #[test]
    fn no_test_fold_case_contributes_samples() {
        let cases = mini_cases(8);
        let split = make_folds(&cases, 4, 2).unwrap();
        let cfg = InputConfiguration::new(Arm::Ce);
        let tc = TrainConfig {
            epochs: 1,
            base_features: 2,
            depth: 2,
            ..Default::default()
        };
        let out = train(&cases, &cfg, &tc, &split, 1).unwrap();
        let test_ids: std::collections::BTreeSet<_> =
            split.test_cases(1).into_iter().collect();
        for rec in &out.sample_log {
            assert!(!test_ids.contains(&rec.case_id), "test case {} used in training", rec.case_id);
        }
        for id in out.train_case_ids.iter().chain(&out.val_case_ids) {
            assert!(!test_ids.contains(id));
        }
    }

    #[test]
    fn every_positive_slice_sampled_each_epoch() {
        let cases = mini_cases(4);
        let split = make_folds(&cases, 2, 3).unwrap();
        let cfg = InputConfiguration::new(Arm::Ce);
        let tc = TrainConfig {
            epochs: 2,
            base_features: 2,
            depth: 2,
            ..Default::default()
        };
        let out = train(&cases, &cfg, &tc, &split, 0).unwrap();
        let by_id: BTreeMap<&str, &Case> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
        for epoch in 0..2 {
            for id in &out.train_case_ids {
                let case = by_id[id.as_str()];
                let [nx, ny, nz] = case.gt_mask.dims();
                for z in 0..nz {
                    let has_fg = (0..ny).any(|y| (0..nx).any(|x| case.gt_mask.get(x, y, z) == 1));
                    if has_fg {
                        assert!(
                            out.sample_log.iter().any(|r| r.epoch == epoch
                                && &r.case_id == id
                                && r.z == z
                                && r.positive),
                            "positive slice {id}:{z} missing from epoch {epoch}"
                        );
                    }
                }
            }
        }
    }
}
