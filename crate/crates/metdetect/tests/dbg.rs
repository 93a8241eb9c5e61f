use metdetect::eval::{binarize, case_metrics, match_lesions};
use metdetect::experiment::profiles;
use metdetect::phantom::generate_case;
use metdetect::training::{train, FoldSplit, TrainConfig};
use metdetect::unet::{infer_volume, Arm, InputConfiguration};
use metdetect::volume::{connected_components, Connectivity};

#[test]
fn probe_thresholds() {
    let phantom = profiles::desk_phantom();
    let case = generate_case(808, &phantom).unwrap();
    let cases = vec![case];
    let split = FoldSplit::all_training(&cases, 0);
    let mut tc = TrainConfig {
        epochs: 50,
        inner_validation_fraction: 0.0,
        learning_rate: 3e-3,
        batch_size: 2,
        ..profiles::desk_train(808)
    };
    tc.augment.enabled = false;
    let input = InputConfiguration::new(Arm::Ce);
    let outcome = train(&cases, &input, &tc, &split, 0).unwrap();
    let heat = infer_volume(&outcome.net, &cases[0]).unwrap();

    // max probability within each ground-truth component
    let cc = connected_components(&cases[0].gt_mask, Connectivity::TwentySix);
    for label in 1..=cc.count() {
        let maxp = cc
            .labels()
            .iter()
            .zip(heat.voxels())
            .filter(|(l, _)| **l == label)
            .map(|(_, &p)| p)
            .fold(f32::NEG_INFINITY, f32::max);
        println!("gt component {label}: max prob {maxp:.4}");
    }
    for thr in [0.5, 0.6, 0.7, 0.8, 0.9] {
        let pred = binarize(&heat, thr).unwrap();
        let m = match_lesions(&pred, &cases[0].gt_mask, &profiles::desk_eval()).unwrap();
        let f1 = case_metrics(&m).f1.unwrap_or(0.0);
        println!(
            "threshold {thr}: TP {} FP {} FN {} F1 {f1:.3}",
            m.true_positives, m.false_positives, m.false_negatives
        );
    }
}
