//! Keypoint evaluation: PCKh, OKS, relative and targeted variants,
//! per-joint breakdowns, and the heatmap-quality KL diagnostic.

use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::synthpose::{joint_cell, PoseSample, SkeletonSpec};

/// Per-joint OKS falloff constant used when no table is supplied.
pub const OKS_DEFAULT_K: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct JointScore {
    pub joint: usize,
    /// Euclidean distance prediction-to-reference in pixels.
    pub distance: f64,
    pub visible: bool,
    /// Within half a head size; only ever true for visible joints.
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub sample_id: u64,
    /// 100 * correct / visible.
    pub pckh: f64,
    pub oks: f64,
    pub joints: Vec<JointScore>,
}

fn joint_distances(pred: &[(f64, f64)], reference: &[(f64, f64)]) -> Vec<f64> {
    pred.iter()
        .zip(reference)
        .map(|(p, r)| {
            let dx = p.0 - r.0;
            let dy = p.1 - r.1;
            (dx * dx + dy * dy).sqrt()
        })
        .collect()
}

/// PCKh plus OKS against the sample's ground truth. Binary per-joint
/// scores at threshold 0.5 * head_size, averaged over visible joints.
pub fn pckh(pred: &[(f64, f64)], sample: &PoseSample) -> Result<MetricRecord> {
    score_sample(pred, sample, OKS_DEFAULT_K)
}

pub fn score_sample(pred: &[(f64, f64)], sample: &PoseSample, k: f64) -> Result<MetricRecord> {
    let ks = vec![k; sample.joints.len()];
    let threshold = 0.5 * sample.head_size;
    let distances = joint_distances(pred, &sample.joints);
    let mut correct = 0usize;
    let mut visible = 0usize;
    let joints: Vec<JointScore> = distances
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let vis = sample.visibility[j];
            let ok = vis && d <= threshold;
            if vis {
                visible += 1;
                if ok {
                    correct += 1;
                }
            }
            JointScore {
                joint: j,
                distance: d,
                visible: vis,
                correct: ok,
            }
        })
        .collect();
    if visible == 0 {
        return Err(Error::NoVisibleJoints {
            sample_id: sample.id,
        });
    }
    let oks_value = oks(pred, sample, &ks)?;
    Ok(MetricRecord {
        sample_id: sample.id,
        pckh: 100.0 * correct as f64 / visible as f64,
        oks: oks_value,
        joints,
    })
}

/// Mean over visible joints of exp(-d^2 / (2 s^2 k_i^2)).
pub fn oks(pred: &[(f64, f64)], sample: &PoseSample, k: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut visible = 0usize;
    for (j, (p, r)) in pred.iter().zip(&sample.joints).enumerate() {
        if !sample.visibility[j] {
            continue;
        }
        let dx = p.0 - r.0;
        let dy = p.1 - r.1;
        let d2 = dx * dx + dy * dy;
        let denom = 2.0 * sample.scale * sample.scale * k[j] * k[j];
        total += (-d2 / denom).exp();
        visible += 1;
    }
    if visible == 0 {
        return Err(Error::NoVisibleJoints {
            sample_id: sample.id,
        });
    }
    Ok(total / visible as f64)
}

/// Joint-pooled aggregate: total correct over total visible, times 100.
pub fn aggregate_pckh(records: &[MetricRecord]) -> f64 {
    let mut correct = 0usize;
    let mut visible = 0usize;
    for r in records {
        for j in &r.joints {
            if j.visible {
                visible += 1;
                if j.correct {
                    correct += 1;
                }
            }
        }
    }
    if visible == 0 {
        return 0.0;
    }
    100.0 * correct as f64 / visible as f64
}

pub fn mean_oks(records: &[MetricRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.oks).sum::<f64>() / records.len() as f64
}

/// (perturbed / original) * 100; lower means less robust.
pub fn relative_pckh(perturbed: f64, original: f64) -> Result<f64> {
    if original <= 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(perturbed / original * 100.0)
}

/// PCKh of a prediction measured against an adversarial target pose,
/// using the attacked sample's head size and visibility. Higher means
/// less robust.
pub fn targeted_pckh(
    pred: &[(f64, f64)],
    target_joints: &[(f64, f64)],
    sample: &PoseSample,
) -> Result<f64> {
    let threshold = 0.5 * sample.head_size;
    let distances = joint_distances(pred, target_joints);
    let mut correct = 0usize;
    let mut visible = 0usize;
    for (j, &d) in distances.iter().enumerate() {
        if !sample.visibility[j] {
            continue;
        }
        visible += 1;
        if d <= threshold {
            correct += 1;
        }
    }
    if visible == 0 {
        return Err(Error::NoVisibleJoints {
            sample_id: sample.id,
        });
    }
    Ok(100.0 * correct as f64 / visible as f64)
}

/// Per-joint correct rates over a record set, with left/right pairs
/// additionally reported as their average.
#[derive(Debug, Clone, PartialEq)]
pub struct PerJointTable {
    pub joint_names: Vec<String>,
    /// 100 * correct / visible per joint; None when never visible.
    pub rates: Vec<Option<f64>>,
    /// (pair label, average of the two member rates).
    pub pair_averages: Vec<(String, Option<f64>)>,
}

pub fn per_joint_table(records: &[MetricRecord], skeleton: &SkeletonSpec) -> Result<PerJointTable> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no records for per-joint table".into()));
    }
    let k = skeleton.num_joints();
    let mut correct = vec![0usize; k];
    let mut visible = vec![0usize; k];
    for r in records {
        for j in &r.joints {
            if j.visible {
                visible[j.joint] += 1;
                if j.correct {
                    correct[j.joint] += 1;
                }
            }
        }
    }
    let rates: Vec<Option<f64>> = (0..k)
        .map(|j| {
            if visible[j] == 0 {
                None
            } else {
                Some(100.0 * correct[j] as f64 / visible[j] as f64)
            }
        })
        .collect();
    let pair_averages = skeleton
        .symmetry_pairs
        .iter()
        .map(|&(l, r)| {
            let label = pair_label(&skeleton.joint_names[l], &skeleton.joint_names[r]);
            let avg = match (rates[l], rates[r]) {
                (Some(a), Some(b)) => Some(0.5 * (a + b)),
                _ => None,
            };
            (label, avg)
        })
        .collect();
    Ok(PerJointTable {
        joint_names: skeleton.joint_names.clone(),
        rates,
        pair_averages,
    })
}

fn pair_label(left: &str, right: &str) -> String {
    let stripped = left.strip_prefix("left_").unwrap_or(left);
    if right.strip_prefix("right_") == Some(stripped) {
        stripped.to_string()
    } else {
        format!("{left}/{right}")
    }
}

/// Heatmap quality: softmax-normalize each predicted channel as
/// log-probabilities, build the ideal truncated Gaussian at the
/// reference joint, and average KL(ideal || predicted) over visible
/// joints.
pub fn heatmap_kl(
    pred_heatmaps: &Tensor,
    reference_joints: &[(f64, f64)],
    visibility: &[bool],
    sigma: f64,
    image_size: (usize, usize),
) -> f64 {
    let shape = pred_heatmaps.shape();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let cells = h * w;
    let cutoff2 = (3.0 * sigma) * (3.0 * sigma);
    let mut total = 0.0;
    let mut counted = 0usize;
    for j in 0..k {
        if !visibility[j] {
            continue;
        }
        let logits = &pred_heatmaps.data()[j * cells..(j + 1) * cells];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();

        let (r0, c0) = joint_cell(reference_joints[j], (h, w), image_size);
        let mut q = vec![0.0; cells];
        let mut qz = 0.0;
        for r in 0..h {
            for c in 0..w {
                let d2 = ((r as isize - r0 as isize).pow(2) + (c as isize - c0 as isize).pow(2))
                    as f64;
                if d2 <= cutoff2 {
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    q[r * w + c] = v;
                    qz += v;
                }
            }
        }
        let mut kl = 0.0;
        for i in 0..cells {
            if q[i] > 0.0 {
                let qi = q[i] / qz;
                let pi = exps[i] / z;
                kl += qi * (qi.ln() - pi.ln());
            }
        }
        total += kl;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpose::{Dataset, SkeletonSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_with(joints: Vec<(f64, f64)>, visibility: Vec<bool>, h: f64, s: f64) -> PoseSample {
        PoseSample {
            image: Tensor::zeros(&[32, 32]),
            joints,
            visibility,
            head_size: h,
            scale: s,
            id: 0,
        }
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let s = sample_with(vec![(1.0, 2.0), (3.0, 4.0)], vec![true, true], 10.0, 5.0);
        let rec = pckh(&s.joints.clone(), &s).unwrap();
        assert_eq!(rec.pckh, 100.0);
        assert_eq!(rec.oks, 1.0);
    }

    #[test]
    fn threshold_is_half_head_size() {
        // h = 10 -> threshold 5; distances 3 and 6 -> one of two correct.
        let s = sample_with(vec![(0.0, 0.0), (10.0, 0.0)], vec![true, true], 10.0, 5.0);
        let pred = vec![(3.0, 0.0), (16.0, 0.0)];
        let rec = pckh(&pred, &s).unwrap();
        assert_eq!(rec.pckh, 50.0);
        assert!(rec.joints[0].correct && !rec.joints[1].correct);
    }

    #[test]
    fn invisible_joints_are_excluded() {
        let s = sample_with(vec![(0.0, 0.0), (10.0, 0.0)], vec![true, false], 10.0, 5.0);
        let pred = vec![(0.0, 0.0), (1000.0, 1000.0)];
        let rec = pckh(&pred, &s).unwrap();
        assert_eq!(rec.pckh, 100.0);
        assert!(!rec.joints[1].correct && !rec.joints[1].visible);
    }

    #[test]
    fn zero_visible_joints_rejected() {
        let s = sample_with(vec![(0.0, 0.0)], vec![false], 10.0, 5.0);
        assert!(matches!(
            pckh(&[(0.0, 0.0)], &s),
            Err(Error::NoVisibleJoints { .. })
        ));
    }

    #[test]
    fn oks_matches_closed_form_at_sqrt2_distance() {
        // d = s * k * sqrt(2) makes the exponent exactly -1.
        let s = sample_with(vec![(0.0, 0.0)], vec![true], 10.0, 7.0);
        let d = 7.0 * OKS_DEFAULT_K * 2.0_f64.sqrt();
        let got = oks(&[(d, 0.0)], &s, &[OKS_DEFAULT_K]).unwrap();
        assert!((got - (-1.0_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn oks_vanishes_at_large_distance() {
        let s = sample_with(vec![(0.0, 0.0)], vec![true], 10.0, 7.0);
        let got = oks(&[(1e6, 0.0)], &s, &[OKS_DEFAULT_K]).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn pckh_and_oks_match_loop_oracles_exactly_on_1000_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..1000 {
            let k = rng.random_range(1..=8usize);
            let joints: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)))
                .collect();
            let pred: Vec<(f64, f64)> = joints
                .iter()
                .map(|&(x, y)| {
                    (
                        x + rng.random_range(-6.0..6.0),
                        y + rng.random_range(-6.0..6.0),
                    )
                })
                .collect();
            let mut visibility: Vec<bool> = (0..k).map(|_| rng.random_range(0.0..1.0) < 0.8).collect();
            if visibility.iter().all(|v| !v) {
                visibility[0] = true;
            }
            let h = rng.random_range(3.0..8.0);
            let sc = rng.random_range(5.0..25.0);
            let s = sample_with(joints.clone(), visibility.clone(), h, sc);

            // Brute-force loop oracle, written from the formulas.
            let mut correct = 0usize;
            let mut visible = 0usize;
            let mut oks_sum = 0.0;
            for j in 0..k {
                if !visibility[j] {
                    continue;
                }
                visible += 1;
                let dx = pred[j].0 - joints[j].0;
                let dy = pred[j].1 - joints[j].1;
                let d = (dx * dx + dy * dy).sqrt();
                if d <= 0.5 * h {
                    correct += 1;
                }
                oks_sum +=
                    (-(dx * dx + dy * dy) / (2.0 * sc * sc * OKS_DEFAULT_K * OKS_DEFAULT_K)).exp();
            }
            let expected_pckh = 100.0 * correct as f64 / visible as f64;
            let expected_oks = oks_sum / visible as f64;

            let rec = pckh(&pred, &s).unwrap();
            assert_eq!(rec.pckh, expected_pckh, "case {case}");
            assert_eq!(rec.oks, expected_oks, "case {case}");
        }
    }

    #[test]
    fn pckh_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let joints: Vec<(f64, f64)> = (0..5)
                .map(|_| (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)))
                .collect();
            let pred: Vec<(f64, f64)> = joints
                .iter()
                .map(|&(x, y)| (x + rng.random_range(-3.0..3.0), y + rng.random_range(-3.0..3.0)))
                .collect();
            let (tx, ty) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let s1 = sample_with(joints.clone(), vec![true; 5], 5.0, 10.0);
            let moved: Vec<(f64, f64)> = joints.iter().map(|&(x, y)| (x + tx, y + ty)).collect();
            let s2 = sample_with(moved, vec![true; 5], 5.0, 10.0);
            let pred2: Vec<(f64, f64)> = pred.iter().map(|&(x, y)| (x + tx, y + ty)).collect();
            assert_eq!(pckh(&pred, &s1).unwrap().pckh, pckh(&pred2, &s2).unwrap().pckh);
        }
    }

    #[test]
    fn oks_is_invariant_under_joint_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let joints: Vec<(f64, f64)> = (0..4)
                .map(|_| (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)))
                .collect();
            let pred: Vec<(f64, f64)> = joints
                .iter()
                .map(|&(x, y)| (x + rng.random_range(-3.0..3.0), y + rng.random_range(-3.0..3.0)))
                .collect();
            let sc = rng.random_range(5.0..20.0);
            let factor = rng.random_range(0.5..4.0);
            let s1 = sample_with(joints.clone(), vec![true; 4], 5.0, sc);
            let s2 = sample_with(
                joints.iter().map(|&(x, y)| (x * factor, y * factor)).collect(),
                vec![true; 4],
                5.0,
                sc * factor,
            );
            let pred2: Vec<(f64, f64)> =
                pred.iter().map(|&(x, y)| (x * factor, y * factor)).collect();
            let ks = vec![OKS_DEFAULT_K; 4];
            let a = oks(&pred, &s1, &ks).unwrap();
            let b = oks(&pred2, &s2, &ks).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_pckh_examples() {
        assert_eq!(relative_pckh(40.0, 80.0).unwrap(), 50.0);
        assert_eq!(relative_pckh(80.0, 80.0).unwrap(), 100.0);
        assert_eq!(relative_pckh(0.0, 80.0).unwrap(), 0.0);
        assert!(matches!(relative_pckh(10.0, 0.0), Err(Error::ZeroBaseline)));
    }

    #[test]
    fn targeted_pckh_examples() {
        let s = sample_with(
            vec![(0.0, 0.0), (10.0, 0.0), (20.0, 0.0), (30.0, 0.0)],
            vec![true; 4],
            4.0,
            10.0,
        );
        let target: Vec<(f64, f64)> = vec![(0.0, 20.0), (10.0, 20.0), (20.0, 20.0), (30.0, 20.0)];
        // Prediction equal to the target scores 100.
        assert_eq!(targeted_pckh(&target, &target, &s).unwrap(), 100.0);
        // Prediction equal to ground truth scores 0 (target 20px away, threshold 2).
        assert_eq!(targeted_pckh(&s.joints.clone(), &target, &s).unwrap(), 0.0);
        // Half the joints moved onto the target -> 50.
        let mixed = vec![(0.0, 20.0), (10.0, 20.0), (20.0, 0.0), (30.0, 0.0)];
        assert_eq!(targeted_pckh(&mixed, &target, &s).unwrap(), 50.0);
    }

    #[test]
    fn per_joint_table_examples() {
        let spec = SkeletonSpec::five_joint();
        let ds = Dataset::generate(&spec, 10, 7, 0.0);
        // All-perfect predictions.
        let perfect: Vec<MetricRecord> = ds
            .samples
            .iter()
            .map(|s| pckh(&s.joints.clone(), s).unwrap())
            .collect();
        let table = per_joint_table(&perfect, &spec).unwrap();
        for rate in table.rates.iter().flatten() {
            assert_eq!(*rate, 100.0);
        }
        assert_eq!(table.pair_averages[0].0, "foot");
        assert_eq!(table.pair_averages[0].1, Some(100.0));

        // Break joint 0 (head) everywhere; others stay perfect.
        let broken: Vec<MetricRecord> = ds
            .samples
            .iter()
            .map(|s| {
                let mut pred = s.joints.clone();
                pred[0] = (pred[0].0 + 100.0, pred[0].1);
                pckh(&pred, s).unwrap()
            })
            .collect();
        let table = per_joint_table(&broken, &spec).unwrap();
        assert_eq!(table.rates[0], Some(0.0));
        for j in 1..5 {
            if let Some(rate) = table.rates[j] {
                assert_eq!(rate, 100.0);
            }
        }
        assert!(per_joint_table(&[], &spec).is_err());
    }

    #[test]
    fn per_joint_table_matches_loop_oracle_on_synthetic_mix() {
        let spec = SkeletonSpec::five_joint();
        let ds = Dataset::generate(&spec, 40, 3, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let records: Vec<MetricRecord> = ds
            .samples
            .iter()
            .map(|s| {
                let pred: Vec<(f64, f64)> = s
                    .joints
                    .iter()
                    .map(|&(x, y)| (x + rng.random_range(-4.0..4.0), y + rng.random_range(-4.0..4.0)))
                    .collect();
                pckh(&pred, s).unwrap()
            })
            .collect();
        let table = per_joint_table(&records, &spec).unwrap();
        for j in 0..5 {
            let mut correct = 0usize;
            let mut visible = 0usize;
            for r in &records {
                if r.joints[j].visible {
                    visible += 1;
                    if r.joints[j].correct {
                        correct += 1;
                    }
                }
            }
            match table.rates[j] {
                Some(rate) => assert_eq!(rate, 100.0 * correct as f64 / visible as f64),
                None => assert_eq!(visible, 0),
            }
        }
    }

    #[test]
    fn kl_is_zero_when_logits_match_the_ideal_bump() {
        let sigma = 1.0;
        let joints = vec![(10.0, 14.0)];
        // Build the ideal map, renormalize, and feed its log as logits.
        let (h, w) = (16usize, 16usize);
        let (r0, c0) = joint_cell(joints[0], (h, w), (32, 32));
        let mut q = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let d2 = ((r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2)) as f64;
                if d2 <= 9.0 {
                    q[r * w + c] = (-d2 / 2.0).exp();
                }
            }
        }
        let logits: Vec<f64> = q.iter().map(|&v| (v + 1e-300).ln()).collect();
        let pred = Tensor::from_vec(&[1, h, w], logits).unwrap();
        let kl = heatmap_kl(&pred, &joints, &[true], sigma, (32, 32));
        assert!(kl.abs() < 1e-9, "kl = {kl}");
    }

    #[test]
    fn kl_is_nonnegative_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..256).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pred = Tensor::from_vec(&[1, 16, 16], logits).unwrap();
            let joints = vec![(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0))];
            let kl = heatmap_kl(&pred, &joints, &[true], 1.0, (32, 32));
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn bimodal_maps_score_higher_kl_than_unimodal() {
        let (h, w) = (16usize, 16usize);
        let joints = vec![(8.0, 8.0)];
        let (r0, c0) = joint_cell(joints[0], (h, w), (32, 32));
        let bump = |r0: usize, c0: usize, out: &mut [f64]| {
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
                    out[r * w + c] += 4.0 * (-d2 / 2.0).exp();
                }
            }
        };
        let mut uni = vec![0.0; h * w];
        bump(r0, c0, &mut uni);
        let mut bi = vec![0.0; h * w];
        bump(r0, c0, &mut bi);
        bump(12, 13, &mut bi);
        let kl_uni = heatmap_kl(
            &Tensor::from_vec(&[1, h, w], uni).unwrap(),
            &joints,
            &[true],
            1.0,
            (32, 32),
        );
        let kl_bi = heatmap_kl(
            &Tensor::from_vec(&[1, h, w], bi).unwrap(),
            &joints,
            &[true],
            1.0,
            (32, 32),
        );
        assert!(kl_bi > kl_uni, "bimodal {kl_bi} <= unimodal {kl_uni}");
    }

    #[test]
    fn ground_truth_scores_perfect_pckh_on_generated_data() {
        let spec = SkeletonSpec::five_joint();
        let ds = Dataset::generate(&spec, 50, 7, 0.3);
        let records: Vec<MetricRecord> = ds
            .samples
            .iter()
            .map(|s| pckh(&s.joints.clone(), s).unwrap())
            .collect();
        assert_eq!(aggregate_pckh(&records), 100.0);
    }
}
