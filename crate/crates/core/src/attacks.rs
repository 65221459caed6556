//! Gradient-sign attack family: single-step FGSM, iterated IGSM with
//! box clipping against the original image, universal perturbations
//! trained over a dataset, and the plumbing to apply stored
//! perturbations to arbitrary images (black-box transfer).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::diffnet::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::models::{
    labels_for_joints, labels_for_sample, training_loss, Labels, LossSurface, PoseModel,
    LABEL_SIGMA,
};
use crate::synthpose::{PoseSample, SkeletonSpec};

pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    FgsmU,
    FgsmT,
    IgsmU,
    IgsmT,
    Uap,
}

impl AttackKind {
    pub fn is_targeted(self) -> bool {
        matches!(self, AttackKind::FgsmT | AttackKind::IgsmT)
    }
}

/// Step size: fixed, or derived from epsilon inside the ranges the
/// iterated attacks tolerate (epsilon/2.5 untargeted, epsilon/8
/// targeted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, rename_all = "lowercase")]
pub enum Alpha {
    Fixed(f64),
    Auto(AutoAlpha),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoAlpha {
    Auto,
}

pub const AUTO: Alpha = Alpha::Auto(AutoAlpha::Auto);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget in 0-255 pixel units.
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: Alpha,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_surface")]
    pub loss_surface: LossSurface,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> Alpha {
    AUTO
}
fn default_iterations() -> usize {
    1
}
fn default_surface() -> LossSurface {
    LossSurface::Last
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        AttackConfig {
            kind,
            epsilon,
            alpha: AUTO,
            iterations: match kind {
                AttackKind::FgsmU | AttackKind::FgsmT => 1,
                AttackKind::IgsmU => 10,
                AttackKind::IgsmT => 20,
                AttackKind::Uap => 1,
            },
            loss_surface: LossSurface::Last,
            seed: 0,
        }
    }

    /// Named presets: fgsm-u, fgsm-t, igsm-u-10, igsm-t-20, igsm-u-100,
    /// igsm-t-100.
    pub fn preset(name: &str, epsilon: f64) -> Option<Self> {
        let (kind, iterations) = match name {
            "fgsm-u" => (AttackKind::FgsmU, 1),
            "fgsm-t" => (AttackKind::FgsmT, 1),
            "igsm-u-10" => (AttackKind::IgsmU, 10),
            "igsm-t-20" => (AttackKind::IgsmT, 20),
            "igsm-u-100" => (AttackKind::IgsmU, 100),
            "igsm-t-100" => (AttackKind::IgsmT, 100),
            _ => return None,
        };
        let mut cfg = AttackConfig::new(kind, epsilon);
        cfg.iterations = iterations;
        Some(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=PIXEL_MAX).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} outside [0, 255]",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if let Alpha::Fixed(a) = self.alpha {
            if a < 0.0 || a > self.epsilon {
                return Err(Error::InvalidConfig(format!(
                    "alpha {a} outside [0, epsilon={}]",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_alpha(&self) -> f64 {
        match self.alpha {
            Alpha::Fixed(a) => a,
            Alpha::Auto(_) => {
                if self.kind.is_targeted() {
                    self.epsilon / 8.0
                } else {
                    self.epsilon / 2.5
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub attack: String,
    /// Fraction of the training set used (universal perturbations).
    pub data_budget: Option<f64>,
    pub seed: u64,
}

/// Additive noise field with its recorded budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub noise: Tensor,
    pub epsilon: f64,
    pub provenance: Provenance,
}

impl Perturbation {
    pub fn linf(&self) -> f64 {
        self.noise.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct TargetPose {
    pub joints: Vec<(f64, f64)>,
    pub source_id: u64,
}

/// Result of an image-specific attack.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub perturbation: Perturbation,
    pub image: Tensor,
    /// Objective value at the start of each iteration.
    pub loss_trace: Vec<f64>,
}

/// sign with sign(0) = 0: a zero gradient perturbs nothing.
pub fn grad_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `candidate` into the epsilon box around `origin`, then into
/// the valid pixel range.
pub fn clip_box(origin: &Tensor, candidate: &Tensor, epsilon: f64) -> Result<Tensor> {
    if origin.shape() != candidate.shape() {
        return Err(Error::ShapeMismatch {
            context: "clip_box",
            expected: origin.shape().to_vec(),
            actual: candidate.shape().to_vec(),
        });
    }
    let data = origin
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(&o, &c)| c.clamp(o - epsilon, o + epsilon).clamp(PIXEL_MIN, PIXEL_MAX))
        .collect();
    Tensor::from_vec(origin.shape(), data)
}

/// Anything that exposes a differentiable scalar objective of the input
/// image. Attacks only ever see this surface, which keeps the stepping
/// logic testable against hand-derived toy objectives.
pub trait AttackObjective {
    fn loss_and_input_grad(&self, image: &Tensor) -> Result<(f64, Vec<f64>)>;
}

/// Model loss against fixed labels (ground truth or a target pose).
pub struct ModelObjective<'a> {
    model: &'a PoseModel,
    labels: Labels,
    surface: LossSurface,
}

impl<'a> ModelObjective<'a> {
    pub fn untargeted(model: &'a PoseModel, sample: &PoseSample, surface: LossSurface) -> Self {
        ModelObjective {
            model,
            labels: labels_for_sample(model.config(), sample, LABEL_SIGMA),
            surface,
        }
    }

    pub fn targeted(
        model: &'a PoseModel,
        sample: &PoseSample,
        target: &TargetPose,
        surface: LossSurface,
    ) -> Self {
        ModelObjective {
            model,
            labels: labels_for_joints(
                model.config(),
                &target.joints,
                &sample.visibility,
                LABEL_SIGMA,
            ),
            surface,
        }
    }
}

impl AttackObjective for ModelObjective<'_> {
    fn loss_and_input_grad(&self, image: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut graph = Graph::new();
        let pass = self.model.forward_graph(&mut graph, image, true, false)?;
        let loss = training_loss(&mut graph, &pass, &self.labels, self.surface)?;
        let value = graph.value(loss).item();
        graph.backward(loss)?;
        let grad = graph.grad(pass.input).to_vec();
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(
                "attack objective produced NaN/Inf".into(),
            ));
        }
        Ok((value, grad))
    }
}

/// Shared stepping core. `ascend` walks up the objective (untargeted),
/// otherwise down (targeted); every iterate is clipped against the
/// original image. FGSM is the single-iteration, alpha = epsilon case,
/// so the two stay bit-identical by construction.
pub fn gradient_sign_iterate(
    objective: &dyn AttackObjective,
    origin: &Tensor,
    epsilon: f64,
    alpha: f64,
    iterations: usize,
    ascend: bool,
) -> Result<(Tensor, Vec<f64>)> {
    let direction = if ascend { 1.0 } else { -1.0 };
    let mut current = origin.clone();
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (loss, grad) = objective.loss_and_input_grad(&current)?;
        trace.push(loss);
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(&grad)
            .map(|(&x, &g)| x + direction * alpha * grad_sign(g))
            .collect();
        let stepped = Tensor::from_vec(current.shape(), stepped)?;
        current = clip_box(origin, &stepped, epsilon)?;
    }
    Ok((current, trace))
}

fn outcome(
    origin: &Tensor,
    image: Tensor,
    trace: Vec<f64>,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    let noise: Vec<f64> = image
        .data()
        .iter()
        .zip(origin.data())
        .map(|(a, b)| a - b)
        .collect();
    Ok(AttackOutcome {
        perturbation: Perturbation {
            noise: Tensor::from_vec(origin.shape(), noise)?,
            epsilon: config.epsilon,
            provenance: Provenance {
                model: String::new(),
                attack: format!("{:?}", config.kind).to_lowercase(),
                data_budget: None,
                seed: config.seed,
            },
        },
        image,
        loss_trace: trace,
    })
}

/// Single-step untargeted attack: step along sign(grad) of the loss
/// against ground truth, scaled by the full budget.
pub fn fgsm_untargeted(
    model: &PoseModel,
    sample: &PoseSample,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    if config.kind != AttackKind::FgsmU {
        return Err(Error::InvalidConfig(format!(
            "fgsm_untargeted called with {:?}",
            config.kind
        )));
    }
    let objective = ModelObjective::untargeted(model, sample, config.loss_surface);
    let (image, trace) =
        gradient_sign_iterate(&objective, &sample.image, config.epsilon, config.epsilon, 1, true)?;
    outcome(&sample.image, image, trace, config)
}

/// Single-step targeted attack: step against the gradient of the loss
/// toward the target pose.
pub fn fgsm_targeted(
    model: &PoseModel,
    sample: &PoseSample,
    target: &TargetPose,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    if config.kind != AttackKind::FgsmT {
        return Err(Error::InvalidConfig(format!(
            "fgsm_targeted called with {:?}",
            config.kind
        )));
    }
    let objective = ModelObjective::targeted(model, sample, target, config.loss_surface);
    let (image, trace) =
        gradient_sign_iterate(&objective, &sample.image, config.epsilon, config.epsilon, 1, false)?;
    outcome(&sample.image, image, trace, config)
}

/// Iterated attack; untargeted when `target` is None. Each step is
/// clipped against the original image, never the previous iterate.
pub fn igsm(
    model: &PoseModel,
    sample: &PoseSample,
    target: Option<&TargetPose>,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    let alpha = config.resolved_alpha();
    let (objective, ascend): (ModelObjective, bool) = match target {
        None => (
            ModelObjective::untargeted(model, sample, config.loss_surface),
            true,
        ),
        Some(t) => (
            ModelObjective::targeted(model, sample, t, config.loss_surface),
            false,
        ),
    };
    let (image, trace) = gradient_sign_iterate(
        &objective,
        &sample.image,
        config.epsilon,
        alpha,
        config.iterations,
        ascend,
    )?;
    outcome(&sample.image, image, trace, config)
}

/// Picks a target pose from the pool: candidates are rigidly translated
/// so their root lands at the image center, then filtered to PCKh
/// exactly 0 against the attacked sample's ground truth; one is chosen
/// uniformly by the seeded RNG.
pub fn select_target_pose(
    sample: &PoseSample,
    pool: &[PoseSample],
    skeleton: &SkeletonSpec,
    seed: u64,
) -> Result<TargetPose> {
    let (img_h, img_w) = skeleton.image_size;
    let center = ((img_w as f64 - 1.0) / 2.0, (img_h as f64 - 1.0) / 2.0);
    let threshold = 0.5 * sample.head_size;
    let mut candidates = Vec::new();
    let mut near_misses = 0usize;
    let mut examined = 0usize;
    for p in pool {
        if p.id == sample.id {
            continue;
        }
        examined += 1;
        let root = p.joints[skeleton.root];
        let translated: Vec<(f64, f64)> = p
            .joints
            .iter()
            .map(|&(x, y)| (x + center.0 - root.0, y + center.1 - root.1))
            .collect();
        let mut hits = 0usize;
        for (j, &(x, y)) in translated.iter().enumerate() {
            if !sample.visibility[j] {
                continue;
            }
            let gt = sample.joints[j];
            let d = ((x - gt.0).powi(2) + (y - gt.1).powi(2)).sqrt();
            if d <= threshold {
                hits += 1;
            }
        }
        match hits {
            0 => candidates.push(TargetPose {
                joints: translated,
                source_id: p.id,
            }),
            1 => near_misses += 1,
            _ => {}
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoTargetPose {
            candidates: examined,
            near_misses,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rng.random_range(0..candidates.len());
    Ok(candidates.swap_remove(idx))
}

/// Universal perturbation training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UapConfig {
    pub epsilon: f64,
    /// Per-update step; defaults to epsilon / 200.
    pub delta: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default = "default_surface")]
    pub loss_surface: LossSurface,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    16
}
fn default_passes() -> usize {
    8
}

impl UapConfig {
    pub fn new(epsilon: f64) -> Self {
        UapConfig {
            epsilon,
            delta: None,
            batch_size: default_batch(),
            passes: default_passes(),
            loss_surface: LossSurface::Last,
            seed: 0,
        }
    }

    pub fn resolved_delta(&self) -> f64 {
        self.delta.unwrap_or(self.epsilon / 200.0)
    }
}

#[derive(Debug)]
pub struct UapOutcome {
    pub perturbation: Perturbation,
    /// Batches dropped because a gradient came back non-finite.
    pub skipped_batches: usize,
    pub updates: usize,
}

/// Trains an image-agnostic noise field: walk the mini-batches in the
/// order given, evaluate the mean input gradient at the currently
/// perturbed images, and take a sign step of delta, clamped to the
/// epsilon ball after every update.
pub fn train_uap(model: &PoseModel, train: &[PoseSample], config: &UapConfig) -> Result<UapOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty UAP training set".into()));
    }
    let delta = config.resolved_delta();
    let (h, w) = model.config().input_size;
    let mut noise = vec![0.0; h * w];
    let mut skipped = 0usize;
    let mut updates = 0usize;
    for _ in 0..config.passes {
        'batches: for batch in train.chunks(config.batch_size) {
            let mut mean_grad = vec![0.0; h * w];
            for s in batch {
                let perturbed = add_and_clamp(&s.image, &noise)?;
                let objective = ModelObjective::untargeted(model, s, config.loss_surface);
                match objective.loss_and_input_grad(&perturbed) {
                    Ok((_, grad)) => {
                        for (m, g) in mean_grad.iter_mut().zip(&grad) {
                            *m += g;
                        }
                    }
                    Err(Error::NonFiniteGradient(_)) => {
                        skipped += 1;
                        continue 'batches;
                    }
                    Err(e) => return Err(e),
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for (u, m) in noise.iter_mut().zip(&mean_grad) {
                *u = (*u + delta * grad_sign(m * inv)).clamp(-config.epsilon, config.epsilon);
            }
            updates += 1;
        }
    }
    Ok(UapOutcome {
        perturbation: Perturbation {
            noise: Tensor::from_vec(&[h, w], noise)?,
            epsilon: config.epsilon,
            provenance: Provenance {
                model: String::new(),
                attack: "uap".into(),
                data_budget: None,
                seed: config.seed,
            },
        },
        skipped_batches: skipped,
        updates,
    })
}

fn add_and_clamp(image: &Tensor, noise: &[f64]) -> Result<Tensor> {
    let data = image
        .data()
        .iter()
        .zip(noise)
        .map(|(&p, &n)| (p + n).clamp(PIXEL_MIN, PIXEL_MAX))
        .collect();
    Tensor::from_vec(image.shape(), data)
}

/// Adds stored noise to any image and clamps to the pixel range; this
/// is the application path for universal perturbations and black-box
/// transfer.
pub fn apply_perturbation(image: &Tensor, perturbation: &Perturbation) -> Result<Tensor> {
    if image.shape() != perturbation.noise.shape() {
        return Err(Error::ShapeMismatch {
            context: "apply_perturbation",
            expected: image.shape().to_vec(),
            actual: perturbation.noise.shape().to_vec(),
        });
    }
    add_and_clamp(image, perturbation.noise.data())
}

/// Affine rescale of the noise field to 0..255 bytes for inspection;
/// constant noise maps to mid-gray.
pub fn visualize_perturbation(perturbation: &Perturbation) -> (Vec<u8>, usize, usize) {
    let shape = perturbation.noise.shape();
    let (h, w) = (shape[0], shape[1]);
    let data = perturbation.noise.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bytes = if max > min {
        data.iter()
            .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128u8; data.len()]
    };
    (bytes, h, w)
}

// ---------------------------------------------------------------------
// PBU1 file format
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PerturbationHeader {
    epsilon: f64,
    provenance: Provenance,
    shape: Vec<usize>,
}

impl Perturbation {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = PerturbationHeader {
            epsilon: self.epsilon,
            provenance: self.provenance.clone(),
            shape: self.noise.shape().to_vec(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        crate::synthpose::write_magic_and_header(&mut out, b"PBU1", &header_json);
        crate::synthpose::write_f64s(&mut out, self.noise.data());
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Perturbation> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (header_json, mut at) = crate::synthpose::read_magic_and_header(&bytes, b"PBU1")?;
        let header: PerturbationHeader = serde_json::from_slice(header_json)?;
        let n: usize = header.shape.iter().product();
        let noise = crate::synthpose::read_f64s(&bytes, &mut at, n)?;
        Ok(Perturbation {
            noise: Tensor::from_vec(&header.shape, noise)?,
            epsilon: header.epsilon,
            provenance: header.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::models::{build_model, ModelConfig};
    use crate::synthpose::{Dataset, SkeletonSpec};

    fn sample_fixture(n: usize, seed: u64) -> Vec<PoseSample> {
        Dataset::generate(&SkeletonSpec::five_joint(), n, seed, 0.3).samples
    }

    fn flat_sample(fill: f64) -> PoseSample {
        PoseSample {
            image: Tensor::from_vec(&[32, 32], vec![fill; 1024]).unwrap(),
            joints: vec![(16.0, 6.0), (16.0, 11.0), (16.0, 20.0), (12.0, 28.0), (20.0, 28.0)],
            visibility: vec![true; 5],
            head_size: 5.0,
            scale: 22.0,
            id: 999,
        }
    }

    #[test]
    fn clip_box_examples() {
        let origin = Tensor::from_vec(&[3], vec![100.0, 100.0, 2.0]).unwrap();
        let cand = Tensor::from_vec(&[3], vec![120.0, 104.0, -10.0]).unwrap();
        let clipped = clip_box(&origin, &cand, 8.0).unwrap();
        assert_eq!(clipped.data(), &[108.0, 104.0, 0.0]);
    }

    #[test]
    fn clip_box_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(clip_box(&a, &b, 1.0).is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(grad_sign(0.0), 0.0);
        assert_eq!(grad_sign(5.0), 1.0);
        assert_eq!(grad_sign(-0.2), -1.0);
    }

    /// loss = (w*x - target)^2 via the graph; gradient 2(wx-t)w.
    struct LinearSurrogate {
        w: f64,
        target: f64,
    }

    impl AttackObjective for LinearSurrogate {
        fn loss_and_input_grad(&self, image: &Tensor) -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let mut x = image.clone();
            x.set_requires_grad(true);
            let x = g.leaf(x);
            let w = g.constant(Tensor::from_vec(&[1, 1], vec![self.w]).unwrap());
            let b = g.constant(Tensor::zeros(&[1]));
            let f = g.dense(x, w, b)?;
            let t = g.constant(Tensor::scalar(self.target));
            let loss = g.mse(f, t)?;
            let v = g.value(loss).item();
            g.backward(loss)?;
            Ok((v, g.grad(x).to_vec()))
        }
    }

    #[test]
    fn untargeted_surrogate_steps_uphill() {
        // f(x) = 2x, y = 0, x = 1: dL/dx = 8 > 0, so x^p = x + eps.
        let obj = LinearSurrogate { w: 2.0, target: 0.0 };
        let origin = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let (out, trace) = gradient_sign_iterate(&obj, &origin, 0.5, 0.5, 1, true).unwrap();
        assert_eq!(out.data(), &[1.5]);
        assert_eq!(trace, vec![4.0]);
    }

    #[test]
    fn targeted_surrogate_steps_toward_the_target() {
        // f(x) = 2x, target 4, x = 1: dL/dx = -8, descend step is +eps,
        // f moves from 2 to 3, closer to 4.
        let obj = LinearSurrogate { w: 2.0, target: 4.0 };
        let origin = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let (out, _) = gradient_sign_iterate(&obj, &origin, 0.5, 0.5, 1, false).unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn zero_epsilon_attack_is_identity() {
        let model = build_model(&ModelConfig::heatmap(5, 4, 1), 5).unwrap();
        let sample = &sample_fixture(1, 3)[0];
        let cfg = AttackConfig::new(AttackKind::FgsmU, 0.0);
        let out = fgsm_untargeted(&model, sample, &cfg).unwrap();
        assert_eq!(out.image.data(), sample.image.data());
        assert_eq!(out.perturbation.linf(), 0.0);
    }

    #[test]
    fn fully_masked_sample_yields_identity_perturbation() {
        let model = build_model(&ModelConfig::heatmap(5, 4, 1), 5).unwrap();
        let mut sample = sample_fixture(1, 3).remove(0);
        sample.visibility = vec![false; 5];
        let cfg = AttackConfig::new(AttackKind::FgsmU, 8.0);
        let out = fgsm_untargeted(&model, &sample, &cfg).unwrap();
        assert_eq!(out.image.data(), sample.image.data());
    }

    #[test]
    fn targeted_at_ground_truth_negates_the_untargeted_step() {
        // Same loss landscape measured to y vs to P^t = y; interior
        // pixel values keep the box clamp out of play.
        let model = build_model(&ModelConfig::heatmap(5, 4, 1), 5).unwrap();
        let sample = flat_sample(100.0);
        let target = TargetPose {
            joints: sample.joints.clone(),
            source_id: 1,
        };
        let ucfg = AttackConfig::new(AttackKind::FgsmU, 4.0);
        let tcfg = AttackConfig::new(AttackKind::FgsmT, 4.0);
        let u = fgsm_untargeted(&model, &sample, &ucfg).unwrap();
        let t = fgsm_targeted(&model, &sample, &target, &tcfg).unwrap();
        for (a, b) in u.perturbation.noise.data().iter().zip(t.perturbation.noise.data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn igsm_single_step_with_full_alpha_bit_equals_fgsm() {
        let model = build_model(&ModelConfig::heatmap(5, 4, 2), 7).unwrap();
        let sample = &sample_fixture(1, 9)[0];
        let fcfg = AttackConfig::new(AttackKind::FgsmU, 8.0);
        let mut icfg = AttackConfig::new(AttackKind::IgsmU, 8.0);
        icfg.alpha = Alpha::Fixed(8.0);
        icfg.iterations = 1;
        let f = fgsm_untargeted(&model, sample, &fcfg).unwrap();
        let i = igsm(&model, sample, None, &icfg).unwrap();
        assert_eq!(f.image.data(), i.image.data());
        assert_eq!(f.loss_trace, i.loss_trace);
    }

    #[test]
    fn iterated_attacks_respect_the_budget_and_pixel_range() {
        let model = build_model(&ModelConfig::heatmap(5, 4, 1), 2).unwrap();
        for (i, sample) in sample_fixture(3, 17).iter().enumerate() {
            for &eps in &[0.25, 8.0, 32.0] {
                let mut cfg = AttackConfig::new(AttackKind::IgsmU, eps);
                cfg.iterations = 3;
                let out = igsm(&model, sample, None, &cfg).unwrap();
                let linf = out.image.linf_distance(&sample.image);
                assert!(linf <= eps + 1e-9, "sample {i} eps {eps}: linf {linf}");
                for v in out.image.data() {
                    assert!(*v >= 0.0 && *v <= 255.0);
                }
            }
        }
    }

    #[test]
    fn igsm_loss_trace_has_one_entry_per_iteration() {
        let model = build_model(&ModelConfig::heatmap(5, 4, 1), 2).unwrap();
        let sample = &sample_fixture(1, 4)[0];
        let mut cfg = AttackConfig::new(AttackKind::IgsmU, 8.0);
        cfg.iterations = 5;
        let out = igsm(&model, sample, None, &cfg).unwrap();
        assert_eq!(out.loss_trace.len(), 5);
    }

    #[test]
    fn target_selection_is_seeded_and_centered() {
        let skeleton = SkeletonSpec::five_joint();
        let pool = sample_fixture(60, 21);
        let sample = &pool[0];
        let a = select_target_pose(sample, &pool, &skeleton, 5).unwrap();
        let b = select_target_pose(sample, &pool, &skeleton, 5).unwrap();
        assert_eq!(a.source_id, b.source_id);
        assert_ne!(a.source_id, sample.id);
        // Root translated to the image center.
        let root = a.joints[skeleton.root];
        assert!((root.0 - 15.5).abs() < 1e-12 && (root.1 - 15.5).abs() < 1e-12);
        // Definitional guarantee: prediction == ground truth scores 0
        // against any selected target.
        let t = metrics::targeted_pckh(&sample.joints, &a.joints, sample).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn pool_without_zero_overlap_pose_is_rejected() {
        let skeleton = SkeletonSpec::five_joint();
        let sample = sample_fixture(1, 21).remove(0);
        // Only the sample itself in the pool: excluded by id.
        let err = select_target_pose(&sample, &[sample.clone()], &skeleton, 0).unwrap_err();
        assert!(matches!(err, Error::NoTargetPose { .. }));

        // Center the ground truth itself; an identical pose under a
        // different id then stays glued to it after the centering step,
        // scores PCKh 100, and leaves no usable candidate.
        let mut centered = sample.clone();
        let root = centered.joints[skeleton.root];
        for j in centered.joints.iter_mut() {
            j.0 += 15.5 - root.0;
            j.1 += 15.5 - root.1;
        }
        let mut copy = centered.clone();
        copy.id = 777;
        let err = select_target_pose(&centered, &[copy], &skeleton, 0).unwrap_err();
        assert!(matches!(err, Error::NoTargetPose { .. }));
    }

    #[test]
    fn uap_delta_defaults_to_epsilon_over_200() {
        assert_eq!(UapConfig::new(8.0).resolved_delta(), 0.04);
        assert_eq!(UapConfig::new(16.0).resolved_delta(), 0.08);
    }

    #[test]
    fn uap_noise_stays_inside_the_ball_and_is_deterministic() {
        let model = build_model(&ModelConfig::heatmap(5, 4, 1), 3).unwrap();
        let train = sample_fixture(8, 2);
        let mut cfg = UapConfig::new(4.0);
        cfg.delta = Some(3.0); // oversized steps to stress the clamp
        cfg.passes = 3;
        cfg.batch_size = 4;
        let a = train_uap(&model, &train, &cfg).unwrap();
        let b = train_uap(&model, &train, &cfg).unwrap();
        assert!(a.perturbation.linf() <= 4.0 + 1e-9);
        assert!(a.perturbation.linf() > 0.0);
        assert_eq!(a.perturbation.noise.data(), b.perturbation.noise.data());
        assert_eq!(a.updates, 6);
        assert_eq!(a.skipped_batches, 0);
    }

    #[test]
    fn apply_perturbation_adds_and_clamps() {
        let image = Tensor::from_vec(&[2, 2], vec![250.0, 10.0, 0.0, 128.0]).unwrap();
        let zero = Perturbation {
            noise: Tensor::zeros(&[2, 2]),
            epsilon: 0.0,
            provenance: Provenance::default(),
        };
        assert_eq!(
            apply_perturbation(&image, &zero).unwrap().data(),
            image.data()
        );
        let noise = Perturbation {
            noise: Tensor::from_vec(&[2, 2], vec![16.0, -16.0, -5.0, 1.0]).unwrap(),
            epsilon: 16.0,
            provenance: Provenance::default(),
        };
        let out = apply_perturbation(&image, &noise).unwrap();
        assert_eq!(out.data(), &[255.0, 0.0, 0.0, 129.0]);
        let bad = Perturbation {
            noise: Tensor::zeros(&[3, 3]),
            epsilon: 1.0,
            provenance: Provenance::default(),
        };
        assert!(apply_perturbation(&image, &bad).is_err());
    }

    #[test]
    fn visualization_rescales_to_full_byte_range() {
        let n = 256;
        let ramp: Vec<f64> = (0..n).map(|i| -8.0 + 16.0 * i as f64 / (n - 1) as f64).collect();
        let p = Perturbation {
            noise: Tensor::from_vec(&[16, 16], ramp).unwrap(),
            epsilon: 8.0,
            provenance: Provenance::default(),
        };
        let (bytes, h, w) = visualize_perturbation(&p);
        assert_eq!((h, w), (16, 16));
        for (i, b) in bytes.iter().enumerate() {
            assert_eq!(*b as usize, i);
        }

        let flat = Perturbation {
            noise: Tensor::from_vec(&[2, 2], vec![3.3; 4]).unwrap(),
            epsilon: 8.0,
            provenance: Provenance::default(),
        };
        assert_eq!(visualize_perturbation(&flat).0, vec![128u8; 4]);
    }

    #[test]
    fn perturbation_file_round_trip() {
        let p = Perturbation {
            noise: Tensor::from_vec(&[4, 4], (0..16).map(|i| i as f64 / 3.0).collect()).unwrap(),
            epsilon: 8.0,
            provenance: Provenance {
                model: "heatmap-s2".into(),
                attack: "uap".into(),
                data_budget: Some(0.1),
                seed: 7,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.pbu");
        p.save(&path).unwrap();
        let loaded = Perturbation::load(&path).unwrap();
        assert_eq!(p, loaded);
    }

    #[test]
    fn config_validation_and_presets() {
        assert!(AttackConfig::new(AttackKind::FgsmU, -1.0).validate().is_err());
        assert!(AttackConfig::new(AttackKind::FgsmU, 256.0).validate().is_err());
        assert!(AttackConfig::new(AttackKind::FgsmU, 0.0).validate().is_ok());
        let mut cfg = AttackConfig::new(AttackKind::IgsmU, 8.0);
        cfg.alpha = Alpha::Fixed(9.0);
        assert!(cfg.validate().is_err());

        for (name, kind, n) in [
            ("fgsm-u", AttackKind::FgsmU, 1),
            ("igsm-u-10", AttackKind::IgsmU, 10),
            ("igsm-t-20", AttackKind::IgsmT, 20),
            ("igsm-u-100", AttackKind::IgsmU, 100),
            ("igsm-t-100", AttackKind::IgsmT, 100),
        ] {
            let cfg = AttackConfig::preset(name, 8.0).unwrap();
            assert_eq!(cfg.kind, kind);
            assert_eq!(cfg.iterations, n);
        }
        assert!(AttackConfig::preset("igsm-u-7", 8.0).is_none());

        // Auto step sizes sit at epsilon/2.5 and epsilon/8.
        assert_eq!(AttackConfig::new(AttackKind::IgsmU, 8.0).resolved_alpha(), 3.2);
        assert_eq!(AttackConfig::new(AttackKind::IgsmT, 8.0).resolved_alpha(), 1.0);
    }
}
