//! Image-space defenses: horizontal flip (with prediction un-flipping
//! and left/right label swap) and Gaussian blur.

use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{pckh, MetricRecord};
use crate::models::PoseModel;
use crate::synthpose::{PoseSample, SkeletonSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DefenseKind {
    None,
    Flip,
    Blur { sigma: f64, radius: usize },
}

impl DefenseKind {
    /// Parses the CLI grammar: `none`, `flip`, `blur:<sigma>`.
    pub fn parse(s: &str) -> Result<DefenseKind> {
        match s {
            "none" => Ok(DefenseKind::None),
            "flip" => Ok(DefenseKind::Flip),
            other => {
                if let Some(sigma) = other.strip_prefix("blur:") {
                    let sigma: f64 = sigma
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad blur sigma in {other:?}")))?;
                    DefenseKind::blur(sigma)
                } else {
                    Err(Error::InvalidConfig(format!("unknown defense {other:?}")))
                }
            }
        }
    }

    /// Blur with the default radius ceil(2 sigma).
    pub fn blur(sigma: f64) -> Result<DefenseKind> {
        if sigma <= 0.0 {
            return Err(Error::InvalidConfig("blur sigma must be positive".into()));
        }
        Ok(DefenseKind::Blur {
            sigma,
            radius: (2.0 * sigma).ceil() as usize,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let DefenseKind::Blur { sigma, radius } = self {
            if *sigma <= 0.0 {
                return Err(Error::InvalidConfig("blur sigma must be positive".into()));
            }
            if (*radius as f64) < (2.0 * sigma).ceil() {
                return Err(Error::InvalidConfig(format!(
                    "blur radius {radius} below ceil(2 sigma) = {}",
                    (2.0 * sigma).ceil()
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            DefenseKind::None => "none".into(),
            DefenseKind::Flip => "flip".into(),
            DefenseKind::Blur { sigma, .. } => format!("blur:{sigma}"),
        }
    }
}

/// Horizontal mirror: out(y, x) = in(y, W-1-x). Applying twice is the
/// identity, bit for bit.
pub fn flip_image(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = image.data()[y * w + (w - 1 - x)];
        }
    }
    Tensor::from_vec(&[h, w], out).expect("flip shape")
}

/// Mirrors predicted x-coordinates back into the original frame and
/// swaps left/right joint labels.
pub fn unflip_joints(
    joints: &[(f64, f64)],
    image_width: usize,
    pairs: &[(usize, usize)],
) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = joints
        .iter()
        .map(|&(x, y)| ((image_width - 1) as f64 - x, y))
        .collect();
    for &(l, r) in pairs {
        out.swap(l, r);
    }
    out
}

fn predict_fn(model: &PoseModel) -> impl Fn(&Tensor) -> Result<Vec<(f64, f64)>> + '_ {
    move |image| Ok(model.predict(image)?.joints)
}

/// Flip defense: run the model on the mirrored image, mirror the
/// prediction back, swap symmetric labels, and score against ground
/// truth.
pub fn flip_defense(
    model: &PoseModel,
    sample: &PoseSample,
    image: &Tensor,
    skeleton: &SkeletonSpec,
) -> Result<MetricRecord> {
    flip_defense_with(predict_fn(model), sample, image, skeleton)
}

/// Same, over any prediction function (used to check the scoring math
/// against exactly flip-equivariant toy predictors).
pub fn flip_defense_with<F>(
    predict: F,
    sample: &PoseSample,
    image: &Tensor,
    skeleton: &SkeletonSpec,
) -> Result<MetricRecord>
where
    F: Fn(&Tensor) -> Result<Vec<(f64, f64)>>,
{
    let flipped = flip_image(image);
    let joints = predict(&flipped)?;
    let restored = unflip_joints(&joints, skeleton.image_size.1, &skeleton.symmetry_pairs);
    pckh(&restored, sample)
}

/// Normalized truncated Gaussian kernel of side 2*radius + 1.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let side = 2 * radius + 1;
    let mut kernel = vec![0.0; side * side];
    let mut total = 0.0;
    for dy in 0..side {
        for dx in 0..side {
            let ry = dy as f64 - radius as f64;
            let rx = dx as f64 - radius as f64;
            let v = (-(rx * rx + ry * ry) / (2.0 * sigma * sigma)).exp();
            kernel[dy * side + dx] = v;
            total += v;
        }
    }
    for v in &mut kernel {
        *v /= total;
    }
    kernel
}

/// Convolves with a normalized Gaussian (zero-padded borders) and
/// clamps back to the pixel range.
pub fn blur_image(image: &Tensor, sigma: f64, radius: usize) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let kernel = gaussian_kernel(sigma, radius);
    let side = 2 * radius + 1;
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let sx = x + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let kv = kernel[((dy + r) as usize) * side + (dx + r) as usize];
                    acc += kv * image.data()[(sy as usize) * w + sx as usize];
                }
            }
            out[(y as usize) * w + x as usize] = acc.clamp(0.0, 255.0);
        }
    }
    Tensor::from_vec(&[h, w], out).expect("blur shape")
}

/// Blur defense: smooth the (possibly attacked) image, then score.
pub fn blur_defense(
    model: &PoseModel,
    sample: &PoseSample,
    image: &Tensor,
    sigma: f64,
    radius: usize,
) -> Result<MetricRecord> {
    let smoothed = blur_image(image, sigma, radius);
    let joints = model.predict(&smoothed)?.joints;
    pckh(&joints, sample)
}

/// Scores an image through the given defense.
pub fn defended_record(
    model: &PoseModel,
    sample: &PoseSample,
    image: &Tensor,
    defense: &DefenseKind,
    skeleton: &SkeletonSpec,
) -> Result<MetricRecord> {
    defense.validate()?;
    match defense {
        DefenseKind::None => {
            let joints = model.predict(image)?.joints;
            pckh(&joints, sample)
        }
        DefenseKind::Flip => flip_defense(model, sample, image, skeleton),
        DefenseKind::Blur { sigma, radius } => blur_defense(model, sample, image, *sigma, *radius),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpose::Dataset;

    #[test]
    fn flip_is_an_involution() {
        let ds = Dataset::generate(&SkeletonSpec::five_joint(), 3, 11, 0.5);
        for s in &ds.samples {
            let back = flip_image(&flip_image(&s.image));
            assert_eq!(back.data(), s.image.data());
        }
    }

    #[test]
    fn unflip_swaps_left_right_labels() {
        let joints = vec![(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (10.0, 20.0), (25.0, 20.0)];
        let restored = unflip_joints(&joints, 32, &[(3, 4)]);
        // Mirrored x, feet swapped: old right (25 -> 6) becomes left.
        assert_eq!(restored[3], (31.0 - 25.0, 20.0));
        assert_eq!(restored[4], (31.0 - 10.0, 20.0));
        assert_eq!(restored[0], (30.0, 2.0));
    }

    #[test]
    fn flip_defense_is_exact_for_an_equivariant_predictor() {
        // Toy predictor: body joints at the intensity centroid, feet at
        // the centroids of the left/right image halves. This predictor
        // commutes with mirroring (including the label swap), so the
        // defended score must match direct scoring.
        let spec = SkeletonSpec::five_joint();
        let ds = Dataset::generate(&spec, 5, 3, 0.4);
        let centroid = |img: &Tensor, x0: usize, x1: usize| -> (f64, f64) {
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let (mut sx, mut sy, mut sv) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in x0..x1 {
                    let v = img.data()[y * w + x];
                    sx += v * x as f64;
                    sy += v * y as f64;
                    sv += v;
                }
            }
            (sx / sv, sy / sv)
        };
        let predictor = |img: &Tensor| -> crate::error::Result<Vec<(f64, f64)>> {
            let whole = centroid(img, 0, 32);
            let left = centroid(img, 0, 16);
            let right = centroid(img, 16, 32);
            Ok(vec![whole, whole, whole, left, right])
        };
        for s in &ds.samples {
            let direct = predictor(&s.image).unwrap();
            let direct_rec = pckh(&direct, s).unwrap();
            let defended = flip_defense_with(predictor, s, &s.image, &spec).unwrap();
            assert_eq!(direct_rec.pckh, defended.pckh);
            for (a, b) in direct_rec.joints.iter().zip(&defended.joints) {
                assert!((a.distance - b.distance).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kernel_is_normalized() {
        for (sigma, radius) in [(1.0, 2), (0.5, 1), (2.0, 4)] {
            let k = gaussian_kernel(sigma, radius);
            let total: f64 = k.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_reproduces_the_kernel() {
        let mut img = vec![0.0; 32 * 32];
        img[16 * 32 + 16] = 100.0;
        let image = Tensor::from_vec(&[32, 32], img).unwrap();
        let blurred = blur_image(&image, 1.0, 2);
        let kernel = gaussian_kernel(1.0, 2);
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let got = blurred.data()[((16 + dy) as usize) * 32 + (16 + dx) as usize];
                let expected = 100.0 * kernel[((dy + 2) as usize) * 5 + (dx + 2) as usize];
                assert!((got - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_is_unchanged_in_the_interior() {
        let image = Tensor::from_vec(&[32, 32], vec![77.0; 1024]).unwrap();
        let blurred = blur_image(&image, 1.0, 2);
        for y in 2..30 {
            for x in 2..30 {
                assert!((blurred.data()[y * 32 + x] - 77.0).abs() < 1e-12);
            }
        }
        // Zero-padded borders pull toward black.
        assert!(blurred.data()[0] < 77.0);
    }

    #[test]
    fn defense_parsing() {
        assert_eq!(DefenseKind::parse("none").unwrap(), DefenseKind::None);
        assert_eq!(DefenseKind::parse("flip").unwrap(), DefenseKind::Flip);
        match DefenseKind::parse("blur:1.5").unwrap() {
            DefenseKind::Blur { sigma, radius } => {
                assert_eq!(sigma, 1.5);
                assert_eq!(radius, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(DefenseKind::parse("blur:-1").is_err());
        assert!(DefenseKind::parse("sharpen").is_err());
        assert!(DefenseKind::Blur { sigma: 1.0, radius: 1 }.validate().is_err());
    }
}
