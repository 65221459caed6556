//! Deterministic stick-figure dataset generator. Figures are sampled
//! from an articulated skeleton with bone-length and joint-angle ranges,
//! rendered as anti-aliased strokes plus a filled head disc over a
//! configurable clutter background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::diffnet::Tensor;
use crate::error::{Error, Result};

/// What a bone's joint angle is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AngleReference {
    /// Global vertical; `down = false` points toward the image top.
    Vertical { down: bool },
    /// Direction of an earlier bone, optionally reversed.
    Bone { index: usize, reversed: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    /// Sampled length range in pixels.
    pub length: (f64, f64),
    /// Sampled signed angle range (radians) against `reference`.
    pub angle: (f64, f64),
    pub reference: AngleReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    pub bones: Vec<Bone>,
    pub root: usize,
    pub head_joint: usize,
    /// (left, right) joint index pairs that mirror each other.
    pub symmetry_pairs: Vec<(usize, usize)>,
    /// (left bone, right bone) pairs that share one sampled length.
    pub symmetric_bones: Vec<(usize, usize)>,
    /// Root placement ranges: ((x_min, x_max), (y_min, y_max)).
    pub root_range: ((f64, f64), (f64, f64)),
    pub image_size: (usize, usize),
    /// Probability that one random non-head joint is marked invisible.
    pub invisible_rate: f64,
}

impl SkeletonSpec {
    /// Default five-joint figure on a 32x32 canvas: head, neck, pelvis
    /// and two feet. Ranges are chosen so every joint stays in frame.
    pub fn five_joint() -> Self {
        SkeletonSpec {
            joint_names: vec![
                "head".into(),
                "neck".into(),
                "pelvis".into(),
                "left_foot".into(),
                "right_foot".into(),
            ],
            bones: vec![
                Bone {
                    parent: 2,
                    child: 1,
                    length: (7.0, 9.5),
                    angle: (-0.45, 0.45),
                    reference: AngleReference::Vertical { down: false },
                },
                Bone {
                    parent: 1,
                    child: 0,
                    length: (4.5, 6.0),
                    angle: (-0.35, 0.35),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: false,
                    },
                },
                Bone {
                    parent: 2,
                    child: 3,
                    length: (7.5, 9.8),
                    angle: (0.15, 0.80),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: true,
                    },
                },
                Bone {
                    parent: 2,
                    child: 4,
                    length: (7.5, 9.8),
                    angle: (-0.80, -0.15),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: true,
                    },
                },
            ],
            root: 2,
            head_joint: 0,
            symmetry_pairs: vec![(3, 4)],
            symmetric_bones: vec![(2, 3)],
            root_range: ((13.5, 18.5), (18.5, 21.0)),
            image_size: (32, 32),
            invisible_rate: 0.1,
        }
    }

    /// Nine-joint variant with elbows and hands on a 48x48 canvas.
    pub fn nine_joint() -> Self {
        SkeletonSpec {
            joint_names: vec![
                "head".into(),
                "neck".into(),
                "pelvis".into(),
                "left_foot".into(),
                "right_foot".into(),
                "left_elbow".into(),
                "right_elbow".into(),
                "left_hand".into(),
                "right_hand".into(),
            ],
            bones: vec![
                Bone {
                    parent: 2,
                    child: 1,
                    length: (10.0, 13.0),
                    angle: (-0.4, 0.4),
                    reference: AngleReference::Vertical { down: false },
                },
                Bone {
                    parent: 1,
                    child: 0,
                    length: (6.0, 8.0),
                    angle: (-0.3, 0.3),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: false,
                    },
                },
                Bone {
                    parent: 2,
                    child: 3,
                    length: (10.0, 13.0),
                    angle: (0.15, 0.7),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: true,
                    },
                },
                Bone {
                    parent: 2,
                    child: 4,
                    length: (10.0, 13.0),
                    angle: (-0.7, -0.15),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: true,
                    },
                },
                Bone {
                    parent: 1,
                    child: 5,
                    length: (5.0, 7.0),
                    angle: (0.5, 1.4),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: true,
                    },
                },
                Bone {
                    parent: 1,
                    child: 6,
                    length: (5.0, 7.0),
                    angle: (-1.4, -0.5),
                    reference: AngleReference::Bone {
                        index: 0,
                        reversed: true,
                    },
                },
                Bone {
                    parent: 5,
                    child: 7,
                    length: (4.0, 6.0),
                    angle: (-0.6, 0.6),
                    reference: AngleReference::Bone {
                        index: 4,
                        reversed: false,
                    },
                },
                Bone {
                    parent: 6,
                    child: 8,
                    length: (4.0, 6.0),
                    angle: (-0.6, 0.6),
                    reference: AngleReference::Bone {
                        index: 5,
                        reversed: false,
                    },
                },
            ],
            root: 2,
            head_joint: 0,
            symmetry_pairs: vec![(3, 4), (5, 6), (7, 8)],
            symmetric_bones: vec![(2, 3), (4, 5), (6, 7)],
            root_range: ((20.0, 28.0), (27.0, 31.0)),
            image_size: (48, 48),
            invisible_rate: 0.1,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }
}

/// One rendered figure with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    /// Grayscale image, values in [0, 255].
    pub image: Tensor,
    /// Joint coordinates in pixel units, (x, y) with y growing downward.
    pub joints: Vec<(f64, f64)>,
    pub visibility: Vec<bool>,
    /// Head-bone length; PCKh thresholds at half of this.
    pub head_size: f64,
    /// Bounding-box diagonal of the skeleton, used by OKS.
    pub scale: f64,
    pub id: u64,
}

impl PoseSample {
    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SkeletonSpec,
    pub seed: u64,
    pub clutter: f64,
    pub samples: Vec<PoseSample>,
}

fn rotate(dir: (f64, f64), theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (dir.0 * c - dir.1 * s, dir.0 * s + dir.1 * c)
}

fn normalize(v: (f64, f64)) -> (f64, f64) {
    let n = (v.0 * v.0 + v.1 * v.1).sqrt();
    (v.0 / n, v.1 / n)
}

/// Signed angle rotating `reference` onto `dir`.
pub fn signed_angle(reference: (f64, f64), dir: (f64, f64)) -> f64 {
    let cross = reference.0 * dir.1 - reference.1 * dir.0;
    let dot = reference.0 * dir.0 + reference.1 * dir.1;
    cross.atan2(dot)
}

struct FigureGeometry {
    joints: Vec<(f64, f64)>,
}

fn sample_figure<R: Rng>(spec: &SkeletonSpec, rng: &mut R) -> FigureGeometry {
    let nb = spec.bones.len();
    // Lengths first; right-hand members copy their left partner.
    let mut lengths = vec![0.0; nb];
    for (i, bone) in spec.bones.iter().enumerate() {
        if let Some(&(l, _)) = spec.symmetric_bones.iter().find(|&&(_, r)| r == i) {
            lengths[i] = lengths[l];
        } else {
            lengths[i] = rng.random_range(bone.length.0..=bone.length.1);
        }
    }
    let angles: Vec<f64> = spec
        .bones
        .iter()
        .map(|b| rng.random_range(b.angle.0..=b.angle.1))
        .collect();
    let root_x = rng.random_range(spec.root_range.0 .0..=spec.root_range.0 .1);
    let root_y = rng.random_range(spec.root_range.1 .0..=spec.root_range.1 .1);

    let mut joints = vec![(f64::NAN, f64::NAN); spec.num_joints()];
    joints[spec.root] = (root_x, root_y);
    let mut bone_dirs = vec![(0.0, 0.0); nb];
    for (i, bone) in spec.bones.iter().enumerate() {
        let reference = match bone.reference {
            AngleReference::Vertical { down } => (0.0, if down { 1.0 } else { -1.0 }),
            AngleReference::Bone { index, reversed } => {
                let d = bone_dirs[index];
                if reversed {
                    (-d.0, -d.1)
                } else {
                    d
                }
            }
        };
        let dir = rotate(normalize(reference), angles[i]);
        bone_dirs[i] = dir;
        let p = joints[bone.parent];
        joints[bone.child] = (p.0 + lengths[i] * dir.0, p.1 + lengths[i] * dir.1);
    }
    FigureGeometry { joints }
}

fn dist_point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    };
    let q = (a.0 + t * ab.0, a.1 + t * ab.1);
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

fn stroke_segment(image: &mut [f64], w: usize, h: usize, a: (f64, f64), b: (f64, f64), value: f64) {
    const HALF_WIDTH: f64 = 0.8;
    let x0 = (a.0.min(b.0) - HALF_WIDTH - 1.0).floor().max(0.0) as usize;
    let x1 = (a.0.max(b.0) + HALF_WIDTH + 1.0).ceil().min((w - 1) as f64) as usize;
    let y0 = (a.1.min(b.1) - HALF_WIDTH - 1.0).floor().max(0.0) as usize;
    let y1 = (a.1.max(b.1) + HALF_WIDTH + 1.0).ceil().min((h - 1) as f64) as usize;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let d = dist_point_segment((px as f64, py as f64), a, b);
            let cov = (HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let p = &mut image[py * w + px];
                *p += cov * (value - *p);
            }
        }
    }
}

fn fill_disc(image: &mut [f64], w: usize, h: usize, center: (f64, f64), radius: f64, value: f64) {
    let x0 = (center.0 - radius - 1.0).floor().max(0.0) as usize;
    let x1 = (center.0 + radius + 1.0).ceil().min((w - 1) as f64) as usize;
    let y0 = (center.1 - radius - 1.0).floor().max(0.0) as usize;
    let y1 = (center.1 + radius + 1.0).ceil().min((h - 1) as f64) as usize;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let d = ((px as f64 - center.0).powi(2) + (py as f64 - center.1).powi(2)).sqrt();
            let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let p = &mut image[py * w + px];
                *p += cov * (value - *p);
            }
        }
    }
}

const BONE_VALUE: f64 = 240.0;
const HEAD_VALUE: f64 = 252.0;
const CLUTTER_CAP: f64 = 150.0;

fn render_sample(spec: &SkeletonSpec, geo: &FigureGeometry, visibility: &[bool], clutter: f64, rng: &mut impl Rng) -> Tensor {
    let (h, w) = spec.image_size;
    let mut image = vec![0.0; h * w];

    // Background: random Gaussian blobs, count scaled by clutter level.
    let blobs = (clutter * 10.0).round() as usize;
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(1.5..4.0);
        let amp = rng.random_range(20.0..110.0);
        let x0 = (cx - 3.0 * r).floor().max(0.0) as usize;
        let x1 = (cx + 3.0 * r).ceil().min((w - 1) as f64) as usize;
        let y0 = (cy - 3.0 * r).floor().max(0.0) as usize;
        let y1 = (cy + 3.0 * r).ceil().min((h - 1) as f64) as usize;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
                let p = &mut image[py * w + px];
                *p = (*p + amp * (-d2 / (2.0 * r * r)).exp()).min(CLUTTER_CAP);
            }
        }
    }

    for bone in &spec.bones {
        if visibility[bone.parent] && visibility[bone.child] {
            stroke_segment(
                &mut image,
                w,
                h,
                geo.joints[bone.parent],
                geo.joints[bone.child],
                BONE_VALUE,
            );
        }
    }
    if visibility[spec.head_joint] {
        let head = geo.joints[spec.head_joint];
        let head_bone = spec
            .bones
            .iter()
            .position(|b| b.child == spec.head_joint)
            .expect("head bone");
        let neck = geo.joints[spec.bones[head_bone].parent];
        let h_len = ((head.0 - neck.0).powi(2) + (head.1 - neck.1).powi(2)).sqrt();
        fill_disc(&mut image, w, h, head, h_len / 2.0, HEAD_VALUE);
    }

    Tensor::from_vec(&[h, w], image).expect("render shape")
}

impl Dataset {
    /// Deterministic in (spec, seed): each sample draws from its own
    /// seeded stream, so generation order never matters.
    pub fn generate(spec: &SkeletonSpec, n: usize, seed: u64, clutter: f64) -> Dataset {
        let samples = (0..n)
            .map(|i| generate_sample(spec, seed, i as u64, clutter))
            .collect();
        Dataset {
            spec: spec.clone(),
            seed,
            clutter,
            samples,
        }
    }

    /// Deterministic shuffle-split into (train, val).
    pub fn split(self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        assert!(train_fraction > 0.0 && train_fraction < 1.0);
        let mut samples = self.samples;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        samples.shuffle(&mut rng);
        let train_n = ((train_fraction * samples.len() as f64).round() as usize)
            .clamp(1, samples.len() - 1);
        let val = samples.split_off(train_n);
        let train = Dataset {
            spec: self.spec.clone(),
            seed: self.seed,
            clutter: self.clutter,
            samples,
        };
        let val = Dataset {
            spec: self.spec,
            seed: self.seed,
            clutter: self.clutter,
            samples: val,
        };
        (train, val)
    }
}

fn generate_sample(spec: &SkeletonSpec, seed: u64, index: u64, clutter: f64) -> PoseSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let geo = sample_figure(spec, &mut rng);

    let mut visibility = vec![true; spec.num_joints()];
    let crop_roll: f64 = rng.random_range(0.0..1.0);
    let candidates: Vec<usize> = (0..spec.num_joints())
        .filter(|&j| j != spec.head_joint)
        .collect();
    if crop_roll < spec.invisible_rate {
        let pick = candidates[rng.random_range(0..candidates.len())];
        visibility[pick] = false;
    }

    let image = render_sample(spec, &geo, &visibility, clutter, &mut rng);

    let head_bone = spec
        .bones
        .iter()
        .find(|b| b.child == spec.head_joint)
        .expect("head bone");
    let head = geo.joints[spec.head_joint];
    let neck = geo.joints[head_bone.parent];
    let head_size = ((head.0 - neck.0).powi(2) + (head.1 - neck.1).powi(2)).sqrt();

    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &geo.joints {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let scale = ((max_x - min_x).powi(2) + (max_y - min_y).powi(2)).sqrt();

    PoseSample {
        image,
        joints: geo.joints,
        visibility,
        head_size,
        scale,
        id: index,
    }
}

/// Per-joint Gaussian label maps: peak exactly 1.0 at the cell holding
/// the downscaled joint, exp(-d^2 / (2 sigma^2)) elsewhere, truncated at
/// 3 sigma. Invisible joints get an all-zero channel.
pub fn render_heatmaps(sample: &PoseSample, heatmap_size: (usize, usize), sigma: f64) -> Tensor {
    assert!(sigma > 0.0);
    let (hm_h, hm_w) = heatmap_size;
    let (img_h, img_w) = (sample.image.shape()[0], sample.image.shape()[1]);
    let k = sample.joints.len();
    let mut data = vec![0.0; k * hm_h * hm_w];
    let cutoff2 = (3.0 * sigma) * (3.0 * sigma);
    for (j, &(x, y)) in sample.joints.iter().enumerate() {
        if !sample.visibility[j] {
            continue;
        }
        let c0 = ((x * hm_w as f64 / img_w as f64).floor() as isize).clamp(0, hm_w as isize - 1);
        let r0 = ((y * hm_h as f64 / img_h as f64).floor() as isize).clamp(0, hm_h as isize - 1);
        for r in 0..hm_h {
            for c in 0..hm_w {
                let d2 = ((r as isize - r0) * (r as isize - r0)
                    + (c as isize - c0) * (c as isize - c0)) as f64;
                if d2 <= cutoff2 {
                    data[(j * hm_h + r) * hm_w + c] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Tensor::from_vec(&[k, hm_h, hm_w], data).expect("heatmap shape")
}

/// The heatmap cell a joint falls into, as (row, col).
pub fn joint_cell(
    joint: (f64, f64),
    heatmap_size: (usize, usize),
    image_size: (usize, usize),
) -> (usize, usize) {
    let (hm_h, hm_w) = heatmap_size;
    let (img_h, img_w) = image_size;
    let c = ((joint.0 * hm_w as f64 / img_w as f64).floor() as isize).clamp(0, hm_w as isize - 1);
    let r = ((joint.1 * hm_h as f64 / img_h as f64).floor() as isize).clamp(0, hm_h as isize - 1);
    (r as usize, c as usize)
}

// ---------------------------------------------------------------------
// PBD1 file format
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    spec: SkeletonSpec,
    n: usize,
    seed: u64,
    clutter: f64,
    image_shape: Vec<usize>,
    num_joints: usize,
    ids: Vec<u64>,
}

pub(crate) fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f64s(bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f64>> {
    let need = n * 8;
    if *at + need > bytes.len() {
        return Err(Error::Format("truncated float block".into()));
    }
    let out = bytes[*at..*at + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *at += need;
    Ok(out)
}

pub(crate) fn write_magic_and_header(out: &mut Vec<u8>, magic: &[u8; 4], header_json: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json);
}

pub(crate) fn read_magic_and_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], usize)> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {:?}",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if 12 + len > bytes.len() {
        return Err(Error::Format("truncated header".into()));
    }
    Ok((&bytes[12..12 + len], 12 + len))
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = self.spec.image_size;
        let header = DatasetHeader {
            spec: self.spec.clone(),
            n: self.samples.len(),
            seed: self.seed,
            clutter: self.clutter,
            image_shape: vec![h, w],
            num_joints: self.spec.num_joints(),
            ids: self.samples.iter().map(|s| s.id).collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        write_magic_and_header(&mut out, b"PBD1", &header_json);
        for s in &self.samples {
            write_f64s(&mut out, s.image.data());
            let coords: Vec<f64> = s.joints.iter().flat_map(|&(x, y)| [x, y]).collect();
            write_f64s(&mut out, &coords);
            out.extend(s.visibility.iter().map(|&v| v as u8));
            write_f64s(&mut out, &[s.head_size, s.scale]);
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (header_json, mut at) = read_magic_and_header(&bytes, b"PBD1")?;
        let header: DatasetHeader = serde_json::from_slice(header_json)?;
        let (h, w) = (header.image_shape[0], header.image_shape[1]);
        let k = header.num_joints;
        if header.ids.len() != header.n {
            return Err(Error::Format("id list length mismatch".into()));
        }
        let mut samples = Vec::with_capacity(header.n);
        for i in 0..header.n {
            let image = read_f64s(&bytes, &mut at, h * w)?;
            let coords = read_f64s(&bytes, &mut at, 2 * k)?;
            if at + k > bytes.len() {
                return Err(Error::Format("truncated visibility block".into()));
            }
            let visibility: Vec<bool> = bytes[at..at + k].iter().map(|&b| b != 0).collect();
            at += k;
            let tail = read_f64s(&bytes, &mut at, 2)?;
            samples.push(PoseSample {
                image: Tensor::from_vec(&[h, w], image)?,
                joints: coords.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
                visibility,
                head_size: tail[0],
                scale: tail[1],
                id: header.ids[i],
            });
        }
        Ok(Dataset {
            spec: header.spec,
            seed: header.seed,
            clutter: header.clutter,
            samples,
        })
    }
}
