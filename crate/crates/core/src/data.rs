//! Synthetic paired video + two-hand skeleton clips.
//!
//! Every class is a parametric two-hand motion: the wrists oscillate along a
//! class-specific direction while the fingers curl at a class-specific
//! frequency. Per-sample phases, amplitudes and placement are random. Frames
//! are Gaussian-blob renderings of the projected joints; keypoints are the
//! raw 3-D joint coordinates. Occlusion blanks video frames only.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::{HAND_JOINTS, SKELETON_FEATURES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Std-dev of Gaussian noise on keypoint coordinates (image units, [-1, 1]).
    pub keypoint_noise: f64,
    /// Per-frame probability that the video frame is blanked.
    pub occlusion_prob: f64,
    /// Std-dev of a per-frame global offset applied to the rendering only
    /// (egocentric camera shake; keypoints are unaffected).
    pub camera_shake: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 16,
            frames: 8,
            height: 32,
            width: 32,
            keypoint_noise: 0.0,
            occlusion_prob: 0.0,
            camera_shake: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return bad("num_classes and samples_per_class must be >= 1");
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames, height and width must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion_prob must lie in [0, 1]");
        }
        if !(self.keypoint_noise.is_finite() && self.keypoint_noise >= 0.0) {
            return bad("keypoint_noise must be finite and >= 0");
        }
        if !(self.camera_shake.is_finite() && self.camera_shake >= 0.0) {
            return bad("camera_shake must be finite and >= 0");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[T, H, W, 3]`, values in [0, 1].
    pub frames: Tensor,
    /// `[T, 126]`: two hands × 21 joints × (x, y, z).
    pub keypoints: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Seeded shuffle, then the first `round(n·val_fraction)` indices go to
    /// validation. Both halves are returned sorted.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        split_indices(self.len(), val_fraction, seed)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let n = self.len();
        let first = self
            .samples
            .first()
            .ok_or(Error::EmptySequence("dataset"))?;
        let fshape = first.frames.shape().to_vec();
        let kshape = first.keypoints.shape().to_vec();
        let mut frames = Vec::with_capacity(n * first.frames.numel());
        let mut keypoints = Vec::with_capacity(n * first.keypoints.numel());
        let mut labels = Vec::with_capacity(n);
        for s in &self.samples {
            if s.frames.shape() != fshape.as_slice() || s.keypoints.shape() != kshape.as_slice() {
                return Err(Error::shape("dataset", "samples have differing shapes"));
            }
            frames.extend_from_slice(s.frames.data());
            keypoints.extend_from_slice(s.keypoints.data());
            labels.push(s.label as f64);
        }
        let mut ck = Checkpoint::default();
        ck.push(
            "frames",
            Tensor::new(&[&[n][..], &fshape].concat(), frames)?,
        );
        ck.push(
            "keypoints",
            Tensor::new(&[&[n][..], &kshape].concat(), keypoints)?,
        );
        ck.push("labels", Tensor::new(&[n], labels)?);
        ck.push("num_classes", Tensor::scalar(self.num_classes as f64)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ck.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("dataset is missing {name}")))
        };
        let frames = get("frames")?;
        let keypoints = get("keypoints")?;
        let labels = get("labels")?;
        let num_classes = get("num_classes")?.item() as usize;
        let n = labels.numel();
        if frames.shape().first() != Some(&n) || keypoints.shape().first() != Some(&n) {
            return Err(Error::Checkpoint(
                "dataset tensors disagree on sample count".into(),
            ));
        }
        let fshape = &frames.shape()[1..];
        let kshape = &keypoints.shape()[1..];
        let fn_ = fshape.iter().product::<usize>();
        let kn = kshape.iter().product::<usize>();
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let label = labels.data()[i];
            if label < 0.0 || label.fract() != 0.0 || label as usize >= num_classes {
                return Err(Error::Checkpoint(format!(
                    "sample {i}: invalid label {label}"
                )));
            }
            samples.push(Sample {
                frames: Tensor::new(fshape, frames.data()[i * fn_..(i + 1) * fn_].to_vec())?,
                keypoints: Tensor::new(kshape, keypoints.data()[i * kn..(i + 1) * kn].to_vec())?,
                label: label as usize,
            });
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.to_checkpoint()?.save_dir(dir, stem)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_dir(dir, stem)?)
    }
}

pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidConfig(
            "val_fraction must lie in [0, 1)".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed);
    idx.shuffle(&mut rng);
    let n_val = (n as f64 * val_fraction).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

// Hand-local finger layout: base angle around the "up" axis and phalanx lengths.
const FINGER_ANGLES: [f64; 5] = [-1.1, -0.45, 0.0, 0.4, 0.8];
const PALM: f64 = 0.35;
const PHALANGES: [f64; 3] = [0.22, 0.16, 0.12];
const HAND_SCALE: f64 = 0.3;
const TIPS: [usize; 5] = [4, 8, 12, 16, 20];

/// 21 joints `(x, y, z)` of one hand; joint 0 is the wrist, then four joints
/// per finger from knuckle to tip. `curl ∈ [0, 1]` bends phalanges out of the
/// image plane, which shortens the fingers in projection.
fn hand_joints(wrist: [f64; 2], rotation: f64, curl: f64, mirror: bool) -> [[f64; 3]; HAND_JOINTS] {
    let mut out = [[0.0; 3]; HAND_JOINTS];
    out[0] = [wrist[0], wrist[1], 0.0];
    let sign = if mirror { -1.0 } else { 1.0 };
    for (f, &angle) in FINGER_ANGLES.iter().enumerate() {
        let a = rotation + sign * angle;
        // "Up" is −y in image coordinates.
        let dir = [a.sin(), -a.cos()];
        let mut p = [
            wrist[0] + HAND_SCALE * PALM * dir[0],
            wrist[1] + HAND_SCALE * PALM * dir[1],
            0.0,
        ];
        out[1 + 4 * f] = p;
        let mut bend = 0.0;
        for (j, &len) in PHALANGES.iter().enumerate() {
            bend += curl * 0.7;
            let planar = HAND_SCALE * len * bend.cos();
            p = [
                p[0] + planar * dir[0],
                p[1] + planar * dir[1],
                p[2] + HAND_SCALE * len * bend.sin(),
            ];
            out[2 + 4 * f + j] = p;
        }
    }
    out
}

struct Motion {
    direction: [f64; 2],
    amplitude: f64,
    phase: f64,
    curl_freq: f64,
    curl_phase: f64,
    centers: [[f64; 2]; 2],
    rotation: [f64; 2],
}

impl Motion {
    fn sample(label: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let theta = PI * label as f64 / num_classes as f64;
        let mut jitter = |r: f64| rng.gen_range(-r..=r);
        let centers = [
            [-0.4 + jitter(0.05), jitter(0.05)],
            [0.4 + jitter(0.05), jitter(0.05)],
        ];
        let rotation = [jitter(0.2), jitter(0.2)];
        Self {
            direction: [theta.cos(), theta.sin()],
            amplitude: rng.gen_range(0.2..0.3),
            phase: rng.gen_range(0.0..2.0 * PI),
            curl_freq: 1.0 + 0.5 * label as f64,
            curl_phase: rng.gen_range(0.0..2.0 * PI),
            centers,
            rotation,
        }
    }

    /// All 42 joints at normalized time `s ∈ [0, 1)`.
    fn joints(&self, s: f64) -> Vec<[f64; 3]> {
        let w = 2.0 * PI * s;
        let offset = self.amplitude * (w + self.phase).sin();
        let curl = 0.5 + 0.5 * (self.curl_freq * w + self.curl_phase).sin();
        let mut out = Vec::with_capacity(2 * HAND_JOINTS);
        for h in 0..2 {
            // The second hand mirrors the first across the vertical axis.
            let dx = if h == 0 {
                self.direction[0]
            } else {
                -self.direction[0]
            };
            let wrist = [
                self.centers[h][0] + offset * dx,
                self.centers[h][1] + offset * self.direction[1],
            ];
            out.extend(hand_joints(wrist, self.rotation[h], curl, h == 1));
        }
        out
    }
}

fn render(joints: &[[f64; 3]], shift: [f64; 2], height: usize, width: usize, out: &mut [f64]) {
    // Blob radius of about one pixel at 32², scaled with resolution.
    let sigma_px = (height.min(width) as f64 / 32.0).max(0.6);
    let reach = (3.0 * sigma_px).ceil() as isize;
    for (j, p) in joints.iter().enumerate() {
        let hand = j / HAND_JOINTS;
        let tip = TIPS.contains(&(j % HAND_JOINTS));
        let cx = (p[0] + shift[0] + 1.0) * 0.5 * width as f64 - 0.5;
        let cy = (p[1] + shift[1] + 1.0) * 0.5 * height as f64 - 0.5;
        let (ix, iy) = (cx.round() as isize, cy.round() as isize);
        for y in (iy - reach)..=(iy + reach) {
            if y < 0 || y >= height as isize {
                continue;
            }
            for x in (ix - reach)..=(ix + reach) {
                if x < 0 || x >= width as isize {
                    continue;
                }
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = (-d2 / (2.0 * sigma_px * sigma_px)).exp();
                let base = (y as usize * width + x as usize) * 3;
                out[base + hand] += v;
                if tip {
                    out[base + 2] += v;
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v = v.min(1.0);
    }
}

/// Class-balanced, label-ordered dataset. Sample `i` draws from its own RNG
/// stream, so the output depends only on the dataset parameters.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let frame_len = h * w * 3;
    let normal = |sd: f64| {
        Normal::new(0.0, sd.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidConfig(e.to_string()))
    };
    let noise = normal(spec.keypoint_noise)?;
    let shake = normal(spec.camera_shake)?;
    let mut samples = Vec::with_capacity(spec.len());
    for label in 0..spec.num_classes {
        for k in 0..spec.samples_per_class {
            let index = label * spec.samples_per_class + k;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64 + 1);
            let motion = Motion::sample(label, spec.num_classes, &mut rng);
            let mut frames = vec![0.0; t * frame_len];
            let mut keypoints = Vec::with_capacity(t * SKELETON_FEATURES);
            for f in 0..t {
                let joints = motion.joints(f as f64 / t as f64);
                let occluded = rng.gen_bool(spec.occlusion_prob);
                let shift = if spec.camera_shake > 0.0 {
                    [shake.sample(&mut rng), shake.sample(&mut rng)]
                } else {
                    [0.0; 2]
                };
                if !occluded {
                    render(
                        &joints,
                        shift,
                        h,
                        w,
                        &mut frames[f * frame_len..(f + 1) * frame_len],
                    );
                }
                for p in &joints {
                    for &c in p {
                        let n = if spec.keypoint_noise > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        keypoints.push(c + n);
                    }
                }
            }
            samples.push(Sample {
                frames: Tensor::new(&[t, h, w, 3], frames)?,
                keypoints: Tensor::new(&[t, SKELETON_FEATURES], keypoints)?,
                label,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes,
    })
}
