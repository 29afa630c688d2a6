//! Evaluation and calibration images.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR10_SHAPE: [usize; 3] = [3, 32, 32];
/// One label byte followed by 32×32 R, G and B planes.
pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `C×H×W`, pixel values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

/// Disjoint calibration and evaluation index sets over one sample list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    calibration: Vec<usize>,
    evaluation: Vec<usize>,
}

impl SplitSpec {
    pub fn new(calibration: Vec<usize>, evaluation: Vec<usize>) -> Result<Self> {
        let cal: HashSet<usize> = calibration.iter().copied().collect();
        if let Some(&i) = evaluation.iter().find(|i| cal.contains(i)) {
            return Err(Error::SplitOverlap(i));
        }
        Ok(Self {
            calibration,
            evaluation,
        })
    }

    /// Seed-selected calibration subset of `ceil(fraction · n)` samples; the
    /// rest is the evaluation set. Both keep ascending index order.
    pub fn seeded(n: usize, calibration_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&calibration_fraction) {
            return Err(Error::Config(format!(
                "calibration fraction {calibration_fraction} outside [0, 1]"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((n as f64) * calibration_fraction).ceil() as usize;
        let mut calibration = idx[..k].to_vec();
        let mut evaluation = idx[k..].to_vec();
        calibration.sort_unstable();
        evaluation.sort_unstable();
        Self::new(calibration, evaluation)
    }

    pub fn calibration(&self) -> &[usize] {
        &self.calibration
    }

    pub fn evaluation(&self) -> &[usize] {
        &self.evaluation
    }

    /// Re-checks disjointness; called before every tuning run.
    pub fn assert_disjoint(&self) -> Result<()> {
        Self::new(self.calibration.clone(), self.evaluation.clone()).map(|_| ())
    }

    /// Copies out the `(calibration, evaluation)` samples.
    pub fn select(&self, samples: &[LabeledSample]) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
        let pick = |ids: &[usize]| {
            ids.iter()
                .map(|&i| {
                    samples.get(i).cloned().ok_or_else(|| {
                        Error::Config(format!("split index {i} beyond {} samples", samples.len()))
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok((pick(&self.calibration)?, pick(&self.evaluation)?))
    }
}

/// Parses CIFAR-10 binary records. Pixels are scaled by `1/255`.
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::DatasetFormat(format!(
            "length {} is not a multiple of the {CIFAR10_RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR10_RECORD_BYTES)
        .enumerate()
        .map(|(record, chunk)| {
            let label = chunk[0];
            if label as usize >= CIFAR10_CLASSES {
                return Err(Error::CorruptRecord { record, label });
            }
            let pixels = chunk[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledSample {
                image: Tensor::new(CIFAR10_SHAPE.to_vec(), pixels)?,
                label: label as usize,
            })
        })
        .collect()
}

pub fn load_cifar10_batch(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_cifar10_records(&bytes).map_err(|e| match e {
        Error::DatasetFormat(msg) => Error::DatasetFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Deterministic class-conditional blob images.
///
/// Class `k` of `K` places a Gaussian bump (σ = 0.1·m, m = min(H, W)) on a
/// circle of radius 0.3·m around the image centre at angle 2πk/K. Each
/// sample jitters the centre by up to ±0.08·m on both axes, scales the bump
/// by an amplitude in [0.6, 1.0) and adds uniform noise in ±0.15 before
/// clamping to [0, 1]. Multi-channel images weight channel `c` by
/// `0.55 + 0.45·cos(2πk/K + 2πc/C)`. Labels cycle `i mod K`, so the set is
/// balanced when `K` divides `n`.
pub fn make_synthetic_set(seed: u64, n: usize, shape: [usize; 3], classes: usize) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::Empty("synthetic set (n must be > 0)"));
    }
    if classes == 0 || shape.contains(&0) {
        return Err(Error::Config(format!("synthetic set needs classes > 0 and positive shape, got {classes} / {shape:?}")));
    }
    let [c, h, w] = shape;
    let m = h.min(w) as f32;
    let (radius, sigma, jitter) = (0.3 * m, 0.1 * m, 0.08 * m);
    let two_sigma_sq = 2.0 * sigma * sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let theta = std::f32::consts::TAU * label as f32 / classes as f32;
        let dy: f32 = rng.random_range(-jitter..jitter);
        let dx: f32 = rng.random_range(-jitter..jitter);
        let amp: f32 = rng.random_range(0.6..1.0);
        let cy = (h as f32 - 1.0) / 2.0 + radius * theta.sin() + dy;
        let cx = (w as f32 - 1.0) / 2.0 + radius * theta.cos() + dx;
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let gain = if c == 1 {
                1.0
            } else {
                0.55 + 0.45 * (theta + std::f32::consts::TAU * ch as f32 / c as f32).cos()
            };
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let noise: f32 = rng.random_range(-0.15..0.15);
                    let v = amp * gain * (-d2 / two_sigma_sq).exp() + noise;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        out.push(LabeledSample {
            image: Tensor::new(shape.to_vec(), data)?,
            label,
        });
    }
    Ok(out)
}
