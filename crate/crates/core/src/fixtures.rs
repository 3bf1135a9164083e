//! Deterministic models and data for tests, demos and the acceptance suite.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiExitNet};
use crate::tensor::ConvParams;

/// Uniform in `[-0.1, 0.1]` from the top 24 bits of a SplitMix64 draw.
fn weight_draw(rng: &mut SplitMix64) -> f32 {
    let unit = (rng.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32);
    -0.1 + 0.2 * unit
}

/// Pseudorandom weights, drawn layer by layer in file order (stage blocks,
/// then exit heads; weight before bias).
pub fn build_fixture_model(seed: u64, config: ModelConfig) -> Result<MultiExitNet> {
    config.validate()?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut layer = |(inp, out, k): (usize, usize, usize)| {
        let w = (0..out * inp * k * k)
            .map(|_| weight_draw(&mut rng))
            .collect();
        let b = (0..out).map(|_| weight_draw(&mut rng)).collect();
        ConvParams::new(out, inp, k, w, b)
    };
    let mut stages = Vec::with_capacity(config.num_exits);
    for s in 0..config.num_exits {
        stages.push(
            (0..config.blocks_per_stage)
                .map(|b| layer(config.block_shape(s, b)))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let heads = (0..config.num_exits)
        .map(|_| layer(config.head_shape()))
        .collect::<Result<Vec<_>>>()?;
    MultiExitNet::new(config, stages, heads)
}

/// One exit head of an oracle model: `logits = weight · pixel + bias`, with
/// `weight` a row-major `K × K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineHead {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// A network whose exit-`n` logits at a pixel are an affine function of
/// that pixel's input vector alone.
///
/// The trunk is a chain of identity 1×1 convolutions over `K` channels, so
/// for nonnegative inputs the features at every stage equal the input.
/// Confidences can then be computed by hand from the image.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    pub num_classes: usize,
    pub heads: Vec<AffineHead>,
}

impl OracleSpec {
    pub fn identity(num_classes: usize, num_exits: usize) -> Self {
        Self::scaled(num_classes, &vec![1.0; num_exits])
    }

    /// Head `n` is `scales[n] · I`.
    pub fn scaled(num_classes: usize, scales: &[f32]) -> Self {
        let k = num_classes;
        let heads = scales
            .iter()
            .map(|s| AffineHead {
                weight: (0..k * k)
                    .map(|i| if i / k == i % k { *s } else { 0.0 })
                    .collect(),
                bias: vec![0.0; k],
            })
            .collect();
        Self { num_classes, heads }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            num_exits: self.heads.len(),
            trunk_width: self.num_classes,
            blocks_per_stage: 1,
            kernel_size: 1,
            input_channels: self.num_classes,
        }
    }
}

pub fn build_oracle_model(spec: &OracleSpec) -> Result<MultiExitNet> {
    let config = spec.config();
    config.validate()?;
    let k = spec.num_classes;
    let identity = OracleSpec::identity(k, 1).heads.remove(0);
    let stages = (0..config.num_exits)
        .map(|_| {
            Ok(vec![ConvParams::new(
                k,
                k,
                1,
                identity.weight.clone(),
                vec![0.0; k],
            )?])
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = spec
        .heads
        .iter()
        .map(|h| ConvParams::new(k, k, 1, h.weight.clone(), h.bias.clone()))
        .collect::<Result<Vec<_>>>()?;
    MultiExitNet::new(config, stages, heads)
}

/// Per-exit head scales of the oracle model shipped by `generate-fixtures`.
/// Deeper exits are sharper, mimicking a trained early-exit network.
pub const ORACLE_SCALES: [f32; 4] = [4.0, 7.0, 10.0, 13.0];

/// Oracle model for RGB inputs in `[0, 1]` with one class per colour channel.
pub fn default_oracle_model() -> Result<MultiExitNet> {
    build_oracle_model(&OracleSpec::scaled(3, &ORACLE_SCALES))
}

/// Synthetic scenes: a background class plus shapes of increasing difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 16,
            height: 32,
            width: 32,
            num_classes: 3,
            seed: 0,
        }
    }
}

/// Base colour and noise amplitude per class. Class 0 is clean background,
/// class 1 fairly clean blocks, class 2 noisy thin lines, the rest discs.
const PALETTE: [([u8; 3], i32); 6] = [
    ([210, 30, 30], 15),
    ([40, 170, 50], 40),
    ([70, 80, 135], 55),
    ([180, 180, 40], 40),
    ([40, 170, 170], 40),
    ([170, 40, 170], 40),
];

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let k = spec.num_classes;
    if !(2..=PALETTE.len()).contains(&k) {
        return Err(Error::config(format!(
            "synthetic data supports 2..={} classes, got {k}",
            PALETTE.len()
        )));
    }
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::config("synthetic images must be at least 8x8"));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    let samples = (0..spec.num_images)
        .map(|_| {
            let mut labels = vec![0u8; h * w];
            for _ in 0..rng.random_range(1..=3) {
                let rh = rng.random_range(h / 5..=h / 2);
                let rw = rng.random_range(w / 5..=w / 2);
                let y0 = rng.random_range(0..=h - rh);
                let x0 = rng.random_range(0..=w - rw);
                for y in y0..y0 + rh {
                    labels[y * w + x0..y * w + x0 + rw].fill(1);
                }
            }
            if k > 2 {
                for _ in 0..rng.random_range(1..=2) {
                    let thick = rng.random_range(1..=2);
                    if rng.random_bool(0.5) {
                        let y0 = rng.random_range(0..=h - thick);
                        for y in y0..y0 + thick {
                            labels[y * w..(y + 1) * w].fill(2);
                        }
                    } else {
                        let x0 = rng.random_range(0..=w - thick);
                        for y in 0..h {
                            labels[y * w + x0..y * w + x0 + thick].fill(2);
                        }
                    }
                }
            }
            for class in 3..k {
                let r = rng.random_range(2..=(h.min(w) / 6).max(2)) as isize;
                let cy = rng.random_range(0..h) as isize;
                let cx = rng.random_range(0..w) as isize;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                            labels[y as usize * w + x as usize] = class as u8;
                        }
                    }
                }
            }
            let mut rgb = vec![0u8; 3 * h * w];
            for (pos, &l) in labels.iter().enumerate() {
                let (base, noise) = PALETTE[l as usize];
                for c in 0..3 {
                    let v = base[c] as i32 + rng.random_range(-noise..=noise);
                    rgb[c * h * w + pos] = v.clamp(0, 255) as u8;
                }
            }
            Sample { rgb, labels }
        })
        .collect();
    Ok(Dataset {
        num_classes: k,
        height: h,
        width: w,
        samples,
    })
}
