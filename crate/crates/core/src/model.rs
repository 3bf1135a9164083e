//! The multi-exit segmentation network and its dense and adaptive passes.
//!
//! The trunk is `num_exits` stages of `blocks_per_stage` conv+ReLU blocks,
//! all at one spatial resolution and one channel width. After each stage a
//! 1×1 head maps the trunk features to class logits.
//!
//! In the adaptive pass, stage 1 and exit 1 run densely. After each exit but
//! the last, the policy freezes confident pixels. Every later convolution,
//! heads included, runs only at active pixels; at frozen pixels it passes
//! through what its input layer last computed there. Exit `N` labels every
//! pixel still active.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masked::{cost_per_position, masked_conv2d_with, FlopsLedger, FrozenRead, PixelMask};
use crate::policy::{update_mask, ExitPolicy};
use crate::tensor::{argmax_channels, conv2d, relu_in_place, softmax_channels, ConvParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub num_exits: usize,
    pub trunk_width: usize,
    pub blocks_per_stage: usize,
    pub kernel_size: usize,
    pub input_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_exits: 4,
            trunk_width: 8,
            blocks_per_stage: 1,
            kernel_size: 3,
            input_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("model config: {m}")));
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.num_exits < 2 {
            return fail("num_exits must be at least 2");
        }
        if self.trunk_width == 0 || self.blocks_per_stage == 0 || self.input_channels == 0 {
            return fail("trunk_width, blocks_per_stage and input_channels must be positive");
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail("kernel_size must be odd");
        }
        Ok(())
    }

    /// `(in_channels, out_channels, kernel)` of stage `s`, block `b` (0-based).
    pub fn block_shape(&self, s: usize, b: usize) -> (usize, usize, usize) {
        let inp = if s == 0 && b == 0 {
            self.input_channels
        } else {
            self.trunk_width
        };
        (inp, self.trunk_width, self.kernel_size)
    }

    /// `(in_channels, out_channels, kernel)` of every exit head.
    pub fn head_shape(&self) -> (usize, usize, usize) {
        (self.trunk_width, self.num_classes, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitNet {
    config: ModelConfig,
    stages: Vec<Vec<ConvParams>>,
    exit_heads: Vec<ConvParams>,
}

impl MultiExitNet {
    pub fn new(
        config: ModelConfig,
        stages: Vec<Vec<ConvParams>>,
        exit_heads: Vec<ConvParams>,
    ) -> Result<Self> {
        config.validate()?;
        if stages.len() != config.num_exits || exit_heads.len() != config.num_exits {
            return Err(Error::config(format!(
                "{} exits configured but got {} stages and {} heads",
                config.num_exits,
                stages.len(),
                exit_heads.len()
            )));
        }
        for (s, blocks) in stages.iter().enumerate() {
            if blocks.len() != config.blocks_per_stage {
                return Err(Error::config(format!(
                    "stage {} has {} blocks",
                    s + 1,
                    blocks.len()
                )));
            }
            for (b, p) in blocks.iter().enumerate() {
                if (p.in_channels(), p.out_channels(), p.kernel()) != config.block_shape(s, b) {
                    return Err(Error::config(format!(
                        "stage{}.block{} has the wrong shape",
                        s + 1,
                        b + 1
                    )));
                }
            }
        }
        for (n, h) in exit_heads.iter().enumerate() {
            if (h.in_channels(), h.out_channels(), h.kernel()) != config.head_shape() {
                return Err(Error::config(format!("exit{} has the wrong shape", n + 1)));
            }
        }
        Ok(Self {
            config,
            stages,
            exit_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Vec<ConvParams>] {
        &self.stages
    }

    pub fn exit_heads(&self) -> &[ConvParams] {
        &self.exit_heads
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.channels() != self.config.input_channels {
            return Err(Error::config(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Exit logits of an unmasked pass.
    pub fn forward_dense_logits(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut logits = Vec::with_capacity(self.config.num_exits);
        for (blocks, head) in self.stages.iter().zip(&self.exit_heads) {
            for p in blocks {
                x = conv2d(&x, p)?;
                relu_in_place(&mut x);
            }
            logits.push(conv2d(&x, head)?);
        }
        Ok(logits)
    }

    /// Exit probabilities of an unmasked pass.
    pub fn forward_dense(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self
            .forward_dense_logits(image)?
            .iter()
            .map(softmax_channels)
            .collect())
    }

    /// Cumulative dense FLOPs through each exit for an `height × width` input.
    pub fn dense_flops(&self, height: usize, width: usize) -> Vec<u64> {
        let plane = (height * width) as u64;
        let mut total = 0;
        self.stages
            .iter()
            .zip(&self.exit_heads)
            .map(|(blocks, head)| {
                total += blocks
                    .iter()
                    .chain(std::iter::once(head))
                    .map(cost_per_position)
                    .sum::<u64>()
                    * plane;
                total
            })
            .collect()
    }

    pub fn forward_adaptive(
        &self,
        image: &Tensor,
        policy: &dyn ExitPolicy,
    ) -> Result<AdaptiveResult> {
        self.forward_adaptive_with(image, policy, FrozenRead::Carry)
    }

    /// Adaptive pass with an explicit rule for reading frozen neighbours.
    pub fn forward_adaptive_with(
        &self,
        image: &Tensor,
        policy: &dyn ExitPolicy,
        read: FrozenRead,
    ) -> Result<AdaptiveResult> {
        self.check_image(image)?;
        policy.validate(self.config.num_classes)?;
        let (h, w) = (image.height(), image.width());
        let n_exits = self.config.num_exits;

        let mut mask = PixelMask::all_active(h, w);
        let mut canvas = PredictionCanvas::new(h, w);
        let mut ledger = FlopsLedger::new();
        let mut per_exit_probs = Vec::with_capacity(n_exits);
        let mut per_exit_masks = Vec::with_capacity(n_exits);
        let mut stage_id = 0;
        let mut x = image.clone();
        let mut prev_logits: Option<Tensor> = None;

        for (n, (blocks, head)) in self.stages.iter().zip(&self.exit_heads).enumerate() {
            for p in blocks {
                let (mut y, flops) = if n == 0 {
                    (conv2d(&x, p)?, cost_per_position(p) * (h * w) as u64)
                } else {
                    // Constant trunk width: the block input is its own carry.
                    masked_conv2d_with(&x, p, &mask, &x, read)?
                };
                relu_in_place(&mut y);
                ledger.record(stage_id, flops)?;
                stage_id += 1;
                x = y;
            }
            let (logits, flops) = match &prev_logits {
                None => (conv2d(&x, head)?, cost_per_position(head) * (h * w) as u64),
                Some(carry) => masked_conv2d_with(&x, head, &mask, carry, read)?,
            };
            ledger.record(stage_id, flops)?;
            stage_id += 1;
            ledger.close_exit();

            let probs = softmax_channels(&logits);
            let exit_index = n + 1;
            if exit_index < n_exits {
                mask = update_mask(&mask, &probs, policy, &mut canvas, exit_index)?;
            } else {
                let (classes, _) = argmax_channels(&probs);
                for pos in (0..h * w).filter(|p| mask.is_active(*p)) {
                    canvas.finalize(pos, classes[pos], exit_index)?;
                }
                mask = mask.retain(|_| false);
            }
            per_exit_masks.push(mask.clone());
            per_exit_probs.push(probs);
            prev_logits = Some(logits);
        }

        Ok(AdaptiveResult {
            per_exit_probs,
            per_exit_masks,
            canvas,
            ledger,
        })
    }
}

/// Final labels and the exit that produced them. Entries are write-once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionCanvas {
    height: usize,
    width: usize,
    class_map: Vec<usize>,
    exit_map: Vec<usize>,
    finalized: Vec<bool>,
}

impl PredictionCanvas {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            class_map: vec![0; n],
            exit_map: vec![0; n],
            finalized: vec![false; n],
        }
    }

    pub fn finalize(&mut self, pos: usize, class: usize, exit_index: usize) -> Result<()> {
        if self.finalized[pos] {
            return Err(Error::usage(format!("pixel {pos} is already finalized")));
        }
        self.class_map[pos] = class;
        self.exit_map[pos] = exit_index;
        self.finalized[pos] = true;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_map(&self) -> &[usize] {
        &self.class_map
    }

    /// 1-based exit per pixel; 0 while not finalized.
    pub fn exit_map(&self) -> &[usize] {
        &self.exit_map
    }

    pub fn finalized(&self) -> &[bool] {
        &self.finalized
    }

    pub fn is_complete(&self) -> bool {
        self.finalized.iter().all(|f| *f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveResult {
    pub per_exit_probs: Vec<Tensor>,
    /// Mask in force after each exit's update.
    pub per_exit_masks: Vec<PixelMask>,
    pub canvas: PredictionCanvas,
    pub ledger: FlopsLedger,
}

impl AdaptiveResult {
    pub fn num_exits(&self) -> usize {
        self.per_exit_probs.len()
    }

    /// Full-frame prediction available at 0-based exit `n`: pixels finalized
    /// at an earlier exit keep their label, the rest use exit `n`'s argmax.
    pub fn anytime_prediction(&self, n: usize) -> Vec<usize> {
        let (live, _) = argmax_channels(&self.per_exit_probs[n]);
        live.iter()
            .enumerate()
            .map(|(pos, &c)| {
                let e = self.canvas.exit_map[pos];
                if e != 0 && e <= n {
                    self.canvas.class_map[pos]
                } else {
                    c
                }
            })
            .collect()
    }

    /// Pixels finalized exactly at 1-based exit `exit_index`.
    pub fn finalized_at(&self, exit_index: usize) -> Vec<usize> {
        self.canvas
            .exit_map
            .iter()
            .enumerate()
            .filter(|(_, e)| **e == exit_index)
            .map(|(p, _)| p)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{build_fixture_model, build_oracle_model, OracleSpec};
    use crate::policy::{DensePolicy, UniformPolicy};

    fn image(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(seed);
        Tensor::from_fn(3, 6, 7, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig {
                num_classes: 1,
                ..Default::default()
            },
            ModelConfig {
                num_exits: 1,
                ..Default::default()
            },
            ModelConfig {
                kernel_size: 2,
                ..Default::default()
            },
            ModelConfig {
                trunk_width: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn dense_outputs_are_distributions() {
        let net = build_fixture_model(0, ModelConfig::default()).unwrap();
        for p in net.forward_dense(&image(1)).unwrap() {
            assert_eq!(p.shape(), (3, 6, 7));
            for pos in 0..42 {
                let s: f32 = p.pixel(pos).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrong_image_channels() {
        let net = build_fixture_model(0, ModelConfig::default()).unwrap();
        let img = Tensor::zeros(4, 2, 2);
        assert!(matches!(net.forward_dense(&img), Err(Error::Config(_))));
        assert!(net.forward_adaptive(&img, &DensePolicy).is_err());
    }

    #[test]
    fn dense_policy_reproduces_dense_pass() {
        let net = build_fixture_model(
            3,
            ModelConfig {
                blocks_per_stage: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let img = image(2);
        let r = net.forward_adaptive(&img, &DensePolicy).unwrap();
        assert_eq!(r.per_exit_probs, net.forward_dense(&img).unwrap());
        assert_eq!(r.ledger.exit_totals(), net.dense_flops(6, 7).as_slice());
        assert!(r.canvas.is_complete());
        assert!(r.canvas.exit_map().iter().all(|e| *e == 4));
    }

    #[test]
    fn vacuous_threshold_behaves_like_dense() {
        let net = build_fixture_model(0, ModelConfig::default()).unwrap();
        let img = image(5);
        let dense = net.forward_adaptive(&img, &DensePolicy).unwrap();
        let never = net
            .forward_adaptive(&img, &UniformPolicy::new(1.0).unwrap())
            .unwrap();
        assert_eq!(dense, never);
    }

    #[test]
    fn masks_nest_and_canvas_completes() {
        let net = build_fixture_model(1, ModelConfig::default()).unwrap();
        // Fixture weights are small, so probabilities stay near uniform;
        // a low threshold makes some pixels finalize early.
        let r = net
            .forward_adaptive(&image(9), &UniformPolicy::new(0.34).unwrap())
            .unwrap();
        for pair in r.per_exit_masks.windows(2) {
            assert!(pair[1].is_subset_of(&pair[0]));
        }
        assert!(r.canvas.is_complete());
        assert!(r.canvas.exit_map().iter().all(|e| (1..=4).contains(e)));
        for n in 0..4 {
            for (pos, active) in r.per_exit_masks[n].bits().iter().enumerate() {
                let final_by_n = r.canvas.exit_map()[pos] <= n + 1;
                assert_eq!(!active, final_by_n);
            }
        }
    }

    #[test]
    fn full_freeze_keeps_features() {
        // A uniform threshold every pixel passes freezes everything after exit 1,
        // so later exits cost nothing and repeat exit 1.
        let net = build_fixture_model(2, ModelConfig::default()).unwrap();
        let r = net
            .forward_adaptive(&image(4), &UniformPolicy::new(0.01).unwrap())
            .unwrap();
        assert!(r.per_exit_masks[0].is_all_inactive());
        let t = r.ledger.exit_totals();
        assert!(t.windows(2).all(|w| w[0] == w[1]));
        for n in 1..4 {
            assert_eq!(r.per_exit_probs[n], r.per_exit_probs[0]);
        }
    }

    #[test]
    fn single_frozen_pixel_traced_through_stages() {
        // Oracle net: identity 1×1 trunk, so features equal the input.
        let spec = OracleSpec::identity(2, 3);
        let net = build_oracle_model(&spec).unwrap();
        let mut img = Tensor::zeros(2, 2, 2);
        img.data_mut()[0] = 5.0; // pixel 0 confidently class 0
        let r = net
            .forward_adaptive(&img, &UniformPolicy::new(0.99).unwrap())
            .unwrap();
        assert_eq!(r.finalized_at(1), vec![0]);
        for n in 1..3 {
            assert_eq!(r.per_exit_probs[n].pixel(0), r.per_exit_probs[0].pixel(0));
        }
    }

    #[test]
    fn anytime_prediction_keeps_frozen_labels() {
        let net = build_fixture_model(1, ModelConfig::default()).unwrap();
        let r = net
            .forward_adaptive(&image(9), &UniformPolicy::new(0.34).unwrap())
            .unwrap();
        for n in 0..4 {
            let pred = r.anytime_prediction(n);
            let canvas = &r.canvas;
            for ((p, e), c) in pred.iter().zip(canvas.exit_map()).zip(canvas.class_map()) {
                if *e <= n + 1 {
                    assert_eq!(p, c);
                }
            }
        }
        assert_eq!(r.anytime_prediction(3), r.canvas.class_map());
    }

    #[test]
    fn canvas_is_write_once() {
        let mut c = PredictionCanvas::new(1, 1);
        c.finalize(0, 1, 1).unwrap();
        assert!(matches!(c.finalize(0, 0, 2), Err(Error::Usage(_))));
    }
}
