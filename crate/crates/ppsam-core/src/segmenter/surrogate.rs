//! Compact trainable segmenter with the same three-component layout as
//! the foundation model: a convolutional image encoder, a prompt encoder
//! that embeds the rasterized box, and a mask decoder that fuses both
//! into per-pixel logits.
//!
//! Small enough to fine-tune on one CPU core; forward and backward are
//! fully sequential, so runs with the same seed are bit-identical.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{SegmenterError, TrainError};
use crate::finetune::loss::{sigmoid, training_loss_with_grad};
use crate::finetune::FreezePolicy;
use crate::geometry::{BinaryMask, BoundingBox, ProbabilityMap};

use super::nn::{
    relu, relu_backward, upsample2, upsample2_backward, AdamW, CellEmbedding, Conv2d, Param,
    Tensor,
};
use super::{GroupId, ParameterGroup, TrainSettings};

/// Feature-grid stride of the encoder (two stride-2 convolutions).
const FEATURE_STRIDE: u32 = 4;

/// One training example, borrowed from the training loop.
pub struct TrainItem<'a> {
    pub image: &'a ImageTensor,
    pub prompt: BoundingBox,
    pub gt: &'a BinaryMask,
}

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    resolution: u32,
    variant: String,
    base_channels: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    prompt_embed: CellEmbedding,
    dec1: Conv2d,
    dec2: Conv2d,
    refine: Conv2d,
    head: Conv2d,
    freeze: FreezePolicy,
    optimizer: Option<AdamW>,
}

/// Serialized weights, written into checkpoint archives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateState {
    pub resolution: u32,
    pub variant: String,
    pub base_channels: usize,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

fn channels_for_variant(variant: &str) -> usize {
    match variant {
        "L" | "l" => 32,
        _ => 16,
    }
}

impl SurrogateModel {
    /// Fresh model with seeded He-uniform weights.
    pub fn init(resolution: u32, variant: &str, seed: u64) -> Result<Self, SegmenterError> {
        if resolution < 8 || !resolution.is_multiple_of(FEATURE_STRIDE) {
            return Err(SegmenterError::InvalidSpec(format!(
                "surrogate resolution must be a multiple of {FEATURE_STRIDE} and at least 8, got {resolution}"
            )));
        }
        let c = channels_for_variant(variant);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let model = Self {
            resolution,
            variant: variant.to_string(),
            base_channels: c,
            enc1: Conv2d::init(3, c, 3, 2, &mut rng),
            enc2: Conv2d::init(c, 2 * c, 3, 2, &mut rng),
            prompt_embed: CellEmbedding::init(2 * c, &mut rng),
            dec1: Conv2d::init(4 * c, 2 * c, 1, 1, &mut rng),
            dec2: Conv2d::init(2 * c, c, 3, 1, &mut rng),
            refine: Conv2d::init(c, c / 2, 3, 1, &mut rng),
            head: Conv2d::init(c / 2, 1, 1, 1, &mut rng),
            freeze: FreezePolicy::default(),
            optimizer: None,
        };
        debug_assert!(model.parameter_count() <= 2_000_000);
        Ok(model)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_groups().iter().map(|g| g.parameter_count).sum()
    }

    pub fn parameter_groups(&self) -> Vec<ParameterGroup> {
        vec![
            ParameterGroup {
                group_id: GroupId::ImageEncoder,
                parameter_count: self.enc1.parameter_count() + self.enc2.parameter_count(),
                trainable: self.freeze.image_encoder_trainable,
            },
            ParameterGroup {
                group_id: GroupId::PromptEncoder,
                parameter_count: self.prompt_embed.parameter_count(),
                trainable: self.freeze.prompt_encoder_trainable,
            },
            ParameterGroup {
                group_id: GroupId::MaskDecoder,
                parameter_count: self.dec1.parameter_count()
                    + self.dec2.parameter_count()
                    + self.refine.parameter_count()
                    + self.head.parameter_count(),
                trainable: self.freeze.mask_decoder_trainable,
            },
        ]
    }

    pub fn apply_freeze(&mut self, policy: FreezePolicy) {
        self.freeze = policy;
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze
    }

    fn params_of_group(&mut self, group: GroupId) -> Vec<&mut Param> {
        match group {
            GroupId::ImageEncoder => vec![
                &mut self.enc1.weight,
                &mut self.enc1.bias,
                &mut self.enc2.weight,
                &mut self.enc2.bias,
            ],
            GroupId::PromptEncoder => vec![
                &mut self.prompt_embed.inside,
                &mut self.prompt_embed.outside,
            ],
            GroupId::MaskDecoder => vec![
                &mut self.dec1.weight,
                &mut self.dec1.bias,
                &mut self.dec2.weight,
                &mut self.dec2.bias,
                &mut self.refine.weight,
                &mut self.refine.bias,
                &mut self.head.weight,
                &mut self.head.bias,
            ],
        }
    }

    fn all_params(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.prompt_embed.inside,
            &mut self.prompt_embed.outside,
            &mut self.dec1.weight,
            &mut self.dec1.bias,
            &mut self.dec2.weight,
            &mut self.dec2.bias,
            &mut self.refine.weight,
            &mut self.refine.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    /// Raw weight values of one group, for bitwise freeze checks.
    pub fn group_weights(&self, group: GroupId) -> Vec<f64> {
        let params: Vec<&Param> = match group {
            GroupId::ImageEncoder => vec![
                &self.enc1.weight,
                &self.enc1.bias,
                &self.enc2.weight,
                &self.enc2.bias,
            ],
            GroupId::PromptEncoder => {
                vec![&self.prompt_embed.inside, &self.prompt_embed.outside]
            }
            GroupId::MaskDecoder => vec![
                &self.dec1.weight,
                &self.dec1.bias,
                &self.dec2.weight,
                &self.dec2.bias,
                &self.refine.weight,
                &self.refine.bias,
                &self.head.weight,
                &self.head.bias,
            ],
        };
        params
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect()
    }

    fn check_inputs(
        &self,
        image: &ImageTensor,
        prompt: &BoundingBox,
    ) -> Result<(), SegmenterError> {
        if image.width() != self.resolution || image.height() != self.resolution {
            return Err(SegmenterError::InvalidSpec(format!(
                "image is {}x{} but the model expects {res}x{res}",
                image.width(),
                image.height(),
                res = self.resolution
            )));
        }
        if prompt.x_max() > self.resolution || prompt.y_max() > self.resolution {
            return Err(SegmenterError::PromptOutOfBounds {
                resolution: self.resolution,
            });
        }
        Ok(())
    }

    /// Rasterize a prompt box on the feature grid: a cell is inside when
    /// its center pixel falls within the box.
    fn rasterize_prompt(&self, prompt: &BoundingBox) -> Vec<bool> {
        let side = (self.resolution / FEATURE_STRIDE) as usize;
        let mut grid = vec![false; side * side];
        for fy in 0..side {
            let cy = fy as f64 * FEATURE_STRIDE as f64 + (FEATURE_STRIDE as f64 - 1.0) / 2.0;
            for fx in 0..side {
                let cx = fx as f64 * FEATURE_STRIDE as f64 + (FEATURE_STRIDE as f64 - 1.0) / 2.0;
                grid[fy * side + fx] = cx >= f64::from(prompt.x_min())
                    && cx < f64::from(prompt.x_max())
                    && cy >= f64::from(prompt.y_min())
                    && cy < f64::from(prompt.y_max());
            }
        }
        grid
    }

    fn forward_cached(&self, image: &ImageTensor, prompt: &BoundingBox) -> ForwardPass {
        let r = self.resolution as usize;
        let input = Tensor::from_data(3, r, r, image.data().to_vec());
        let a1 = relu(&self.enc1.forward(&input));
        let a2 = relu(&self.enc2.forward(&a1));
        let grid = self.rasterize_prompt(prompt);
        let pe = self.prompt_embed.forward(&grid, a2.height, a2.width);
        let fused = Tensor::concat(&a2, &pe);
        let d1 = relu(&self.dec1.forward(&fused));
        let d2 = relu(&self.dec2.forward(&d1));
        let up_mid = upsample2(&d2);
        let refined = relu(&self.refine.forward(&up_mid));
        let logits_mid = self.head.forward(&refined);
        let logits = upsample2(&logits_mid);
        ForwardPass {
            input,
            a1,
            a2,
            grid,
            fused,
            d1,
            d2,
            up_mid,
            refined,
            logits,
        }
    }

    /// Per-pixel logits at model resolution.
    pub fn forward_logits(
        &self,
        image: &ImageTensor,
        prompt: &BoundingBox,
    ) -> Result<Vec<f64>, SegmenterError> {
        self.check_inputs(image, prompt)?;
        Ok(self.forward_cached(image, prompt).logits.data)
    }

    pub fn predict(
        &self,
        image: &ImageTensor,
        prompt: &BoundingBox,
    ) -> Result<ProbabilityMap, SegmenterError> {
        let logits = self.forward_logits(image, prompt)?;
        Ok(ProbabilityMap::new(
            self.resolution,
            self.resolution,
            logits.into_iter().map(sigmoid).collect(),
        ))
    }

    /// Install the optimizer and freeze flags for a training session.
    /// Resets gradients and moment estimates.
    pub fn begin_training(&mut self, settings: &TrainSettings) -> Result<(), SegmenterError> {
        self.freeze = settings.freeze;
        self.optimizer = Some(AdamW::new(settings.learning_rate, settings.weight_decay));
        for param in self.all_params() {
            param.zero_grad();
            param.reset_optimizer_state();
        }
        Ok(())
    }

    /// One optimizer step over a batch: accumulate gradients for every
    /// item, then update the trainable groups with the mean gradient.
    /// Returns the mean loss over the batch.
    pub fn train_step_batch(
        &mut self,
        batch: &[TrainItem<'_>],
        weights: crate::finetune::LossWeights,
    ) -> Result<f64, TrainError> {
        assert!(!batch.is_empty(), "empty training batch");
        if self.optimizer.is_none() {
            return Err(TrainError::InvalidConfig {
                field: "optimizer",
                reason: "begin_training must run before train_step".into(),
            });
        }
        for param in self.all_params() {
            param.zero_grad();
        }
        let mut loss_sum = 0.0;
        for item in batch {
            self.check_inputs(item.image, &item.prompt)
                .map_err(TrainError::Segmenter)?;
            let pass = self.forward_cached(item.image, &item.prompt);
            let (loss, grad) = training_loss_with_grad(&pass.logits.data, item.gt, weights)?;
            loss_sum += loss;
            let r = self.resolution as usize;
            self.backward(&pass, Tensor::from_data(1, r, r, grad));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut opt = self.optimizer.clone().expect("optimizer installed above");
        opt.begin_step();
        let freeze = self.freeze;
        for group in [GroupId::ImageEncoder, GroupId::PromptEncoder, GroupId::MaskDecoder] {
            if !freeze.trainable(group) {
                continue;
            }
            for param in self.params_of_group(group) {
                opt.update(param, scale);
            }
        }
        self.optimizer = Some(opt);
        Ok(loss_sum * scale)
    }

    fn backward(&mut self, pass: &ForwardPass, grad_logits: Tensor) {
        let g_mid = upsample2_backward(&grad_logits);
        let g_refined = self.head.backward(&pass.refined, &g_mid);
        let g_refine_pre = relu_backward(&pass.refined, &g_refined);
        let g_up_mid = self.refine.backward(&pass.up_mid, &g_refine_pre);
        let g_d2 = upsample2_backward(&g_up_mid);
        let g_d2_pre = relu_backward(&pass.d2, &g_d2);
        let g_d1 = self.dec2.backward(&pass.d1, &g_d2_pre);
        let g_d1_pre = relu_backward(&pass.d1, &g_d1);
        let g_fused = self.dec1.backward(&pass.fused, &g_d1_pre);
        let (g_a2, g_pe) = g_fused.split(pass.a2.channels);
        self.prompt_embed.backward(&pass.grid, &g_pe);
        let g_a2_pre = relu_backward(&pass.a2, &g_a2);
        let g_a1 = self.enc2.backward(&pass.a1, &g_a2_pre);
        let g_a1_pre = relu_backward(&pass.a1, &g_a1);
        let _ = self.enc1.backward(&pass.input, &g_a1_pre);
    }

    pub fn export_state(&self) -> SurrogateState {
        let mut tensors = BTreeMap::new();
        tensors.insert("image_encoder.enc1.weight".into(), self.enc1.weight.values.clone());
        tensors.insert("image_encoder.enc1.bias".into(), self.enc1.bias.values.clone());
        tensors.insert("image_encoder.enc2.weight".into(), self.enc2.weight.values.clone());
        tensors.insert("image_encoder.enc2.bias".into(), self.enc2.bias.values.clone());
        tensors.insert("prompt_encoder.inside".into(), self.prompt_embed.inside.values.clone());
        tensors.insert("prompt_encoder.outside".into(), self.prompt_embed.outside.values.clone());
        tensors.insert("mask_decoder.dec1.weight".into(), self.dec1.weight.values.clone());
        tensors.insert("mask_decoder.dec1.bias".into(), self.dec1.bias.values.clone());
        tensors.insert("mask_decoder.dec2.weight".into(), self.dec2.weight.values.clone());
        tensors.insert("mask_decoder.dec2.bias".into(), self.dec2.bias.values.clone());
        tensors.insert("mask_decoder.refine.weight".into(), self.refine.weight.values.clone());
        tensors.insert("mask_decoder.refine.bias".into(), self.refine.bias.values.clone());
        tensors.insert("mask_decoder.head.weight".into(), self.head.weight.values.clone());
        tensors.insert("mask_decoder.head.bias".into(), self.head.bias.values.clone());
        SurrogateState {
            resolution: self.resolution,
            variant: self.variant.clone(),
            base_channels: self.base_channels,
            tensors,
        }
    }

    pub fn import_state(state: &SurrogateState) -> Result<Self, SegmenterError> {
        let mut model = Self::init(state.resolution, &state.variant, 0)?;
        if model.base_channels != state.base_channels {
            return Err(SegmenterError::InvalidSpec(format!(
                "state has {} base channels, variant `{}` implies {}",
                state.base_channels, state.variant, model.base_channels
            )));
        }
        let load = |name: &str, param: &mut Param| -> Result<(), SegmenterError> {
            let values = state.tensors.get(name).ok_or_else(|| {
                SegmenterError::InvalidSpec(format!("state is missing tensor `{name}`"))
            })?;
            if values.len() != param.len() {
                return Err(SegmenterError::InvalidSpec(format!(
                    "tensor `{name}` has {} values, expected {}",
                    values.len(),
                    param.len()
                )));
            }
            param.values.clone_from(values);
            Ok(())
        };
        load("image_encoder.enc1.weight", &mut model.enc1.weight)?;
        load("image_encoder.enc1.bias", &mut model.enc1.bias)?;
        load("image_encoder.enc2.weight", &mut model.enc2.weight)?;
        load("image_encoder.enc2.bias", &mut model.enc2.bias)?;
        load("prompt_encoder.inside", &mut model.prompt_embed.inside)?;
        load("prompt_encoder.outside", &mut model.prompt_embed.outside)?;
        load("mask_decoder.dec1.weight", &mut model.dec1.weight)?;
        load("mask_decoder.dec1.bias", &mut model.dec1.bias)?;
        load("mask_decoder.dec2.weight", &mut model.dec2.weight)?;
        load("mask_decoder.dec2.bias", &mut model.dec2.bias)?;
        load("mask_decoder.refine.weight", &mut model.refine.weight)?;
        load("mask_decoder.refine.bias", &mut model.refine.bias)?;
        load("mask_decoder.head.weight", &mut model.head.weight)?;
        load("mask_decoder.head.bias", &mut model.head.bias)?;
        Ok(model)
    }
}

struct ForwardPass {
    input: Tensor,
    a1: Tensor,
    a2: Tensor,
    grid: Vec<bool>,
    fused: Tensor,
    d1: Tensor,
    d2: Tensor,
    up_mid: Tensor,
    refined: Tensor,
    logits: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::loss::training_loss;
    use crate::finetune::LossWeights;
    use crate::geometry::Dimensions;

    fn flat_image(resolution: u32, value: f64) -> ImageTensor {
        let n = 3 * (resolution as usize).pow(2);
        ImageTensor::new(resolution, resolution, vec![value; n])
    }

    fn bright_box_image(resolution: u32, bbox: &BoundingBox) -> ImageTensor {
        let r = resolution as usize;
        let mut data = vec![-0.8; 3 * r * r];
        for y in bbox.y_min()..bbox.y_max() {
            for x in bbox.x_min()..bbox.x_max() {
                for c in 0..3 {
                    data[c * r * r + y as usize * r + x as usize] = 0.8;
                }
            }
        }
        ImageTensor::new(resolution, resolution, data)
    }

    #[test]
    fn init_rejects_bad_resolution() {
        assert!(SurrogateModel::init(30, "B", 0).is_err());
        assert!(SurrogateModel::init(4, "B", 0).is_err());
        assert!(SurrogateModel::init(32, "B", 0).is_ok());
    }

    #[test]
    fn three_nonempty_groups_partition_the_parameters() {
        let model = SurrogateModel::init(32, "B", 1).unwrap();
        let groups = model.parameter_groups();
        assert_eq!(groups.len(), 3);
        assert!(groups.iter().all(|g| g.parameter_count > 0));
        let total: usize = groups.iter().map(|g| g.parameter_count).sum();
        assert_eq!(total, model.parameter_count());
        assert!(total <= 2_000_000);
    }

    #[test]
    fn larger_variant_has_more_image_encoder_parameters() {
        let b = SurrogateModel::init(32, "B", 1).unwrap();
        let l = SurrogateModel::init(32, "L", 1).unwrap();
        let count = |m: &SurrogateModel| {
            m.parameter_groups()
                .iter()
                .find(|g| g.group_id == GroupId::ImageEncoder)
                .unwrap()
                .parameter_count
        };
        assert!(count(&l) > count(&b));
    }

    #[test]
    fn forward_on_zero_image_is_finite() {
        let model = SurrogateModel::init(32, "B", 2).unwrap();
        let image = flat_image(32, 0.0);
        let prompt = BoundingBox::new(4, 4, 20, 20).unwrap();
        let probs = model.predict(&image, &prompt).unwrap();
        assert!(probs.data().iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }

    #[test]
    fn predict_is_deterministic() {
        let model = SurrogateModel::init(32, "B", 3).unwrap();
        let image = bright_box_image(32, &BoundingBox::new(8, 8, 20, 24).unwrap());
        let prompt = BoundingBox::new(6, 6, 22, 26).unwrap();
        let a = model.predict(&image, &prompt).unwrap();
        let b = model.predict(&image, &prompt).unwrap();
        assert_eq!(a.data(), b.data(), "same weights and inputs must be bitwise equal");
    }

    #[test]
    fn prompt_outside_resolution_is_rejected() {
        let model = SurrogateModel::init(32, "B", 3).unwrap();
        let image = flat_image(32, 0.0);
        let prompt = BoundingBox::new(0, 0, 40, 40).unwrap();
        assert!(matches!(
            model.predict(&image, &prompt),
            Err(SegmenterError::PromptOutOfBounds { .. })
        ));
    }

    #[test]
    fn rasterized_prompt_covers_the_box_cells() {
        let model = SurrogateModel::init(32, "B", 3).unwrap();
        let grid = model.rasterize_prompt(&BoundingBox::new(0, 0, 32, 32).unwrap());
        assert!(grid.iter().all(|&c| c), "full-frame box covers every cell");
        let grid = model.rasterize_prompt(&BoundingBox::new(0, 0, 1, 1).unwrap());
        assert_eq!(grid.iter().filter(|&&c| c).count(), 0, "sub-cell box misses centers");
        let grid = model.rasterize_prompt(&BoundingBox::new(0, 0, 8, 4).unwrap());
        assert_eq!(grid.iter().filter(|&&c| c).count(), 2);
    }

    /// End-to-end gradient check: backprop through the full network and
    /// combined loss against central finite differences on a few weights.
    #[test]
    fn network_gradients_match_finite_differences() {
        let mut model = SurrogateModel::init(16, "B", 7).unwrap();
        let image = bright_box_image(16, &BoundingBox::new(4, 4, 12, 10).unwrap());
        let prompt = BoundingBox::new(2, 2, 14, 12).unwrap();
        let gt = prompt_gt(16, 4, 4, 12, 10);
        let weights = LossWeights::default();

        let pass = model.forward_cached(&image, &prompt);
        let (_, grad) = training_loss_with_grad(&pass.logits.data, &gt, weights).unwrap();
        for param in model.all_params() {
            param.zero_grad();
        }
        let grad_tensor = Tensor::from_data(1, 16, 16, grad);
        let pass = model.forward_cached(&image, &prompt);
        model.backward(&pass, grad_tensor);

        let h = 1e-5;
        // Sample a few weights from each layer.
        let checks: Vec<(&str, usize)> = vec![
            ("enc1.weight", 5),
            ("enc2.weight", 40),
            ("prompt.inside", 3),
            ("prompt.outside", 9),
            ("dec1.weight", 100),
            ("dec2.weight", 77),
            ("refine.weight", 33),
            ("head.weight", 0),
        ];
        for (name, index) in checks {
            let analytic = read_param(&model, name, index, |p| p.grad[index]);
            let probe = |delta: f64| {
                let mut m = model.clone();
                write_param(&mut m, name, index, delta);
                let logits = m.forward_logits(&image, &prompt).unwrap();
                training_loss(&logits, &gt, weights).unwrap()
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-7);
            assert!(
                rel < 1e-4,
                "{name}[{index}]: analytic {analytic} vs fd {fd} (rel {rel})"
            );
        }
    }

    fn prompt_gt(res: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        BoundingBox::new(x0, y0, x1, y1)
            .unwrap()
            .to_mask(Dimensions::square(res))
    }

    fn read_param(model: &SurrogateModel, name: &str, _index: usize, f: impl Fn(&Param) -> f64) -> f64 {
        match name {
            "enc1.weight" => f(&model.enc1.weight),
            "enc2.weight" => f(&model.enc2.weight),
            "prompt.inside" => f(&model.prompt_embed.inside),
            "prompt.outside" => f(&model.prompt_embed.outside),
            "dec1.weight" => f(&model.dec1.weight),
            "dec2.weight" => f(&model.dec2.weight),
            "refine.weight" => f(&model.refine.weight),
            "head.weight" => f(&model.head.weight),
            _ => unreachable!(),
        }
    }

    fn write_param(model: &mut SurrogateModel, name: &str, index: usize, delta: f64) {
        let param = match name {
            "enc1.weight" => &mut model.enc1.weight,
            "enc2.weight" => &mut model.enc2.weight,
            "prompt.inside" => &mut model.prompt_embed.inside,
            "prompt.outside" => &mut model.prompt_embed.outside,
            "dec1.weight" => &mut model.dec1.weight,
            "dec2.weight" => &mut model.dec2.weight,
            "refine.weight" => &mut model.refine.weight,
            "head.weight" => &mut model.head.weight,
            _ => unreachable!(),
        };
        param.values[index] += delta;
    }

    #[test]
    fn frozen_groups_stay_bitwise_identical_through_training() {
        let mut model = SurrogateModel::init(32, "B", 11).unwrap();
        let settings = TrainSettings {
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            freeze: FreezePolicy {
                image_encoder_trainable: false,
                prompt_encoder_trainable: true,
                mask_decoder_trainable: true,
            },
        };
        model.begin_training(&settings).unwrap();
        let frozen_before = model.group_weights(GroupId::ImageEncoder);
        let prompt_before = model.group_weights(GroupId::PromptEncoder);
        let decoder_before = model.group_weights(GroupId::MaskDecoder);

        let image = bright_box_image(32, &BoundingBox::new(8, 8, 24, 20).unwrap());
        let gt = prompt_gt(32, 8, 8, 24, 20);
        let prompt = BoundingBox::new(6, 6, 26, 24).unwrap();
        for _ in 0..3 {
            model
                .train_step_batch(
                    &[TrainItem {
                        image: &image,
                        prompt,
                        gt: &gt,
                    }],
                    LossWeights::default(),
                )
                .unwrap();
        }
        assert_eq!(
            model.group_weights(GroupId::ImageEncoder),
            frozen_before,
            "frozen group must be bitwise unchanged"
        );
        assert_ne!(model.group_weights(GroupId::PromptEncoder), prompt_before);
        assert_ne!(model.group_weights(GroupId::MaskDecoder), decoder_before);
    }

    /// Trainability smoke: 200 steps on 20 synthetic rectangles with
    /// exact boxes must reach a high mean train DICE. The 90 threshold
    /// was fixed after observing the run.
    #[test]
    fn short_training_fits_synthetic_rectangles() {
        use crate::metrics::dice;

        let res = 32;
        let mut model = SurrogateModel::init(res, "B", 13).unwrap();
        let settings = TrainSettings {
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            freeze: FreezePolicy::all_trainable(),
        };
        model.begin_training(&settings).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let samples: Vec<(ImageTensor, BoundingBox, BinaryMask)> = (0..20)
            .map(|_| {
                let w = rand::Rng::random_range(&mut rng, 8..20u32);
                let h = rand::Rng::random_range(&mut rng, 8..20u32);
                let x0 = rand::Rng::random_range(&mut rng, 0..res - w);
                let y0 = rand::Rng::random_range(&mut rng, 0..res - h);
                let bbox = BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap();
                (
                    bright_box_image(res, &bbox),
                    bbox,
                    bbox.to_mask(Dimensions::square(res)),
                )
            })
            .collect();

        for step in 0..200 {
            let (image, bbox, gt) = &samples[step % samples.len()];
            model
                .train_step_batch(
                    &[TrainItem {
                        image,
                        prompt: *bbox,
                        gt,
                    }],
                    LossWeights::default(),
                )
                .unwrap();
        }

        let mean_dice: f64 = samples
            .iter()
            .map(|(image, bbox, gt)| {
                let probs = model.predict(image, bbox).unwrap();
                dice(gt, &probs.threshold(0.5)).unwrap().value()
            })
            .sum::<f64>()
            / samples.len() as f64;
        assert!(mean_dice > 90.0, "mean train DICE {mean_dice:.1} <= 90");
    }

    #[test]
    fn state_round_trip_preserves_predictions() {
        let model = SurrogateModel::init(32, "B", 21).unwrap();
        let state = model.export_state();
        let restored = SurrogateModel::import_state(&state).unwrap();
        let image = bright_box_image(32, &BoundingBox::new(5, 7, 19, 23).unwrap());
        let prompt = BoundingBox::new(3, 5, 21, 25).unwrap();
        assert_eq!(
            model.predict(&image, &prompt).unwrap().data(),
            restored.predict(&image, &prompt).unwrap().data()
        );
    }

    #[test]
    fn train_step_without_begin_training_errors() {
        let mut model = SurrogateModel::init(16, "B", 1).unwrap();
        let image = flat_image(16, 0.0);
        let gt = prompt_gt(16, 2, 2, 10, 10);
        let result = model.train_step_batch(
            &[TrainItem {
                image: &image,
                prompt: BoundingBox::new(2, 2, 10, 10).unwrap(),
                gt: &gt,
            }],
            LossWeights::default(),
        );
        assert!(matches!(result, Err(TrainError::InvalidConfig { .. })));
    }
}
