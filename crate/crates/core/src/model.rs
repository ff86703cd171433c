//! The detection network: k feature-extraction blocks (conv → batchnorm →
//! ReLU → dropout → maxpool) followed by parallel localization and
//! classification heads with a global receptive field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{build_grid, GridConfig};
use crate::nn::checkpoint;
use crate::nn::ops;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels_in: usize,
    pub input_len: usize,
    pub k_blocks: usize,
    pub grid: GridConfig,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels_in: 6,
            input_len: 720,
            k_blocks: 6,
            grid: GridConfig::default(),
            dropout_p: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 {
            return Err(Error::Config("channels_in must be >= 1".into()));
        }
        if self.input_len < (1 << self.k_blocks) {
            return Err(Error::Config(format!(
                "input_len {} too short for {} pooling stages",
                self.input_len, self.k_blocks
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must be in [0, 1)".into()));
        }
        self.grid.validate()
    }

    /// Channel width of block b (1-indexed): 4 * 2^b.
    pub fn block_width(&self, b: usize) -> usize {
        4 << b
    }

    /// Temporal length after block b (floor-halving chain).
    pub fn block_len(&self, b: usize) -> usize {
        let mut l = self.input_len;
        for _ in 0..b {
            l /= 2;
        }
        l
    }
}

#[derive(Debug, Clone)]
struct ConvLayer<S: Scalar> {
    weight: Tensor<S>,
    bias: Tensor<S>,
    stride: usize,
    padding: usize,
}

impl<S: Scalar> ConvLayer<S> {
    fn new(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize, rng: &mut ChaCha8Rng) -> Self {
        // Kaiming uniform, fan-in mode, ReLU gain
        let fan_in = c_in * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..c_out * c_in * k).map(|_| S::of(rng.gen_range(-bound..bound))).collect();
        ConvLayer {
            weight: Tensor::from_vec(&[c_out, c_in, k], data).unwrap().with_grad(),
            bias: Tensor::zeros(&[c_out]).with_grad(),
            stride,
            padding,
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNormLayer<S: Scalar> {
    gamma: Tensor<S>,
    beta: Tensor<S>,
    running_mean: Vec<S>,
    running_var: Vec<S>,
}

impl<S: Scalar> BatchNormLayer<S> {
    fn new(c: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::from_vec(&[c], vec![S::one(); c]).unwrap().with_grad(),
            beta: Tensor::zeros(&[c]).with_grad(),
            running_mean: vec![S::zero(); c],
            running_var: vec![S::one(); c],
        }
    }
}

#[derive(Debug, Clone)]
struct Block<S: Scalar> {
    conv: ConvLayer<S>,
    bn: BatchNormLayer<S>,
}

/// Batched network output: per anchor a 2-class distribution and an offset
/// pair (center shift, log duration ratio).
#[derive(Debug, Clone)]
pub struct ModelOutput<S: Scalar> {
    /// [B, N_d, 2] raw classification logits.
    pub class_logits: Tensor<S>,
    /// [B, N_d, 2] softmax of the logits, rows on the simplex.
    pub class_probs: Tensor<S>,
    /// [B, N_d, 2] predicted (delta_center, delta_duration) per anchor.
    pub offsets: Tensor<S>,
}

impl<S: Scalar> ModelOutput<S> {
    pub fn batch(&self) -> usize {
        self.class_probs.shape[0]
    }

    pub fn n_anchors(&self) -> usize {
        self.class_probs.shape[1]
    }

    /// Probability of the event class for anchor `a` of sample `b`.
    pub fn event_prob(&self, b: usize, a: usize) -> S {
        self.class_probs.data[(b * self.n_anchors() + a) * 2 + 1]
    }

    pub fn offset_pair(&self, b: usize, a: usize) -> (S, S) {
        let i = (b * self.n_anchors() + a) * 2;
        (self.offsets.data[i], self.offsets.data[i + 1])
    }
}

struct BlockCache<S: Scalar> {
    input: Tensor<S>,
    conv_out: Tensor<S>,
    bn_cache: ops::BatchNormCache<S>,
    bn_out: Tensor<S>,
    dropout_mask: Vec<S>,
    relu_out_shape: Vec<usize>,
    pool_argmax: Vec<usize>,
}

/// Caches from a training-mode forward, consumed by [`Model::backward`].
pub struct ForwardCache<S: Scalar> {
    blocks: Vec<BlockCache<S>>,
    features: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub seed: u64,
    blocks: Vec<Block<S>>,
    loc_head: ConvLayer<S>,
    cls_head: ConvLayer<S>,
    pub n_anchors: usize,
}

/// Initialize the network from the config: block b maps
/// [C_{b-1} x L_{b-1}] -> [4*2^b x L_{b-1}/2]; both heads are convolutions
/// with kernel size equal to the final temporal length and 2*N_d outputs.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    cfg.validate()?;
    let n_anchors = build_grid(&cfg.grid)?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(cfg.k_blocks);
    let mut c_prev = cfg.channels_in;
    for b in 1..=cfg.k_blocks {
        let width = cfg.block_width(b);
        blocks.push(Block {
            conv: ConvLayer::new(width, c_prev, 3, 1, 1, &mut rng),
            bn: BatchNormLayer::new(width),
        });
        c_prev = width;
    }
    let final_len = cfg.block_len(cfg.k_blocks);
    let loc_head = ConvLayer::new(2 * n_anchors, c_prev, final_len, 1, 0, &mut rng);
    let cls_head = ConvLayer::new(2 * n_anchors, c_prev, final_len, 1, 0, &mut rng);
    Ok(Model { cfg: cfg.clone(), seed, blocks, loc_head, cls_head, n_anchors })
}

impl<S: Scalar> Model<S> {
    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape.len() != 3 || x.shape[1] != self.cfg.channels_in || x.shape[2] != self.cfg.input_len {
            return Err(Error::Shape(format!(
                "expected input [B, {}, {}], got {:?}",
                self.cfg.channels_in, self.cfg.input_len, x.shape
            )));
        }
        Ok(())
    }

    /// Heads applied to the final features, reshaped [B, 2*N_d, 1] -> [B, N_d, 2].
    fn apply_heads(&self, features: &Tensor<S>) -> Result<ModelOutput<S>> {
        let batch = features.shape[0];
        let nd = self.n_anchors;
        let loc = ops::conv1d_forward(features, &self.loc_head.weight, &self.loc_head.bias, self.loc_head.stride, self.loc_head.padding)?;
        let cls = ops::conv1d_forward(features, &self.cls_head.weight, &self.cls_head.bias, self.cls_head.stride, self.cls_head.padding)?;
        let offsets = Tensor::from_vec(&[batch, nd, 2], loc.data)?;
        let class_logits = Tensor::from_vec(&[batch, nd, 2], cls.data)?;
        let class_probs = ops::softmax_last_axis(&class_logits);
        Ok(ModelOutput { class_logits, class_probs, offsets })
    }

    /// Evaluation-mode forward: deterministic, batchnorm uses running stats,
    /// dropout is the identity.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<ModelOutput<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            let conv = ops::conv1d_forward(&h, &block.conv.weight, &block.conv.bias, block.conv.stride, block.conv.padding)?;
            let bn = ops::batchnorm1d_eval_forward(
                &conv,
                &block.bn.gamma,
                &block.bn.beta,
                &block.bn.running_mean,
                &block.bn.running_var,
            )?;
            let relu = ops::relu_forward(&bn);
            let (pooled, _) = ops::maxpool1d_forward(&relu, 2, 2)?;
            h = pooled;
        }
        self.apply_heads(&h)
    }

    /// Training-mode forward: batch statistics, dropout active, running stats
    /// updated. Returns the caches needed by [`Model::backward`].
    pub fn forward_train(
        &mut self,
        x: &Tensor<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ModelOutput<S>, ForwardCache<S>)> {
        self.check_input(x)?;
        let dropout_p = self.cfg.dropout_p;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let conv = ops::conv1d_forward(&h, &block.conv.weight, &block.conv.bias, block.conv.stride, block.conv.padding)?;
            let (bn_out, bn_cache) = ops::batchnorm1d_train_forward(
                &conv,
                &block.bn.gamma,
                &block.bn.beta,
                &mut block.bn.running_mean,
                &mut block.bn.running_var,
                BATCHNORM_MOMENTUM,
            )?;
            let relu = ops::relu_forward(&bn_out);
            let (dropped, mask) = ops::dropout_forward(&relu, dropout_p, rng);
            let (pooled, argmax) = ops::maxpool1d_forward(&dropped, 2, 2)?;
            caches.push(BlockCache {
                input: h,
                conv_out: conv,
                bn_cache,
                bn_out,
                dropout_mask: mask,
                relu_out_shape: dropped.shape.clone(),
                pool_argmax: argmax,
            });
            h = pooled;
        }
        let output = self.apply_heads(&h)?;
        Ok((output, ForwardCache { blocks: caches, features: h }))
    }

    /// Accumulate parameter gradients for the given output gradients
    /// (w.r.t. classification logits and raw offsets).
    pub fn backward(
        &mut self,
        cache: &ForwardCache<S>,
        g_logits: &Tensor<S>,
        g_offsets: &Tensor<S>,
    ) -> Result<()> {
        let batch = cache.features.shape[0];
        let nd = self.n_anchors;
        // reshape [B, N_d, 2] gradients back to conv-output layout [B, 2*N_d, 1]
        let g_loc = Tensor::from_vec(&[batch, 2 * nd, 1], g_offsets.data.clone())?;
        let g_cls = Tensor::from_vec(&[batch, 2 * nd, 1], g_logits.data.clone())?;
        let (gf_loc, gw_loc, gb_loc) =
            ops::conv1d_backward(&cache.features, &self.loc_head.weight, self.loc_head.stride, self.loc_head.padding, &g_loc)?;
        let (gf_cls, gw_cls, gb_cls) =
            ops::conv1d_backward(&cache.features, &self.cls_head.weight, self.cls_head.stride, self.cls_head.padding, &g_cls)?;
        accumulate(&mut self.loc_head.weight, &gw_loc);
        accumulate(&mut self.loc_head.bias, &gb_loc);
        accumulate(&mut self.cls_head.weight, &gw_cls);
        accumulate(&mut self.cls_head.bias, &gb_cls);

        let mut g = Tensor::zeros(&cache.features.shape);
        for i in 0..g.len() {
            g.data[i] = gf_loc.data[i] + gf_cls.data[i];
        }
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            let g_dropped = ops::maxpool1d_backward(&bc.relu_out_shape, &bc.pool_argmax, &g);
            let g_relu = ops::dropout_backward(&bc.dropout_mask, &g_dropped);
            let g_bn = ops::relu_backward(&bc.bn_out, &g_relu);
            let (g_conv, g_gamma, g_beta) =
                ops::batchnorm1d_train_backward(&bc.conv_out.shape, &block.bn.gamma, &bc.bn_cache, &g_bn);
            accumulate(&mut block.bn.gamma, &g_gamma);
            accumulate(&mut block.bn.beta, &g_beta);
            let (g_in, g_w, g_b) =
                ops::conv1d_backward(&bc.input, &block.conv.weight, block.conv.stride, block.conv.padding, &g_conv)?;
            accumulate(&mut block.conv.weight, &g_w);
            accumulate(&mut block.conv.bias, &g_b);
            g = g_in;
        }
        Ok(())
    }

    /// Trainable parameters in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.conv.weight);
            out.push(&mut block.conv.bias);
            out.push(&mut block.bn.gamma);
            out.push(&mut block.bn.beta);
        }
        out.push(&mut self.loc_head.weight);
        out.push(&mut self.loc_head.bias);
        out.push(&mut self.cls_head.weight);
        out.push(&mut self.cls_head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for block in &self.blocks {
            n += block.conv.weight.len() + block.conv.bias.len();
            n += block.bn.gamma.len() + block.bn.beta.len();
        }
        n += self.loc_head.weight.len() + self.loc_head.bias.len();
        n += self.cls_head.weight.len() + self.cls_head.bias.len();
        n
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All state tensors (parameters + batchnorm running stats) with stable
    /// names, in the documented checkpoint order.
    fn named_state(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.weight"), block.conv.weight.clone()));
            out.push((format!("block{i}.conv.bias"), block.conv.bias.clone()));
            out.push((format!("block{i}.bn.gamma"), block.bn.gamma.clone()));
            out.push((format!("block{i}.bn.beta"), block.bn.beta.clone()));
            out.push((
                format!("block{i}.bn.running_mean"),
                Tensor::from_vec(&[block.bn.running_mean.len()], block.bn.running_mean.clone()).unwrap(),
            ));
            out.push((
                format!("block{i}.bn.running_var"),
                Tensor::from_vec(&[block.bn.running_var.len()], block.bn.running_var.clone()).unwrap(),
            ));
        }
        out.push(("loc.weight".into(), self.loc_head.weight.clone()));
        out.push(("loc.bias".into(), self.loc_head.bias.clone()));
        out.push(("cls.weight".into(), self.cls_head.weight.clone()));
        out.push(("cls.bias".into(), self.cls_head.bias.clone()));
        out
    }
}

fn accumulate<S: Scalar>(param: &mut Tensor<S>, grad: &Tensor<S>) {
    let g = param.grad_mut();
    for i in 0..grad.len() {
        g[i] += grad.data[i];
    }
}

/// Save model weights plus config metadata in the checkpoint format.
pub fn save_model(model: &Model<f64>, extra_meta: serde_json::Value, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "config": model.cfg,
        "seed": model.seed,
        "extra": extra_meta,
    });
    let named = model.named_state();
    let refs: Vec<(String, &Tensor<f64>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
    checkpoint::save(meta, &refs, path)
}

/// Rebuild a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model<f64>> {
    let (manifest, tensors) = checkpoint::load(path)?;
    let cfg: ModelConfig = serde_json::from_value(manifest.meta["config"].clone())
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let seed = manifest.meta["seed"].as_u64().unwrap_or(0);
    let mut model = build_model::<f64>(&cfg, seed)?;
    let expected = model.named_state();
    if manifest.params.len() != expected.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} tensors, model needs {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    for (i, (info, tensor)) in manifest.params.iter().zip(tensors).enumerate() {
        let (name, _) = &expected[i];
        if &info.name != name {
            return Err(Error::Integrity(format!(
                "checkpoint tensor {i} is {}, expected {name}",
                info.name
            )));
        }
        let block_idx = |s: &str| -> usize {
            s.trim_start_matches("block").split('.').next().unwrap().parse().unwrap()
        };
        match info.name.as_str() {
            "loc.weight" => model.loc_head.weight.data = tensor.data,
            "loc.bias" => model.loc_head.bias.data = tensor.data,
            "cls.weight" => model.cls_head.weight.data = tensor.data,
            "cls.bias" => model.cls_head.bias.data = tensor.data,
            s if s.ends_with("conv.weight") => model.blocks[block_idx(s)].conv.weight.data = tensor.data,
            s if s.ends_with("conv.bias") => model.blocks[block_idx(s)].conv.bias.data = tensor.data,
            s if s.ends_with("bn.gamma") => model.blocks[block_idx(s)].bn.gamma.data = tensor.data,
            s if s.ends_with("bn.beta") => model.blocks[block_idx(s)].bn.beta.data = tensor.data,
            s if s.ends_with("bn.running_mean") => model.blocks[block_idx(s)].bn.running_mean = tensor.data,
            s if s.ends_with("bn.running_var") => model.blocks[block_idx(s)].bn.running_var = tensor.data,
            other => return Err(Error::Integrity(format!("unknown checkpoint tensor {other}"))),
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels_in: 2,
            input_len: 64,
            k_blocks: 3,
            grid: GridConfig { window_s: 16.0, default_sizes_s: vec![4.0, 8.0], overlap: 0.5 },
            dropout_p: 0.1,
        }
    }

    #[test]
    fn paper_config_shape_chain() {
        let cfg = ModelConfig::default();
        let lens: Vec<usize> = (1..=6).map(|b| cfg.block_len(b)).collect();
        assert_eq!(lens, vec![360, 180, 90, 45, 22, 11]);
        let widths: Vec<usize> = (1..=6).map(|b| cfg.block_width(b)).collect();
        assert_eq!(widths, vec![8, 16, 32, 64, 128, 256]);
    }

    #[test]
    fn paper_config_head_shapes_and_simplex() {
        let model = build_model::<f64>(&ModelConfig::default(), 0).unwrap();
        assert_eq!(model.n_anchors, 92);
        let x = Tensor::zeros(&[3, 6, 720]);
        let out = model.forward_eval(&x).unwrap();
        assert_eq!(out.class_probs.shape, vec![3, 92, 2]);
        assert_eq!(out.offsets.shape, vec![3, 92, 2]);
        for r in 0..3 * 92 {
            let sum = out.class_probs.data[r * 2] + out.class_probs.data[r * 2 + 1];
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = build_model::<f64>(&tiny_config(), 7).unwrap();
        let x = Tensor::from_vec(&[2, 2, 64], (0..256).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        let a = model.forward_eval(&x).unwrap();
        let b = model.forward_eval(&x).unwrap();
        assert_eq!(a.class_probs.data, b.class_probs.data);
        assert_eq!(a.offsets.data, b.offsets.data);
    }

    #[test]
    fn eval_batch_independence() {
        let model = build_model::<f64>(&tiny_config(), 3).unwrap();
        let s0: Vec<f64> = (0..128).map(|i| (i as f64 * 0.07).sin()).collect();
        let s1: Vec<f64> = (0..128).map(|i| (i as f64 * 0.013).cos()).collect();
        let fwd = |rows: &[&[f64]]| {
            let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            let x = Tensor::from_vec(&[rows.len(), 2, 64], data).unwrap();
            model.forward_eval(&x).unwrap()
        };
        let ab = fwd(&[&s0, &s1]);
        let ba = fwd(&[&s1, &s0]);
        let nd = ab.n_anchors();
        for a in 0..nd {
            assert_eq!(ab.event_prob(0, a), ba.event_prob(1, a));
            assert_eq!(ab.event_prob(1, a), ba.event_prob(0, a));
        }
    }

    #[test]
    fn input_shape_mismatch_rejected() {
        let model = build_model::<f64>(&tiny_config(), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 64]);
        assert!(matches!(model.forward_eval(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn too_short_input_rejected_at_build() {
        let mut cfg = tiny_config();
        cfg.input_len = 4;
        assert!(matches!(build_model::<f64>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_frozen() {
        // regression check: value computed from the architecture definition
        let model = build_model::<f64>(&ModelConfig::default(), 0).unwrap();
        assert_eq!(model.param_count(), 1_169_256);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = build_model::<f64>(&tiny_config(), 11).unwrap();
        // perturb running stats so they are exercised too
        model.blocks[0].bn.running_mean[0] = 0.25;
        save_model(&model, serde_json::Value::Null, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let x = Tensor::from_vec(&[1, 2, 64], (0..128).map(|i| (i as f64 * 0.05).sin()).collect()).unwrap();
        let a = model.forward_eval(&x).unwrap();
        let b = loaded.forward_eval(&x).unwrap();
        assert_eq!(a.class_probs.data, b.class_probs.data);
        assert_eq!(a.offsets.data, b.offsets.data);
    }
}
