//! The classifier: a VGG-style convolutional backbone, optionally fused with
//! the binary feature module, trained by projected SGD.
//!
//! Both branches consume the same (normalized) input image. Backbone features
//! and flattened binary features are concatenated and fed to the fully
//! connected head. After every optimizer step the directional kernels are
//! projected back into their constraint boxes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetView, Normalizer};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, Sgd};
use crate::sbfm::{build_sbfm, Direction, Sbfm, SbfmConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Backbone convolutions are 3x3, stride 1, zero-padded to preserve size.
const CONV_KERNEL: usize = 3;
const CONV_PADDING: usize = 1;
/// 2x2/2 max pooling after every block.
const POOL: usize = 2;

pub const DEFAULT_BATCH: usize = 64;

/// Shape of the convolutional backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(channels, conv count)` per block; a 2x2 max pool follows each block.
    pub blocks: Vec<(usize, usize)>,
    /// Hidden fully connected widths; the class layer is appended.
    pub fc_widths: Vec<usize>,
    /// `(C, H, W)` of the input images.
    pub input_shape: (usize, usize, usize),
    /// Number of classes `K`.
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // MiniVGG: three double-conv blocks for 32x32 inputs.
        Self {
            blocks: vec![(32, 2), (64, 2), (128, 2)],
            fc_widths: vec![256],
            input_shape: (3, 32, 32),
            classes: 10,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input shape must be positive, got {:?}",
                self.input_shape
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.blocks.iter().any(|&(ch, n)| ch == 0 || n == 0) {
            return Err(Error::Config("conv blocks must have positive sizes".into()));
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::Config("fc widths must be positive".into()));
        }
        self.feature_hw()?;
        Ok(())
    }

    /// Spatial size after all blocks; errors if pooling exhausts the image.
    fn feature_hw(&self) -> Result<(usize, usize)> {
        let (_, mut h, mut w) = self.input_shape;
        for (i, _) in self.blocks.iter().enumerate() {
            if h < POOL || w < POOL {
                return Err(Error::Config(format!(
                    "input too small: {h}x{w} before pool of block {i}"
                )));
            }
            h = (h - POOL) / POOL + 1;
            w = (w - POOL) / POOL + 1;
        }
        Ok((h, w))
    }

    /// Flattened width of the backbone branch.
    pub fn feature_len(&self) -> Result<usize> {
        let (h, w) = self.feature_hw()?;
        let channels = self.blocks.last().map_or(self.input_shape.0, |&(c, _)| c);
        Ok(channels * h * w)
    }
}

/// Full architecture: backbone plus optional binary feature module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub sbfm: Option<SbfmConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(sbfm) = &self.sbfm {
            sbfm.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor, // [F, C, 3, 3]
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor, // [D, M]
    bias: Tensor,   // [M]
}

/// A built classifier. `sbfm: None` is the plain baseline.
#[derive(Debug, Clone)]
pub struct FusedModel {
    config: ModelConfig,
    blocks: Vec<Vec<Conv>>,
    head: Vec<Linear>,
    sbfm: Option<Sbfm>,
}

fn he_uniform(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Deterministically initializes a model from `config` and `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<FusedModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (in_c, h, w) = config.backbone.input_shape;

    let mut blocks = Vec::with_capacity(config.backbone.blocks.len());
    let mut channels = in_c;
    for &(out_c, convs) in &config.backbone.blocks {
        let mut block = Vec::with_capacity(convs);
        for _ in 0..convs {
            let fan_in = channels * CONV_KERNEL * CONV_KERNEL;
            block.push(Conv {
                weight: he_uniform(
                    &mut rng,
                    vec![out_c, channels, CONV_KERNEL, CONV_KERNEL],
                    fan_in,
                ),
            });
            channels = out_c;
        }
        blocks.push(block);
    }

    let sbfm = match &config.sbfm {
        Some(cfg) => {
            let sbfm: Sbfm = build_sbfm(cfg, in_c, rng.gen())?;
            // fail early if the module does not fit the input
            sbfm.feature_len(h, w)?;
            Some(sbfm)
        }
        None => None,
    };

    let mut width = config.backbone.feature_len()?;
    if let Some(s) = &sbfm {
        width += s.feature_len(h, w)?;
    }
    let mut head = Vec::new();
    for &fc in config
        .backbone
        .fc_widths
        .iter()
        .chain(std::iter::once(&config.backbone.classes))
    {
        head.push(Linear {
            weight: he_uniform(&mut rng, vec![width, fc], width),
            bias: Tensor::zeros(vec![fc]),
        });
        width = fc;
    }

    Ok(FusedModel {
        config: config.clone(),
        blocks,
        head,
        sbfm,
    })
}

impl FusedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_fused(&self) -> bool {
        self.sbfm.is_some()
    }

    /// Width of the head's input features.
    pub fn head_input_len(&self) -> usize {
        self.head.first().map_or(0, |fc| fc.weight.shape()[0])
    }

    /// Stable `(name, tensor)` enumeration of every parameter. The order is
    /// the binding order used by `forward_on` and the optimizer.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (ci, conv) in block.iter().enumerate() {
                out.push((format!("backbone.block{bi}.conv{ci}.weight"), &conv.weight));
            }
        }
        for (fi, fc) in self.head.iter().enumerate() {
            out.push((format!("head.fc{fi}.weight"), &fc.weight));
            out.push((format!("head.fc{fi}.bias"), &fc.bias));
        }
        if let Some(sbfm) = &self.sbfm {
            for (li, layer) in sbfm.layers().iter().enumerate() {
                for (k, dir) in layer.kernels().iter().zip(Direction::ALL) {
                    out.push((format!("sbfm.layer{li}.{}.weight", dir.name()), k.weights()));
                }
            }
        }
        out
    }

    /// Mutable parameter list in [`named_params`](Self::named_params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for block in &mut self.blocks {
            for conv in block {
                out.push(&mut conv.weight);
            }
        }
        for fc in &mut self.head {
            out.push(&mut fc.weight);
            out.push(&mut fc.bias);
        }
        if let Some(sbfm) = &mut self.sbfm {
            for layer in sbfm.layers_mut() {
                for k in layer.kernels_mut() {
                    out.push(k.weights_mut());
                }
            }
        }
        out
    }

    /// Which parameters the optimizer may update (false for kernels of a
    /// frozen feature module), aligned with `named_params`.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let n_fixed = self.blocks.iter().map(Vec::len).sum::<usize>() + 2 * self.head.len();
        let mut mask = vec![true; n_fixed];
        if let Some(sbfm) = &self.sbfm {
            let kernels = 4 * sbfm.layers().len();
            mask.extend(std::iter::repeat_n(!sbfm.frozen(), kernels));
        }
        mask
    }

    /// Clones every parameter (snapshot for best-epoch selection).
    pub fn param_values(&self) -> Vec<Tensor> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Restores a snapshot taken with [`param_values`](Self::param_values).
    pub fn set_param_values(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::Contract(format!(
                "snapshot holds {} tensors, model has {}",
                values.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "snapshot shape {:?} vs param shape {:?}",
                    v.shape(),
                    p.shape()
                )));
            }
            **p = v.clone();
        }
        Ok(())
    }

    /// Records a forward pass of normalized input `x` on the tape. Returns
    /// the logits and the bound parameter leaves in `named_params` order.
    pub fn forward_on(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let (b, c, _, _) = tape.value(x).dims4()?;
        let (want_c, _, _) = self.config.backbone.input_shape;
        if c != want_c {
            return Err(Error::Shape(format!(
                "model expects {want_c}-channel input, got {c}"
            )));
        }
        let mut param_vars = Vec::new();

        // backbone branch
        let mut cur = x;
        for block in &self.blocks {
            for conv in block {
                let wv = tape.leaf(conv.weight.clone(), trainable);
                param_vars.push(wv);
                cur = tape.conv2d(cur, wv, 1, CONV_PADDING)?;
                cur = tape.relu(cur);
            }
            cur = tape.maxpool2d(cur, POOL, POOL)?;
        }
        let backbone_feat = tape.flatten(cur)?;

        // head vars bound now to keep named_params order
        let mut head_vars = Vec::with_capacity(self.head.len());
        for fc in &self.head {
            let wv = tape.leaf(fc.weight.clone(), trainable);
            let bv = tape.leaf(fc.bias.clone(), trainable);
            param_vars.push(wv);
            param_vars.push(bv);
            head_vars.push((wv, bv));
        }

        // binary feature branch consumes the same input tensor
        let features = match &self.sbfm {
            Some(sbfm) => {
                let (binary, kernel_vars) = sbfm.forward_on(tape, x, trainable)?;
                for layer_vars in kernel_vars {
                    param_vars.extend(layer_vars);
                }
                tape.concat(backbone_feat, binary)?
            }
            None => backbone_feat,
        };

        // fully connected head
        let mut h = features;
        let last = head_vars.len() - 1;
        for (i, &(wv, bv)) in head_vars.iter().enumerate() {
            h = tape.linear(h, wv, bv)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        debug_assert_eq!(tape.value(h).shape(), &[b, self.config.backbone.classes]);
        Ok((h, param_vars))
    }

    /// Convenience forward pass: normalized input in, logits out.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let (out, _) = self.forward_on(&mut tape, xv, false)?;
        Ok(tape.value(out).clone())
    }

    /// Projects all directional kernels into their constraint sets.
    pub fn project_kernels(&mut self) {
        if let Some(sbfm) = &mut self.sbfm {
            sbfm.project_all();
        }
    }

    pub fn kernels_feasible(&self) -> bool {
        self.sbfm.as_ref().is_none_or(Sbfm::all_feasible)
    }

    pub fn sbfm_ref(&self) -> Option<&Sbfm> {
        self.sbfm.as_ref()
    }

    pub fn sbfm_mut(&mut self) -> Option<&mut Sbfm> {
        self.sbfm.as_mut()
    }
}

/// Row-wise argmax (ties resolve to the lowest index).
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (b, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(b);
    for row in logits.data().chunks(k) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Classification accuracy of `model` over a view, in `[0,1]`.
pub fn evaluate(
    model: &FusedModel,
    data: &DatasetView<'_>,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let positions: Vec<usize> = (0..data.len()).collect();
    for chunk in positions.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(chunk);
        let logits = model.logits(&norm.apply(&x)?)?;
        for (pred, label) in predictions(&logits)?.into_iter().zip(labels) {
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Learning-rate step decay: multiply by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_step: Option<LrStep>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: DEFAULT_BATCH,
            optimizer: OptimizerConfig::default(),
            lr_step: None,
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Wall-clock seconds; the only non-deterministic field.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_stats: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test accuracy of the retained (best-validation) parameters; filled by
    /// the harness after the held-out evaluation.
    pub final_test_acc: Option<f64>,
}

/// Trains in place with projected SGD; the model is left holding the
/// parameters of the best-validation epoch.
pub fn train(
    model: &mut FusedModel,
    train_data: &DatasetView<'_>,
    val_data: &DatasetView<'_>,
    norm: &Normalizer,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::Config("train and val sets must be nonempty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    let mut sgd: Sgd = Sgd::new(cfg.optimizer)?;
    let mask = model.trainable_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        epoch_stats: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
        final_test_acc: None,
    };
    let mut best_params: Vec<Tensor> = Vec::new();
    let mut indices: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        if let Some(step) = cfg.lr_step {
            let scale = step.factor.powi((epoch / step.every.max(1)) as i32);
            sgd.set_learning_rate(cfg.optimizer.learning_rate * scale)?;
        }
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (x_raw, labels) = train_data.gather(chunk);
            let x = norm.apply(&x_raw)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let (logits, param_vars) = model.forward_on(&mut tape, xv, true)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::Contract(format!(
                    "training diverged: non-finite loss at epoch {epoch}"
                )));
            }
            loss_sum += loss_val * labels.len() as f64;
            for (pred, label) in predictions(tape.value(logits))?.into_iter().zip(&labels) {
                if pred == *label {
                    correct += 1;
                }
            }
            tape.backward(loss)?;
            let mut grads: Vec<Option<Tensor>> =
                param_vars.iter().map(|&v| tape.take_grad(v)).collect();
            let mut params = model.params_mut();
            let mut step_params: Vec<&mut Tensor> = Vec::with_capacity(params.len());
            let mut step_grads: Vec<Option<Tensor>> = Vec::with_capacity(grads.len());
            for ((param, grad), &trainable) in params.drain(..).zip(grads.drain(..)).zip(&mask) {
                if trainable {
                    step_params.push(param);
                    step_grads.push(grad);
                }
            }
            sgd.step(&mut step_params, &mut step_grads)?;
            model.project_kernels();
        }

        let val_acc = evaluate(model, val_data, norm, cfg.batch_size)?;
        report.epoch_stats.push(EpochStats {
            train_loss: loss_sum / train_data.len() as f64,
            train_acc: correct as f64 / train_data.len() as f64,
            val_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_acc > report.best_val_acc {
            report.best_val_acc = val_acc;
            report.best_epoch = epoch;
            best_params = model.param_values();
        }
    }
    model.set_param_values(&best_params)?;
    Ok(report)
}
