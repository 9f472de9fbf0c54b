//! Pluggable reference models producing the deterministic cloud-free
//! estimate `x0_E = E(y)` that the sampler fuses with the diffusion estimate.
//!
//! Two built-ins ship: a pass-through identity (ablation baseline) and a
//! compact residual CNN trained with L1 loss on paired data. External models
//! plug in through the same trait; the pipeline never looks inside them.

use candle_core::{DType, Device, Tensor};
use candle_nn::{conv2d, AdamW, Conv2d, Module, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::networks::{self};
use crate::tensor::{from_tensor, to_tensor};
use decloud_core::ImageBatch;

/// A model mapping a cloudy image batch to a cloud-free estimate of the same
/// shape, with outputs in the normalized value range.
pub trait ReferenceModel {
    /// Stable identifier used in configs and checkpoints.
    fn name(&self) -> &'static str;
    /// Whether [`train_reference`] may update this model.
    fn trainable(&self) -> bool;
    /// Band count this model accepts, or `None` for any.
    fn band_count(&self) -> Option<usize>;
    /// Evaluation-mode prediction: same shape as `y`, values in [-1, 1].
    fn predict(&self, y: &Tensor) -> Result<Tensor, Error>;
    /// Training-mode prediction without the final range squash (gradients
    /// must not die at the boundary). Defaults to [`Self::predict`].
    fn predict_raw(&self, y: &Tensor) -> Result<Tensor, Error> {
        self.predict(y)
    }
    /// Parameter store, when the model has one.
    fn vars(&self) -> Option<&VarMap> {
        None
    }
}

/// Construction recipe for a reference model, as stored in configs and
/// checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    /// `"identity"` or `"residual_cnn"`.
    pub name: String,
    /// Hidden width of the residual CNN (ignored by identity).
    pub channels: usize,
    /// Residual block count of the residual CNN (ignored by identity).
    pub blocks: usize,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec { name: "residual_cnn".into(), channels: 32, blocks: 6 }
    }
}

/// Build a reference model by name, with reproducible initialization.
pub fn build_reference(
    spec: &ReferenceSpec,
    bands: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Box<dyn ReferenceModel>, Error> {
    match spec.name.as_str() {
        "identity" => Ok(Box::new(IdentityReference)),
        "residual_cnn" => Ok(Box::new(ResidualCnn::new(
            bands,
            spec.channels,
            spec.blocks,
            seed,
            dtype,
            device,
        )?)),
        other => Err(Error::Config(format!(
            "unknown reference model '{other}' (known: identity, residual_cnn)"
        ))),
    }
}

/// Pass-through baseline: predicts the cloudy input itself.
pub struct IdentityReference;

impl ReferenceModel for IdentityReference {
    fn name(&self) -> &'static str {
        "identity"
    }
    fn trainable(&self) -> bool {
        false
    }
    fn band_count(&self) -> Option<usize> {
        None
    }
    fn predict(&self, y: &Tensor) -> Result<Tensor, Error> {
        Ok(y.clone())
    }
}

/// Compact fidelity-driven baseline: a few residual convolution blocks with a
/// global residual connection and a zero-initialized delta head, so the
/// untrained model is an exact identity. Each block's second convolution is
/// also zero-initialized (blocks open gradually during training, which keeps
/// early optimization stable). The evaluation head clamps to [-1, 1];
/// training uses the unclamped output so gradients survive at the range
/// boundary.
pub struct ResidualCnn {
    conv_in: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    conv_out: Conv2d,
    vars: VarMap,
    bands: usize,
}

impl ResidualCnn {
    pub fn new(
        bands: usize,
        channels: usize,
        blocks: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self, Error> {
        if bands == 0 || channels == 0 || blocks == 0 {
            return Err(Error::Config(
                "residual_cnn needs positive bands, channels, and blocks".into(),
            ));
        }
        let mut vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, dtype, device);
        let cfg = candle_nn::Conv2dConfig { padding: 1, ..Default::default() };
        let zero_conv = |ins: usize, outs: usize, pvb: VarBuilder| -> Result<Conv2d, Error> {
            let ws =
                pvb.get_with_hints((outs, ins, 3, 3), "weight", candle_nn::Init::Const(0.0))?;
            let bs = pvb.get_with_hints(outs, "bias", candle_nn::Init::Const(0.0))?;
            Ok(Conv2d::new(ws, Some(bs), cfg))
        };
        let conv_in = conv2d(bands, channels, 3, cfg, vb.pp("conv_in"))?;
        let mut block_list = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let c1 = conv2d(channels, channels, 3, cfg, vb.pp(format!("b{i}_conv1")))?;
            let c2 = zero_conv(channels, channels, vb.pp(format!("b{i}_conv2")))?;
            block_list.push((c1, c2));
        }
        let conv_out = zero_conv(channels, bands, vb.pp("conv_out"))?;
        networks::deterministic_init(&mut vars, seed)?;
        Ok(ResidualCnn { conv_in, blocks: block_list, conv_out, vars, bands })
    }

    fn delta(&self, y: &Tensor) -> Result<Tensor, Error> {
        let (_, c, _, _) = y.dims4()?;
        if c != self.bands {
            return Err(Error::Config(format!(
                "reference model expects {} bands, got {c}",
                self.bands
            )));
        }
        let mut h = candle_nn::ops::silu(&self.conv_in.forward(y)?)?;
        for (c1, c2) in &self.blocks {
            let r = c2.forward(&candle_nn::ops::silu(&c1.forward(&h)?)?)?;
            h = (h + r)?;
        }
        Ok(self.conv_out.forward(&h)?)
    }
}

impl ReferenceModel for ResidualCnn {
    fn name(&self) -> &'static str {
        "residual_cnn"
    }
    fn trainable(&self) -> bool {
        true
    }
    fn band_count(&self) -> Option<usize> {
        Some(self.bands)
    }
    fn predict(&self, y: &Tensor) -> Result<Tensor, Error> {
        Ok(self.predict_raw(y)?.clamp(-1.0, 1.0)?)
    }
    fn predict_raw(&self, y: &Tensor) -> Result<Tensor, Error> {
        Ok((y + self.delta(y)?)?)
    }
    fn vars(&self) -> Option<&VarMap> {
        Some(&self.vars)
    }
}

/// Optimization settings for [`train_reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate decays linearly to `learning_rate * final_lr_fraction`
    /// over the run (1.0 = constant).
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for ReferenceTrainConfig {
    fn default() -> Self {
        ReferenceTrainConfig {
            iterations: 600,
            batch_size: 8,
            learning_rate: 3e-4,
            final_lr_fraction: 0.02,
            seed: 0,
        }
    }
}

/// Fit a trainable reference model with L1 loss on paired data, updating its
/// parameters in place. Returns the per-iteration loss curve (empty when
/// `iterations` is 0, in which case parameters are untouched).
pub fn train_reference(
    model: &dyn ReferenceModel,
    cloudy: &ImageBatch,
    clear: &ImageBatch,
    device: &Device,
    cfg: &ReferenceTrainConfig,
) -> Result<Vec<f64>, Error> {
    if !model.trainable() {
        return Err(Error::Config(format!(
            "reference model '{}' is not trainable",
            model.name()
        )));
    }
    let vars = model
        .vars()
        .ok_or_else(|| Error::Internal("trainable model exposes no parameters".into()))?;
    if cloudy.shape() != clear.shape() {
        return Err(Error::Data(format!(
            "paired batches disagree in shape: {:?} vs {:?}",
            cloudy.shape(),
            clear.shape()
        )));
    }
    let n = cloudy.batch_len();
    if n == 0 {
        return Err(Error::Data("reference training set is empty".into()));
    }
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    if !(0.0..=1.0).contains(&cfg.final_lr_fraction) {
        return Err(Error::Config("final_lr_fraction must be in [0, 1]".into()));
    }
    let mut opt = AdamW::new(
        vars.all_vars(),
        ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let frac = iter as f64 / cfg.iterations.max(1) as f64;
        opt.set_learning_rate(cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac));
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let y_parts: Vec<ImageBatch> = idx.iter().map(|&i| cloudy.single(i)).collect();
        let x_parts: Vec<ImageBatch> = idx.iter().map(|&i| clear.single(i)).collect();
        let y = to_tensor(&ImageBatch::stack(&y_parts)?, device)?;
        let x = to_tensor(&ImageBatch::stack(&x_parts)?, device)?;
        let pred = model.predict_raw(&y)?;
        let loss = (pred - x)?.abs()?.mean_all()?;
        let val = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "reference".into(), iteration: iter });
        }
        opt.backward_step(&loss)?;
        losses.push(val);
    }
    Ok(losses)
}

/// Evaluation-mode prediction on an [`ImageBatch`], detached from any graph.
pub fn predict_reference(
    model: &dyn ReferenceModel,
    y: &ImageBatch,
    device: &Device,
) -> Result<ImageBatch, Error> {
    if let Some(b) = model.band_count() {
        if b != y.channels() {
            return Err(Error::Config(format!(
                "reference model expects {b} bands, got {}",
                y.channels()
            )));
        }
    }
    let t = to_tensor(y, device)?;
    from_tensor(&model.predict(&t)?.detach())
}

/// Convenience digest of the model's parameters (see
/// [`networks::param_fingerprint`]); `None` for parameterless models.
pub fn reference_fingerprint(
    model: &dyn ReferenceModel,
) -> Result<Option<Vec<(String, f64, f64)>>, Error> {
    model.vars().map(networks::param_fingerprint).transpose()
}
