//! The three losses and the coarse-to-fine protocol that drives them: first
//! the noise predictor alone on reduced-size images, then the weighting
//! network against the frozen predictor, then both jointly at full size.
//!
//! Losses are built at the tensor level so gradients flow through whichever
//! networks a stage declares trainable. The weighting loss detaches the
//! diffusion branch's clean estimate before blending, so its backward pass
//! reaches only the weighting network — the freeze contracts below are
//! structural, not bookkeeping.

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::DenoiserBundle;
use crate::error::Error;
use crate::networks::UNet;
use crate::reference::predict_reference;
use crate::tensor::{coeff_tensor, normal_batch, to_tensor};
use decloud_core::schedule::Schedule;
use decloud_core::ImageBatch;

/// Plateau detection horizon: loss means are compared over adjacent windows
/// of this many iterations.
const PLATEAU_WINDOW: usize = 200;
/// Relative improvement below this over one window ends the stage early.
const PLATEAU_THRESHOLD: f64 = 0.01;

/// Which part of the model a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Noise predictor alone, on reduced-size images.
    CnpSmall,
    /// Weighting network alone, against the frozen noise predictor.
    WaFrozen,
    /// Both networks together at full size.
    Joint,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::CnpSmall => "cnp_small",
            Stage::WaFrozen => "wa_frozen",
            Stage::Joint => "joint",
        }
    }

    /// The stage whose checkpoint must exist before this one may run.
    pub fn prerequisite(&self) -> Option<Stage> {
        match self {
            Stage::CnpSmall => None,
            Stage::WaFrozen => Some(Stage::CnpSmall),
            Stage::Joint => Some(Stage::WaFrozen),
        }
    }

    pub fn trains_cnp(&self) -> bool {
        matches!(self, Stage::CnpSmall | Stage::Joint)
    }

    pub fn trains_wa(&self) -> bool {
        matches!(self, Stage::WaFrozen | Stage::Joint)
    }

    /// All stages in protocol order.
    pub fn all() -> [Stage; 3] {
        [Stage::CnpSmall, Stage::WaFrozen, Stage::Joint]
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "cnp_small" => Ok(Stage::CnpSmall),
            "wa_frozen" => Ok(Stage::WaFrozen),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::Usage(format!(
                "unknown stage '{other}' (known: cnp_small, wa_frozen, joint)"
            ))),
        }
    }
}

/// Settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    /// Square side the training images must have (the caller resizes).
    pub image_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Balance of noise loss against blend loss (joint stage only).
    pub lambda: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: Stage::CnpSmall,
            image_size: 32,
            batch_size: 8,
            learning_rate: 1e-5,
            iterations: 1000,
            lambda: 1.0,
            seed: 0,
        }
    }
}

/// Per-iteration loss curves of one stage run. Inactive losses stay empty
/// (`total` always covers the optimized objective).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: String,
    pub total: Vec<f64>,
    pub ddpm: Vec<f64>,
    pub wa: Vec<f64>,
    /// The stage ended early because the loss stopped improving.
    pub plateaued: bool,
}

impl LossReport {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    /// One row per iteration; inactive loss columns are left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total,ddpm,wa\n");
        for i in 0..self.total.len() {
            let cell = |v: &Vec<f64>| v.get(i).map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                i,
                self.total[i],
                cell(&self.ddpm),
                cell(&self.wa)
            ));
        }
        out
    }
}

/// Everything one noising draw produces: the optimized squared-error loss,
/// the noised images, and the clean estimate recovered from the prediction.
pub struct NoiseTerms {
    /// Mean squared error between the drawn and predicted noise.
    pub loss: Tensor,
    /// x_t = √ᾱ_t·x₀ + √(1 − ᾱ_t)·ε, per sample.
    pub xt: Tensor,
    /// x_{0,ε,t} = (x_t − √(1 − ᾱ_t)·ε̂)/√ᾱ_t, still attached to the graph.
    pub x0_eps: Tensor,
}

fn check_steps(ts: &[usize], s: &Schedule) -> Result<(), Error> {
    if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > s.t_max()) {
        return Err(Error::Config(format!(
            "step {t} outside 1..={} in training draw",
            s.t_max()
        )));
    }
    Ok(())
}

/// Forward-noise `x0` to the per-sample steps `ts`, predict the noise, and
/// assemble the loss plus both reconstructions.
pub fn ddpm_terms(
    cnp: &UNet,
    x0: &Tensor,
    y: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &Schedule,
    train: bool,
) -> Result<NoiseTerms, Error> {
    check_steps(ts, s)?;
    let dev = x0.device();
    let ab: Vec<f64> = ts.iter().map(|&t| s.alpha_bar(t)).collect();
    let root: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
    let noise_root: Vec<f64> = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
    let root_t = coeff_tensor(&root, dev, x0.dtype())?;
    let noise_root_t = coeff_tensor(&noise_root, dev, x0.dtype())?;
    let xt = (x0.broadcast_mul(&root_t)? + eps.broadcast_mul(&noise_root_t)?)?;
    let eps_hat = cnp.forward(&Tensor::cat(&[&xt, y], 1)?, ts, train)?;
    let loss = (&eps_hat - eps)?.sqr()?.mean_all()?;
    let inv: Vec<f64> = root.iter().map(|r| 1.0 / r).collect();
    let inv_t = coeff_tensor(&inv, dev, x0.dtype())?;
    let x0_eps = ((xt.clone() - eps_hat.broadcast_mul(&noise_root_t)?)?).broadcast_mul(&inv_t)?;
    Ok(NoiseTerms { loss, xt, x0_eps })
}

/// Squared-error noise-prediction loss (the stage-1 objective).
pub fn loss_ddpm(
    cnp: &UNet,
    x0: &Tensor,
    y: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &Schedule,
) -> Result<Tensor, Error> {
    Ok(ddpm_terms(cnp, x0, y, ts, eps, s, true)?.loss)
}

/// Blend-quality loss: L1 between the true clean image and the fused
/// estimate under the predicted weights. The diffusion estimate is detached
/// here, so this loss trains only the weighting network.
#[allow(clippy::too_many_arguments)]
pub fn loss_wa(
    wa: &UNet,
    xt: &Tensor,
    y: &Tensor,
    x0_eps: &Tensor,
    x0_e: &Tensor,
    x0_true: &Tensor,
    ts: &[usize],
    train: bool,
) -> Result<Tensor, Error> {
    let sg = x0_eps.detach();
    let w = wa.forward(&Tensor::cat(&[xt, y, x0_e], 1)?, ts, train)?;
    let keep = w.affine(-1.0, 1.0)?; // 1 − W
    let fused = (keep.mul(&sg)? + w.mul(x0_e)?)?;
    Ok((x0_true - fused)?.abs()?.mean_all()?)
}

/// λ·L_DDPM + L_WA.
pub fn loss_joint(l_ddpm: &Tensor, l_wa: &Tensor, lambda: f64) -> Result<Tensor, Error> {
    Ok((l_ddpm.affine(lambda, 0.0)? + l_wa)?)
}

fn scalar_f64(t: &Tensor) -> Result<f64, Error> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean of `v[lo..hi]`.
fn window_mean(v: &[f64], lo: usize, hi: usize) -> f64 {
    v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
}

fn validate_stage_inputs(
    bundle: &DenoiserBundle,
    cloudy: &ImageBatch,
    clear: &ImageBatch,
    cfg: &StageConfig,
) -> Result<(), Error> {
    if cloudy.shape() != clear.shape() {
        return Err(Error::Data(format!(
            "paired batches disagree in shape: {:?} vs {:?}",
            cloudy.shape(),
            clear.shape()
        )));
    }
    if cloudy.batch_len() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if cloudy.channels() != bundle.bands() {
        return Err(Error::Data(format!(
            "training data has {} bands but the bundle expects {}",
            cloudy.channels(),
            bundle.bands()
        )));
    }
    if cloudy.height() != cfg.image_size || cloudy.width() != cfg.image_size {
        return Err(Error::Config(format!(
            "stage {} expects {}x{} images, got {}x{}",
            cfg.stage,
            cfg.image_size,
            cfg.image_size,
            cloudy.height(),
            cloudy.width()
        )));
    }
    let div = bundle.cnp.spec().size_divisor().max(bundle.wa.spec().size_divisor());
    if cfg.image_size % div != 0 {
        return Err(Error::Config(format!(
            "image size {} must be divisible by {div}",
            cfg.image_size
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if cfg.stage == Stage::Joint && !(cfg.lambda > 0.0) {
        return Err(Error::Config(format!(
            "lambda must be positive for the joint stage, got {}",
            cfg.lambda
        )));
    }
    Ok(())
}

/// Run one training stage in place, updating only the networks the stage
/// declares trainable, and return the loss curves. Ends early once the loss
/// stops improving by more than 1% per 200-iteration window. On success the
/// bundle's metadata records this stage.
pub fn run_stage(
    bundle: &mut DenoiserBundle,
    cloudy: &ImageBatch,
    clear: &ImageBatch,
    cfg: &StageConfig,
) -> Result<LossReport, Error> {
    validate_stage_inputs(bundle, cloudy, clear, cfg)?;
    let mut report = LossReport { stage: cfg.stage.name().into(), ..Default::default() };
    if cfg.iterations == 0 {
        bundle.meta.stage = cfg.stage.name().into();
        return Ok(report);
    }

    // The reference prediction for the whole set, once; only the weighting
    // stages read it.
    let x0_e_all = if cfg.stage.trains_wa() {
        Some(predict_reference(bundle.reference.as_ref(), cloudy, &bundle.device)?)
    } else {
        None
    };

    let mut vars: Vec<Var> = Vec::new();
    if cfg.stage.trains_cnp() {
        vars.extend(bundle.cnp_vars.all_vars());
    }
    if cfg.stage.trains_wa() {
        vars.extend(bundle.wa_vars.all_vars());
    }
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;

    let n = cloudy.batch_len();
    let t_max = bundle.schedule.t_max();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for iter in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(1..=t_max)).collect();
        let shape = (cfg.batch_size, bundle.bands(), cfg.image_size, cfg.image_size);
        let eps = to_tensor(&normal_batch(&mut rng, shape)?, &bundle.device)?;

        let gather = |b: &ImageBatch| -> Result<ImageBatch, Error> {
            let parts: Vec<ImageBatch> = idx.iter().map(|&i| b.single(i)).collect();
            Ok(ImageBatch::stack(&parts)?)
        };
        let x0 = to_tensor(&gather(clear)?, &bundle.device)?;
        let y = to_tensor(&gather(cloudy)?, &bundle.device)?;

        let loss = match cfg.stage {
            Stage::CnpSmall => {
                let terms = ddpm_terms(&bundle.cnp, &x0, &y, &ts, &eps, &bundle.schedule, true)?;
                report.ddpm.push(scalar_f64(&terms.loss)?);
                terms.loss
            }
            Stage::WaFrozen => {
                let terms = ddpm_terms(&bundle.cnp, &x0, &y, &ts, &eps, &bundle.schedule, false)?;
                let x0_e = to_tensor(&gather(x0_e_all.as_ref().unwrap())?, &bundle.device)?;
                let l_wa = loss_wa(
                    &bundle.wa,
                    &terms.xt,
                    &y,
                    &terms.x0_eps,
                    &x0_e,
                    &x0,
                    &ts,
                    true,
                )?;
                report.wa.push(scalar_f64(&l_wa)?);
                l_wa
            }
            Stage::Joint => {
                let terms = ddpm_terms(&bundle.cnp, &x0, &y, &ts, &eps, &bundle.schedule, true)?;
                let x0_e = to_tensor(&gather(x0_e_all.as_ref().unwrap())?, &bundle.device)?;
                let l_wa = loss_wa(
                    &bundle.wa,
                    &terms.xt,
                    &y,
                    &terms.x0_eps,
                    &x0_e,
                    &x0,
                    &ts,
                    true,
                )?;
                report.ddpm.push(scalar_f64(&terms.loss)?);
                report.wa.push(scalar_f64(&l_wa)?);
                loss_joint(&terms.loss, &l_wa, cfg.lambda)?
            }
        };
        let val = scalar_f64(&loss)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { stage: cfg.stage.name().into(), iteration: iter });
        }
        report.total.push(val);
        opt.backward_step(&loss)?;

        let done = report.total.len();
        if done % PLATEAU_WINDOW == 0 && done >= 2 * PLATEAU_WINDOW {
            let prev = window_mean(&report.total, done - 2 * PLATEAU_WINDOW, done - PLATEAU_WINDOW);
            let cur = window_mean(&report.total, done - PLATEAU_WINDOW, done);
            if (prev - cur) / prev.abs().max(1e-12) < PLATEAU_THRESHOLD {
                report.plateaued = true;
                break;
            }
        }
    }
    bundle.meta.stage = cfg.stage.name().into();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::BundleSpec;
    use crate::networks::param_fingerprint;
    use crate::reference::ReferenceSpec;
    use crate::tensor::from_tensor;
    use candle_core::Device;
    use decloud_core::cloud::{synth_cloud_overlay, value_noise_field};

    fn test_bundle(t_max: usize) -> DenoiserBundle {
        let mut spec = BundleSpec::tiny(2);
        spec.schedule.steps = t_max;
        spec.reference = ReferenceSpec { name: "residual_cnn".into(), channels: 8, blocks: 2 };
        DenoiserBundle::init(&spec, 23, DType::F32, &Device::Cpu).unwrap()
    }

    fn synth_set(count: usize, size: usize, seed: u64) -> (ImageBatch, ImageBatch) {
        let mut cloudy = Vec::new();
        let mut clear = Vec::new();
        for i in 0..count as u64 {
            let mut data = Vec::new();
            for b in 0..2u64 {
                let f = value_noise_field(size, size, 4, 2, seed + 13 * i + b).unwrap();
                data.extend(f.iter().map(|v| (v * 2.0 - 1.0) * 0.6));
            }
            let clean = ImageBatch::from_vec(data, (1, 2, size, size)).unwrap();
            let overlay = synth_cloud_overlay(&clean.image(0), 0.4, 1.0, seed + 77 + i).unwrap();
            cloudy.push(overlay);
            clear.push(clean);
        }
        (ImageBatch::stack(&cloudy).unwrap(), ImageBatch::stack(&clear).unwrap())
    }

    fn stage_cfg(stage: Stage, size: usize, iterations: usize) -> StageConfig {
        StageConfig {
            stage,
            image_size: size,
            batch_size: 2,
            learning_rate: 1e-4,
            iterations,
            lambda: 1.0,
            seed: 9,
        }
    }

    #[test]
    fn joint_loss_is_the_stated_linear_combination() {
        let dev = Device::Cpu;
        let s = |v: f32| Tensor::new(v, &dev).unwrap();
        let got = loss_joint(&s(2.0), &s(3.0), 1.0).unwrap();
        assert_eq!(got.to_scalar::<f32>().unwrap(), 5.0);
        let got = loss_joint(&s(1.7), &s(0.0), 1.0).unwrap();
        assert_eq!(got.to_scalar::<f32>().unwrap(), 1.7);
        let got = loss_joint(&s(1.5), &s(0.5), 2.0).unwrap();
        assert_eq!(got.to_scalar::<f32>().unwrap(), 3.5);
    }

    #[test]
    fn noise_loss_is_zero_when_prediction_matches_and_unit_against_fresh_noise() {
        let bundle = test_bundle(50);
        let dev = &bundle.device;
        // The fresh predictor's zeroed head returns ε̂ ≡ 0; drawing ε = 0
        // makes prediction and target coincide exactly.
        let x0 = Tensor::zeros((2, 2, 16, 16), DType::F32, dev).unwrap();
        let y = Tensor::zeros((2, 2, 16, 16), DType::F32, dev).unwrap();
        let zero_eps = Tensor::zeros((2, 2, 16, 16), DType::F32, dev).unwrap();
        let l = loss_ddpm(&bundle.cnp, &x0, &y, &[3, 40], &zero_eps, &bundle.schedule).unwrap();
        assert_eq!(l.to_scalar::<f32>().unwrap(), 0.0);

        // Against standard normal noise the same ε̂ ≡ 0 head scores the
        // noise variance: ≈ 1 over enough pixels.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = (50, 2, 32, 32); // 102 400 draws
        let eps = to_tensor(&normal_batch(&mut rng, shape).unwrap(), dev).unwrap();
        let x0 = Tensor::zeros(shape, DType::F32, dev).unwrap();
        let y = Tensor::zeros(shape, DType::F32, dev).unwrap();
        let ts: Vec<usize> = (0..50).map(|i| 1 + (i * 49) / 49).collect();
        let l = loss_ddpm(&bundle.cnp, &x0, &y, &ts, &eps, &bundle.schedule).unwrap();
        let v = l.to_scalar::<f32>().unwrap() as f64;
        assert!((v - 1.0).abs() < 0.05, "unit-variance oracle: got {v}");
    }

    #[test]
    fn noising_terms_round_trip_the_clean_image() {
        let bundle = test_bundle(50);
        let dev = &bundle.device;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0_b = normal_batch(&mut rng, (2, 2, 16, 16)).unwrap().clip(-1.0, 1.0);
        let x0 = to_tensor(&x0_b, dev).unwrap();
        let y = Tensor::zeros((2, 2, 16, 16), DType::F32, dev).unwrap();
        let zero_eps = Tensor::zeros((2, 2, 16, 16), DType::F32, dev).unwrap();
        // ε = 0 and ε̂ ≡ 0 (fresh head): x_t = √ᾱ·x₀ and the recovered
        // estimate divides the scale right back out.
        let terms =
            ddpm_terms(&bundle.cnp, &x0, &y, &[17, 40], &zero_eps, &bundle.schedule, false)
                .unwrap();
        let back = from_tensor(&terms.x0_eps).unwrap();
        for (a, b) in back.data().iter().zip(x0_b.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let ab = bundle.schedule.alpha_bar(17);
        let xt = from_tensor(&terms.xt).unwrap();
        for (a, b) in xt.data().iter().take(512).zip(x0_b.data()) {
            assert!((a - ab.sqrt() * b).abs() < 1e-5);
        }
    }

    #[test]
    fn blend_loss_vanishes_when_all_estimates_agree() {
        let bundle = test_bundle(50);
        let dev = &bundle.device;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = to_tensor(&normal_batch(&mut rng, (1, 2, 16, 16)).unwrap(), dev).unwrap();
        let xt = to_tensor(&normal_batch(&mut rng, (1, 2, 16, 16)).unwrap(), dev).unwrap();
        let y = to_tensor(&normal_batch(&mut rng, (1, 2, 16, 16)).unwrap(), dev).unwrap();
        // Both branches equal the truth: any W in [0, 1] blends to the truth.
        let l = loss_wa(&bundle.wa, &xt, &y, &truth, &truth, &truth, &[9], false).unwrap();
        assert_eq!(l.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn blend_loss_matches_manual_recomputation() {
        let bundle = test_bundle(50);
        let dev = &bundle.device;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mk = |rng: &mut ChaCha8Rng| {
            to_tensor(&normal_batch(rng, (1, 2, 16, 16)).unwrap(), dev).unwrap()
        };
        let xt = mk(&mut rng);
        let y = mk(&mut rng);
        let x0_eps = mk(&mut rng);
        let x0_e = mk(&mut rng);
        let truth = mk(&mut rng);
        let got = loss_wa(&bundle.wa, &xt, &y, &x0_eps, &x0_e, &truth, &[21], false).unwrap();
        let w_in = Tensor::cat(&[&xt, &y, &x0_e], 1).unwrap();
        let w = from_tensor(&bundle.wa.forward(&w_in, &[21], false).unwrap()).unwrap();
        let (ev, sv, tv) = (
            from_tensor(&x0_e).unwrap(),
            from_tensor(&x0_eps).unwrap(),
            from_tensor(&truth).unwrap(),
        );
        let mut sum = 0.0;
        for i in 0..w.data().len() {
            let fused = (1.0 - w.data()[i]) * sv.data()[i] + w.data()[i] * ev.data()[i];
            sum += (tv.data()[i] - fused).abs();
        }
        let want = sum / w.data().len() as f64;
        let gotv = got.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!((gotv - want).abs() < 1e-6, "{gotv} vs {want}");
    }

    #[test]
    fn blend_loss_backward_never_touches_the_noise_predictor() {
        let bundle = test_bundle(50);
        let dev = &bundle.device;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0_b = normal_batch(&mut rng, (2, 2, 16, 16)).unwrap().clip(-1.0, 1.0);
        let x0 = to_tensor(&x0_b, dev).unwrap();
        let y = to_tensor(&normal_batch(&mut rng, (2, 2, 16, 16)).unwrap(), dev).unwrap();
        let eps = to_tensor(&normal_batch(&mut rng, (2, 2, 16, 16)).unwrap(), dev).unwrap();
        let ts = [5usize, 44];
        let terms = ddpm_terms(&bundle.cnp, &x0, &y, &ts, &eps, &bundle.schedule, true).unwrap();
        let x0_e = to_tensor(&x0_b, dev).unwrap();
        let l = loss_wa(
            &bundle.wa, &terms.xt, &y, &terms.x0_eps, &x0_e, &x0, &ts, true,
        )
        .unwrap();
        let grads = l.backward().unwrap();
        // Exactly zero means absent: the graph never reaches those leaves.
        for v in bundle.cnp_vars.all_vars() {
            if let Some(g) = grads.get(v.as_tensor()) {
                let total = g
                    .abs()
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_dtype(DType::F64)
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap();
                assert_eq!(total, 0.0, "leaked gradient into the noise predictor");
            }
        }
        // And the weighting network does receive gradient somewhere.
        let mut wa_grad = 0.0;
        for v in bundle.wa_vars.all_vars() {
            if let Some(g) = grads.get(v.as_tensor()) {
                wa_grad += g
                    .abs()
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_dtype(DType::F64)
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap();
            }
        }
        assert!(wa_grad > 0.0, "weighting network got no gradient at all");
    }

    #[test]
    fn stages_update_exactly_their_declared_networks() {
        let mut bundle = test_bundle(20);
        let (cloudy, clear) = synth_set(6, 16, 3);
        let fp = |b: &DenoiserBundle| {
            (
                param_fingerprint(&b.cnp_vars).unwrap(),
                param_fingerprint(&b.wa_vars).unwrap(),
                param_fingerprint(b.reference.vars().unwrap()).unwrap(),
            )
        };

        let before = fp(&bundle);
        let report =
            run_stage(&mut bundle, &cloudy, &clear, &stage_cfg(Stage::CnpSmall, 16, 3)).unwrap();
        let after = fp(&bundle);
        assert_eq!(report.len(), 3);
        assert!(report.total.iter().all(|v| v.is_finite()));
        assert_eq!(report.ddpm.len(), 3);
        assert!(report.wa.is_empty());
        assert_ne!(before.0, after.0, "stage 1 must move the noise predictor");
        assert_eq!(before.1, after.1, "stage 1 must not touch the weighting net");
        assert_eq!(before.2, after.2, "the reference model is always frozen");
        assert_eq!(bundle.meta.stage, "cnp_small");

        let before = fp(&bundle);
        let report =
            run_stage(&mut bundle, &cloudy, &clear, &stage_cfg(Stage::WaFrozen, 16, 3)).unwrap();
        let after = fp(&bundle);
        assert_eq!(before.0, after.0, "stage 2 must keep the noise predictor frozen");
        assert_ne!(before.1, after.1, "stage 2 must move the weighting net");
        assert_eq!(before.2, after.2);
        assert!(report.ddpm.is_empty());
        assert_eq!(report.wa.len(), 3);
        assert_eq!(bundle.meta.stage, "wa_frozen");

        let before = fp(&bundle);
        let report =
            run_stage(&mut bundle, &cloudy, &clear, &stage_cfg(Stage::Joint, 16, 2)).unwrap();
        let after = fp(&bundle);
        assert_ne!(before.0, after.0, "joint stage must move the noise predictor");
        assert_ne!(before.1, after.1, "joint stage must move the weighting net");
        assert_eq!(before.2, after.2);
        assert_eq!(report.ddpm.len(), 2);
        assert_eq!(report.wa.len(), 2);
        for i in 0..2 {
            // The runtime sums in f32; compare at single precision.
            let want = report.ddpm[i] + report.wa[i];
            assert!((report.total[i] - want).abs() < 1e-5, "{} vs {want}", report.total[i]);
        }
        assert_eq!(bundle.meta.stage, "joint");
    }

    #[test]
    fn run_stage_rejects_inconsistent_inputs() {
        let mut bundle = test_bundle(20);
        let (cloudy, clear) = synth_set(4, 16, 5);
        let cfg = stage_cfg(Stage::CnpSmall, 16, 1);

        let wrong_size = StageConfig { image_size: 32, ..cfg.clone() };
        assert!(run_stage(&mut bundle, &cloudy, &clear, &wrong_size).is_err());
        let no_batch = StageConfig { batch_size: 0, ..cfg.clone() };
        assert!(run_stage(&mut bundle, &cloudy, &clear, &no_batch).is_err());
        let bad_lambda = StageConfig { stage: Stage::Joint, lambda: 0.0, ..cfg.clone() };
        assert!(run_stage(&mut bundle, &cloudy, &clear, &bad_lambda).is_err());
        let (short, _) = synth_set(2, 16, 6);
        assert!(run_stage(&mut bundle, &short, &clear, &cfg).is_err());
        let three_band = ImageBatch::zeros((4, 3, 16, 16)).unwrap();
        assert!(run_stage(&mut bundle, &three_band, &three_band, &cfg).is_err());
    }

    #[test]
    fn zero_iterations_completes_without_touching_parameters() {
        let mut bundle = test_bundle(20);
        let (cloudy, clear) = synth_set(4, 16, 7);
        let before = param_fingerprint(&bundle.cnp_vars).unwrap();
        let report =
            run_stage(&mut bundle, &cloudy, &clear, &stage_cfg(Stage::CnpSmall, 16, 0)).unwrap();
        assert!(report.is_empty());
        assert!(!report.plateaued);
        assert_eq!(before, param_fingerprint(&bundle.cnp_vars).unwrap());
        assert_eq!(bundle.meta.stage, "cnp_small");
    }

    #[test]
    fn flat_loss_triggers_the_plateau_stop() {
        let mut bundle = test_bundle(20);
        let (cloudy, clear) = synth_set(4, 16, 8);
        // Zero learning rate: parameters never move, so the loss cannot
        // improve between windows and the detector must fire at the first
        // comparison point.
        let cfg = StageConfig {
            stage: Stage::CnpSmall,
            image_size: 16,
            batch_size: 1,
            learning_rate: 0.0,
            iterations: 600,
            lambda: 1.0,
            seed: 2,
        };
        let report = run_stage(&mut bundle, &cloudy, &clear, &cfg).unwrap();
        assert!(report.plateaued);
        assert_eq!(report.len(), 2 * PLATEAU_WINDOW);
    }

    #[test]
    fn stage_metadata_round_trips() {
        assert_eq!("cnp_small".parse::<Stage>().unwrap(), Stage::CnpSmall);
        assert_eq!("wa_frozen".parse::<Stage>().unwrap(), Stage::WaFrozen);
        assert_eq!("joint".parse::<Stage>().unwrap(), Stage::Joint);
        assert!("warmup".parse::<Stage>().is_err());
        assert_eq!(Stage::WaFrozen.prerequisite(), Some(Stage::CnpSmall));
        assert_eq!(Stage::CnpSmall.prerequisite(), None);
        let cfg = StageConfig { stage: Stage::Joint, ..Default::default() };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: StageConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let report = LossReport {
            stage: "joint".into(),
            total: vec![1.0, 0.5],
            ddpm: vec![0.6, 0.3],
            wa: vec![0.4, 0.2],
            plateaued: false,
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,1,0.6,0.4"));
    }
}
