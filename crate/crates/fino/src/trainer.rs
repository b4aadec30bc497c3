//! The training pipeline: dual encoding of the clean/noisy pair, latent
//! swapping, reconstruction, loss assembly, one ADAM step per batch,
//! periodic held-out evaluation, and checkpointing.
//!
//! Determinism contract: (seed, config, dataset) fully determine the
//! parameter trajectory. Every per-step random draw comes from a stream
//! derived from (seed, step), so a resumed run reproduces a continuous
//! one bit-exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::ckpt;
use crate::data::{self, Image};
use crate::error::{FinoError, Result};
use crate::flow::{self, FlowModel};
use crate::infer::{denoise, DenoiseMode};
use crate::metrics;
use crate::objective::{self, LossParts, LossWeights, PatchConfig};
use crate::optim::AdamState;
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::{Dtype, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum TrainMode {
    /// Single known σ (on the [0,1] scale).
    FixedSigma(f64),
    /// σ drawn uniformly from (low, high] per sample.
    Blind { low: f64, high: f64 },
    /// Real-noise mode: correlation loss dropped, pairs taken as given.
    Real,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub hidden_width: usize,
    pub weights: LossWeights,
    pub patch: PatchConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patch_size: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub mode: TrainMode,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; paper-scale geometry (K=12, patch 144) is a
    /// config change away.
    fn default() -> Self {
        TrainConfig {
            num_blocks: 2,
            layers_per_block: 4,
            hidden_width: 16,
            weights: LossWeights::default(),
            patch: PatchConfig::default(),
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patch_size: 32,
            batch_size: 4,
            steps: 2000,
            mode: TrainMode::FixedSigma(25.0 / 255.0),
            seed: 0,
            eval_every: 200,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let f = 1usize << self.num_blocks;
        if self.patch_size % f != 0 {
            return Err(FinoError::Invalid(format!(
                "patch_size {} not divisible by 2^blocks = {f}",
                self.patch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(FinoError::Invalid("batch_size must be >= 1".into()));
        }
        if let TrainMode::Blind { low, high } = self.mode {
            if !(low < high) || low < 0.0 {
                return Err(FinoError::Invalid(format!(
                    "blind sigma range ({low}, {high}] invalid"
                )));
            }
        }
        Ok(())
    }

    /// Effective weights: real mode forces the correlation term off.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.mode == TrainMode::Real {
            w.enable_noise = false;
        }
        w
    }

    /// Flat key=value config file; '#' starts a comment. σ keys use the
    /// 0–255 convention of the literature.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| FinoError::io(path, e))?;
        let mut cfg = TrainConfig::default();
        let mut mode_kind = String::from("fixed");
        let (mut sigma, mut lo, mut hi) = (25.0, 0.0, 55.0);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FinoError::format(path, format!("line {}: expected key=value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| FinoError::format(path, format!("line {}: bad {what} '{v}'", lineno + 1));
            macro_rules! num {
                ($t:ty) => {
                    v.parse::<$t>().map_err(|_| bad(k))?
                };
            }
            match k {
                "blocks" => cfg.num_blocks = num!(usize),
                "layers_per_block" => cfg.layers_per_block = num!(usize),
                "hidden_width" => cfg.hidden_width = num!(usize),
                "alpha" => cfg.weights.alpha = num!(f64),
                "beta" => cfg.weights.beta = num!(f64),
                "gamma" => cfg.weights.gamma = num!(f64),
                "enable_rec" => cfg.weights.enable_rec = num!(bool),
                "enable_cnt" => cfg.weights.enable_cnt = num!(bool),
                "enable_noise" => cfg.weights.enable_noise = num!(bool),
                "patch_edge" => cfg.patch.edge = num!(usize),
                "patch_stride" => cfg.patch.stride = num!(usize),
                "lr" => cfg.lr = num!(f64),
                "beta1" => cfg.beta1 = num!(f64),
                "beta2" => cfg.beta2 = num!(f64),
                "epsilon" => cfg.epsilon = num!(f64),
                "patch_size" => cfg.patch_size = num!(usize),
                "batch_size" => cfg.batch_size = num!(usize),
                "steps" => cfg.steps = num!(u64),
                "seed" => cfg.seed = num!(u64),
                "eval_every" => cfg.eval_every = num!(u64),
                "checkpoint_path" => cfg.checkpoint_path = Some(PathBuf::from(v)),
                "mode" => mode_kind = v.to_string(),
                "sigma" => sigma = num!(f64),
                "sigma_lo" => lo = num!(f64),
                "sigma_hi" => hi = num!(f64),
                other => {
                    return Err(FinoError::format(
                        path,
                        format!("line {}: unknown key '{other}'", lineno + 1),
                    ))
                }
            }
        }
        cfg.mode = match mode_kind.as_str() {
            "fixed" => TrainMode::FixedSigma(sigma / 255.0),
            "blind" => TrainMode::Blind {
                low: lo / 255.0,
                high: hi / 255.0,
            },
            "real" => TrainMode::Real,
            other => {
                return Err(FinoError::format(
                    path,
                    format!("unknown mode '{other}' (fixed|blind|real)"),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: u64,
    pub total_loss: f64,
    pub l_reg: f64,
    pub l_rec: f64,
    pub l_cnt: f64,
    pub l_noise: f64,
    pub eval_psnr: Option<f64>,
    pub wall_ms: u64,
}

impl TrainLogRecord {
    pub fn csv_header() -> &'static str {
        "step,total_loss,l_reg,l_rec,l_cnt,l_noise,eval_psnr,wall_ms"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.total_loss,
            self.l_reg,
            self.l_rec,
            self.l_cnt,
            self.l_noise,
            self.eval_psnr.map(|p| p.to_string()).unwrap_or_default(),
            self.wall_ms
        )
    }
}

pub struct StepLosses {
    pub total: f64,
    pub reg: f64,
    pub rec: f64,
    pub cnt: f64,
    pub noise: f64,
}

/// Assemble the full training loss for one aligned batch on `tape`:
/// dual encode, swap the noise codes, reconstruct both directions,
/// decode the clean code of y against a fresh noise draw.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'t>(
    tape: &'t Tape,
    tm: &flow::TapeModel<'t>,
    x_batch: &Tensor,
    y_batch: &Tensor,
    n_batch: &Tensor,
    sigma_batch: &[f64],
    weights: &LossWeights,
    patch: PatchConfig,
    z_r: Tensor,
) -> Result<(crate::tape::Var<'t>, LossParts<'t>)> {
    let x = tape.constant(x_batch.clone());
    let y = tape.constant(y_batch.clone());
    let n = tape.constant(n_batch.clone());

    let zx = flow::flow_forward(x, tm)?;
    let zy = flow::flow_forward(y, tm)?;
    let (zc_x, _) = zx.split()?;
    let (zc_y, _) = zy.split()?;

    // ŷ = Flow⁻¹(z_c^x, z_n^y), x̂ = Flow⁻¹(z_c^y, z_n^x)
    let (y_latent, x_latent) = flow::latent_swap(zx, zy)?;
    let y_hat = flow::flow_inverse(y_latent, tm)?;
    let x_hat = flow::flow_inverse(x_latent, tm)?;
    let n_hat = y_hat.sub(x)?;

    // ỹ = Flow⁻¹(z_c^y, z_r)
    let y_tilde = flow::flow_inverse(flow::with_noise_code(zy, tape.constant(z_r))?, tm)?;

    let parts = LossParts {
        reg: objective::loss_reg(y_tilde, x)?,
        rec: weights
            .enable_rec
            .then(|| objective::loss_rec(n_hat, n, x_hat, x))
            .transpose()?,
        cnt: weights
            .enable_cnt
            .then(|| objective::loss_cnt(zc_x, zc_y))
            .transpose()?,
        noise: weights
            .enable_noise
            .then(|| objective::noise_loss_batch(n_hat, sigma_batch, patch))
            .transpose()?,
    };
    let total = objective::total_loss(&parts, weights)?;
    Ok((total, parts))
}

/// One optimization step over an aligned batch. On a non-finite loss
/// the step is aborted and the model is left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut FlowModel,
    x_batch: &Tensor,
    y_batch: &Tensor,
    n_batch: &Tensor,
    sigma_batch: &[f64],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    z_r: Tensor,
) -> Result<StepLosses> {
    let weights = cfg.effective_weights();
    let tape = Tape::new();
    let tm = model.bind(&tape, true);
    let (total, parts) = batch_loss(
        &tape, &tm, x_batch, y_batch, n_batch, sigma_batch, &weights, cfg.patch, z_r,
    )?;
    let total_val = total.value().item();
    if !total_val.is_finite() {
        return Err(FinoError::NonFinite(format!(
            "training loss at adam step {}",
            adam.step_count + 1
        )));
    }

    tape.backward(total)?;
    let grads: Vec<Tensor> = tm
        .params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape())))
        .collect();
    let names = model.param_names();
    let mut params = model.params_mut();
    adam.step(&mut params, &grads, &names)?;

    let get = |v: &Option<crate::tape::Var>| v.map(|p| p.value().item()).unwrap_or(0.0);
    Ok(StepLosses {
        total: total_val,
        reg: parts.reg.value().item(),
        rec: get(&parts.rec),
        cnt: get(&parts.cnt),
        noise: get(&parts.noise),
    })
}

/// Compare every parameter's reverse-mode gradient of the full training
/// loss against central finite differences on a tiny model. Returns the
/// worst relative error and the parameter it occurred on.
pub fn gradcheck_worst_rel_err(seed: u64, h: f64) -> Result<(f64, String)> {
    let cfg = TrainConfig {
        num_blocks: 1,
        layers_per_block: 2,
        hidden_width: 4,
        patch_size: 8,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let dataset = data::make_toy_dataset(2, 8, seed);
    let (x, y, n, sigmas, zr) = make_batch(&dataset, &cfg, seed)?;
    let model = FlowModel::new_random(1, 1, 2, 4, seed ^ 0x9E37_79B9);

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let tm = model.bind(&tape, true);
        let (total, _) = batch_loss(
            &tape, &tm, &x, &y, &n, &sigmas, &cfg.weights, cfg.patch, zr.clone(),
        )?;
        tape.backward(total)?;
        tm.params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape())))
            .collect()
    };

    let names = model.param_names();
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for i in 0..names.len() {
        let at = model.params()[i].clone();
        let mut f = |t: &Tensor| -> Result<f64> {
            let mut probe = model.clone();
            *probe.params_mut()[i] = t.clone();
            let tape = Tape::new();
            let tm = probe.bind(&tape, false);
            let (total, _) = batch_loss(
                &tape, &tm, &x, &y, &n, &sigmas, &cfg.weights, cfg.patch, zr.clone(),
            )?;
            Ok(total.value().item())
        };
        let fd = crate::ops::finite_difference(&mut f, &at, h)?;
        let rel = crate::ops::max_rel_err(&analytic[i], &fd);
        if rel > worst {
            worst = rel;
            worst_name = names[i].clone();
        }
    }
    Ok((worst, worst_name))
}

fn eval_sigma(mode: &TrainMode) -> f64 {
    match mode {
        TrainMode::FixedSigma(s) => *s,
        TrainMode::Blind { low, high } => 0.5 * (low + high),
        TrainMode::Real => 25.0 / 255.0,
    }
}

const EVAL_NOISE_SEED: u64 = 0x5EED_0E7A;

/// Mean held-out PSNR of deterministic (z_r = 0) denoising.
pub fn eval_psnr(model: &FlowModel, eval_set: &[Image], sigma: f64) -> Result<f64> {
    let mut acc = 0.0;
    for (i, img) in eval_set.iter().enumerate() {
        let (noisy, _) = data::add_awgn(img, sigma, EVAL_NOISE_SEED.wrapping_add(i as u64))?;
        let denoised = denoise(model, &noisy, &DenoiseMode::Zero)?;
        acc += metrics::psnr(img, &denoised, 1.0)?;
    }
    Ok(acc / eval_set.len() as f64)
}

/// Mean PSNR of the same noisy evaluation inputs against their clean
/// references: the baseline a denoiser has to beat.
pub fn eval_noisy_psnr(eval_set: &[Image], sigma: f64) -> Result<f64> {
    let mut acc = 0.0;
    for (i, img) in eval_set.iter().enumerate() {
        let (noisy, _) = data::add_awgn(img, sigma, EVAL_NOISE_SEED.wrapping_add(i as u64))?;
        acc += metrics::psnr(img, &noisy, 1.0)?;
    }
    Ok(acc / eval_set.len() as f64)
}

/// Synthesize one training batch for `step`. Exposed so resume tests
/// can assert the delivered batch order is a pure function of (seed, step).
pub fn make_batch(
    dataset: &[Image],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Tensor, Tensor, Tensor, Vec<f64>, Tensor)> {
    let mut rng = SeededRng::substream(cfg.seed, step);
    let c = dataset[0].channels();
    let p = cfg.patch_size;
    let bs = cfg.batch_size;
    let mut x = Tensor::zeros(&[bs, c, p, p]);
    let mut y = Tensor::zeros(&[bs, c, p, p]);
    let mut n = Tensor::zeros(&[bs, c, p, p]);
    let mut sigmas = Vec::with_capacity(bs);
    let item = c * p * p;
    for b in 0..bs {
        let img = &dataset[rng.index(dataset.len())];
        let (_, h, w) = img.pixels.dims3()?;
        if p > h.min(w) {
            return Err(FinoError::Invalid(format!(
                "patch_size {p} exceeds dataset image {h}x{w}"
            )));
        }
        let (top, left) = (rng.index(h - p + 1), rng.index(w - p + 1));
        let clean = data::crop(img, top, left, p)?;
        let sigma = match cfg.mode {
            TrainMode::FixedSigma(s) => s,
            TrainMode::Blind { low, high } => high - (high - low) * rng.uniform(),
            TrainMode::Real => eval_sigma(&cfg.mode),
        };
        let (noisy, noise) = data::add_awgn(&clean, sigma, rng.next_u64())?;
        x.data_mut()[b * item..(b + 1) * item].copy_from_slice(clean.pixels.data());
        y.data_mut()[b * item..(b + 1) * item].copy_from_slice(noisy.pixels.data());
        n.data_mut()[b * item..(b + 1) * item].copy_from_slice(noise.data());
        sigmas.push(sigma);
    }
    // z_r drawn after the batch so the whole step shares one stream
    let latent_c = c * 4usize.pow(cfg.num_blocks as u32);
    let clean_c = (3 * latent_c + 2) / 4;
    let s = p >> cfg.num_blocks;
    let zr_shape = vec![bs, latent_c - clean_c, s, s];
    let zr = Tensor::new(zr_shape.clone(), rng.normal_vec(zr_shape.iter().product()))?;
    Ok((x, y, n, sigmas, zr))
}

/// Full training loop; returns the trained model and the log.
pub fn train(dataset: &[Image], eval_set: &[Image], cfg: &TrainConfig) -> Result<(FlowModel, Vec<TrainLogRecord>)> {
    train_resumable(dataset, eval_set, cfg, None)
}

/// As [`train`], optionally resuming from a checkpoint written by a
/// previous run with the same config and dataset.
pub fn train_resumable(
    dataset: &[Image],
    eval_set: &[Image],
    cfg: &TrainConfig,
    resume_from: Option<&Path>,
) -> Result<(FlowModel, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(FinoError::Invalid("training dataset is empty".into()));
    }
    let channels = dataset[0].channels();
    let (mut model, mut adam, start_step) = match resume_from {
        None => {
            let model = FlowModel::new(
                channels,
                cfg.num_blocks,
                cfg.layers_per_block,
                cfg.hidden_width,
                cfg.seed,
            );
            let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
            let mut adam = AdamState::new(&shapes, cfg.lr);
            adam.beta1 = cfg.beta1;
            adam.beta2 = cfg.beta2;
            adam.epsilon = cfg.epsilon;
            (model, adam, 0u64)
        }
        Some(path) => load_checkpoint(path)?,
    };

    let mut log = Vec::new();
    for step in start_step..cfg.steps {
        let t0 = Instant::now();
        let (x, y, n, sigmas, zr) = make_batch(dataset, cfg, step)?;
        let losses = train_step(&mut model, &x, &y, &n, &sigmas, cfg, &mut adam, zr)?;
        let at_eval = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        let psnr = if at_eval && !eval_set.is_empty() {
            Some(eval_psnr(&model, eval_set, eval_sigma(&cfg.mode))?)
        } else {
            None
        };
        if at_eval {
            if let Some(path) = &cfg.checkpoint_path {
                save_checkpoint(&model, &adam, step + 1, path)?;
            }
        }
        log.push(TrainLogRecord {
            step,
            total_loss: losses.total,
            l_reg: losses.reg,
            l_rec: losses.rec,
            l_cnt: losses.cnt,
            l_noise: losses.noise,
            eval_psnr: psnr,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&model, &adam, cfg.steps, path)?;
    }
    Ok((model, log))
}

/// Checkpoint = model manifest + trainer step, with optimizer moments
/// appended after the parameters.
pub fn save_checkpoint(model: &FlowModel, adam: &AdamState, step: u64, path: &Path) -> Result<()> {
    let mut manifest = model.manifest();
    manifest.push(("step".into(), step.to_string()));
    manifest.push(("adam_lr".into(), adam.lr.to_string()));
    manifest.push(("adam_beta1".into(), adam.beta1.to_string()));
    manifest.push(("adam_beta2".into(), adam.beta2.to_string()));
    manifest.push(("adam_epsilon".into(), adam.epsilon.to_string()));
    manifest.push(("adam_steps".into(), adam.step_count.to_string()));
    let names = model.param_names();
    let params = model.params();
    let mut tensors: Vec<(String, &Tensor)> = names
        .iter()
        .cloned()
        .zip(params.iter().map(|p| *p as &Tensor))
        .collect();
    for (i, name) in names.iter().enumerate() {
        let (m, v) = adam.moments(i);
        tensors.push((format!("adam.m.{name}"), m));
        tensors.push((format!("adam.v.{name}"), v));
    }
    ckpt::write_checkpoint(path, &manifest, &tensors, Dtype::F64)
}

pub fn load_checkpoint(path: &Path) -> Result<(FlowModel, AdamState, u64)> {
    let (manifest, tensors) = ckpt::read_checkpoint(path)?;
    let model = FlowModel::from_parts(path, &manifest, &tensors)?;
    let step: u64 = ckpt::manifest_parse(&manifest, "step", path)?;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut adam = AdamState::new(&shapes, ckpt::manifest_parse(&manifest, "adam_lr", path)?);
    adam.beta1 = ckpt::manifest_parse(&manifest, "adam_beta1", path)?;
    adam.beta2 = ckpt::manifest_parse(&manifest, "adam_beta2", path)?;
    adam.epsilon = ckpt::manifest_parse(&manifest, "adam_epsilon", path)?;
    adam.step_count = ckpt::manifest_parse(&manifest, "adam_steps", path)?;
    let names = model.param_names();
    for (i, name) in names.iter().enumerate() {
        let find = |prefix: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == &format!("{prefix}.{name}"))
                .map(|(_, t)| t.clone())
                .ok_or_else(|| FinoError::format(path, format!("missing tensor {prefix}.{name}")))
        };
        adam.restore_moments(i, find("adam.m")?, find("adam.v")?)?;
    }
    Ok((model, adam, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_dataset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            num_blocks: 1,
            layers_per_block: 2,
            hidden_width: 4,
            patch_size: 8,
            batch_size: 2,
            steps: 3,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialized_model_and_empty_log() {
        let data = make_toy_dataset(2, 8, 0);
        let cfg = TrainConfig {
            steps: 0,
            ..tiny_cfg()
        };
        let (model, log) = train(&data, &[], &cfg).unwrap();
        assert!(log.is_empty());
        let fresh = FlowModel::new(1, 1, 2, 4, cfg.seed);
        for (a, b) in model.params().iter().zip(fresh.params()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn same_seed_same_log_stream() {
        let data = make_toy_dataset(2, 8, 1);
        let cfg = tiny_cfg();
        let (_, log_a) = train(&data, &[], &cfg).unwrap();
        let (_, log_b) = train(&data, &[], &cfg).unwrap();
        for (a, b) in log_a.iter().zip(&log_b) {
            assert_eq!(
                (a.total_loss, a.l_reg, a.l_rec, a.l_cnt, a.l_noise),
                (b.total_loss, b.l_reg, b.l_rec, b.l_cnt, b.l_noise)
            );
        }
    }

    #[test]
    fn zero_noise_batch_zeroes_cnt_and_rec() {
        let data = make_toy_dataset(2, 8, 2);
        let cfg = TrainConfig {
            mode: TrainMode::FixedSigma(0.0),
            ..tiny_cfg()
        };
        let mut model = FlowModel::new(1, 1, 2, 4, 0);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let mut adam = AdamState::new(&shapes, cfg.lr);
        let (x, y, n, sigmas, zr) = make_batch(&data, &cfg, 0).unwrap();
        let losses = train_step(&mut model, &x, &y, &n, &sigmas, &cfg, &mut adam, zr).unwrap();
        // x == y bit-exactly, so the clean codes agree exactly; the
        // reconstruction residual is a full decode(encode(x)) round trip,
        // zero only up to floating-point error.
        assert_eq!(losses.cnt, 0.0);
        assert!(losses.rec < 1e-12);
        assert!((losses.total - (losses.reg + losses.rec + 0.1 * losses.noise)).abs() < 1e-12);
    }

    #[test]
    fn disabled_terms_contribute_exactly_zero() {
        let data = make_toy_dataset(2, 8, 3);
        let cfg = TrainConfig {
            weights: LossWeights {
                enable_rec: false,
                enable_cnt: false,
                enable_noise: false,
                ..LossWeights::default()
            },
            ..tiny_cfg()
        };
        let mut model = FlowModel::new(1, 1, 2, 4, 0);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let mut adam = AdamState::new(&shapes, cfg.lr);
        let (x, y, n, sigmas, zr) = make_batch(&data, &cfg, 0).unwrap();
        let losses = train_step(&mut model, &x, &y, &n, &sigmas, &cfg, &mut adam, zr).unwrap();
        assert_eq!(losses.rec, 0.0);
        assert_eq!(losses.cnt, 0.0);
        assert_eq!(losses.noise, 0.0);
        assert_eq!(losses.total, losses.reg);
    }

    #[test]
    fn all_parameters_receive_gradients() {
        // gradient flow completeness needs a non-identity model
        let data = make_toy_dataset(2, 8, 4);
        let cfg = tiny_cfg();
        let model = FlowModel::new_random(1, 1, 2, 4, 5);
        let tape = Tape::new();
        let tm = model.bind(&tape, true);
        let (x, y, n, sigmas, zr) = make_batch(&data, &cfg, 0).unwrap();
        let (total, _) =
            batch_loss(&tape, &tm, &x, &y, &n, &sigmas, &cfg.weights, cfg.patch, zr).unwrap();
        tape.backward(total).unwrap();
        for (p, name) in tm.params.iter().zip(model.param_names()) {
            assert!(p.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn resume_equals_continuous_run_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("resume.fino");
        let data = make_toy_dataset(2, 8, 5);
        let continuous = TrainConfig {
            steps: 6,
            ..tiny_cfg()
        };
        let (full, _) = train(&data, &[], &continuous).unwrap();

        let first_half = TrainConfig {
            steps: 3,
            checkpoint_path: Some(ck.clone()),
            ..tiny_cfg()
        };
        train(&data, &[], &first_half).unwrap();
        let second_half = TrainConfig {
            steps: 6,
            ..tiny_cfg()
        };
        let (resumed, _) = train_resumable(&data, &[], &second_half, Some(&ck)).unwrap();
        for ((a, b), name) in full
            .params()
            .iter()
            .zip(resumed.params())
            .zip(full.param_names())
        {
            assert_eq!(*a, b, "parameter {name} diverged after resume");
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("opt.fino");
        let data = make_toy_dataset(2, 8, 6);
        let cfg = TrainConfig {
            steps: 2,
            checkpoint_path: Some(ck.clone()),
            ..tiny_cfg()
        };
        let (model, _) = train(&data, &[], &cfg).unwrap();
        let (loaded, adam, step) = load_checkpoint(&ck).unwrap();
        assert_eq!(step, 2);
        assert_eq!(adam.step_count, 2);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn blind_mode_sigmas_cover_range() {
        let data = make_toy_dataset(2, 8, 7);
        let cfg = TrainConfig {
            mode: TrainMode::Blind {
                low: 0.0,
                high: 55.0 / 255.0,
            },
            ..tiny_cfg()
        };
        let mut seen = Vec::new();
        for step in 0..200 {
            let (_, _, _, sigmas, _) = make_batch(&data, &cfg, step).unwrap();
            seen.extend(sigmas);
        }
        let hi = 55.0 / 255.0;
        assert!(seen.iter().all(|&s| s > 0.0 && s <= hi));
        // histogram over 5 bins: each populated
        let mut bins = [0usize; 5];
        for &s in &seen {
            bins[((s / hi) * 5.0).min(4.999) as usize] += 1;
        }
        assert!(bins.iter().all(|&b| b > 20), "bins {bins:?}");
    }

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.cfg");
        std::fs::write(
            &p,
            "# toy run\nblocks=1\nlayers_per_block=2\nhidden_width=4\npatch_size=16\nsteps=10\nmode=blind\nsigma_lo=0\nsigma_hi=55\ngamma=0.2\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&p).unwrap();
        assert_eq!(cfg.num_blocks, 1);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.weights.gamma, 0.2);
        assert_eq!(
            cfg.mode,
            TrainMode::Blind {
                low: 0.0,
                high: 55.0 / 255.0
            }
        );
        std::fs::write(&p, "bogus_key=1\n").unwrap();
        assert!(TrainConfig::from_file(&p).is_err());
    }
}
