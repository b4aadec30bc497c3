//! Command-line surface: training, denoising, evaluation, noise
//! synthesis, and the invertibility / gradient / property audits.
//!
//! Exit codes: 0 success, 1 runtime failure (diagnostics on stderr),
//! 2 usage error (clap's default).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fino::data::{self, Image, NoiseSpec};
use fino::flow::{self, FlowModel};
use fino::infer::{denoise, DenoiseMode};
use fino::metrics;
use fino::rng::SeededRng;
use fino::tensor::Tensor;
use fino::trainer::{self, TrainConfig};
use fino::{FinoError, Result};

#[derive(Parser)]
#[command(
    name = "fino",
    version,
    about = "Flow-based joint image and noise modeling for denoising"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file
    Train(TrainArgs),
    /// Denoise one image with a trained checkpoint
    Denoise(DenoiseArgs),
    /// Evaluate denoising quality over a directory of clean images
    Eval(EvalArgs),
    /// Synthesize noisy counterparts of clean images
    Noisegen(NoisegenArgs),
    /// Invertibility audit: forward-then-inverse reconstruction error
    Roundtrip(RoundtripArgs),
    /// Finite-difference audit of the training-loss gradients
    Gradcheck(GradcheckArgs),
    /// Run the built-in property suite
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to a key=value config file
    #[arg(long)]
    config: PathBuf,
    /// Directory of clean training images (.ppm/.pgm/.fnt); a built-in
    /// synthetic set is used when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of held-out images for periodic evaluation
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Resume from this checkpoint instead of initializing fresh
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the training log as CSV to this path (stdout when omitted)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    /// z_r = 0, deterministic
    Zero,
    /// one Gaussian draw for z_r
    Sample,
    /// average of k Gaussian draws
    Average,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Noisy input image (.ppm/.pgm/.fnt)
    #[arg(long)]
    input: PathBuf,
    /// Output image; values are clamped to [0,1] only for 8-bit formats
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "zero")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of draws for --mode average
    #[arg(long, default_value_t = 8)]
    k: usize,
}

#[derive(Args)]
struct NoiseArgs {
    /// Noise level on the 0-255 scale
    #[arg(long, default_value_t = 25.0)]
    sigma: f64,
    /// Blind range "lo,hi" on the 0-255 scale; overrides --sigma
    #[arg(long, value_name = "LO,HI")]
    sigma_range: Option<String>,
    /// Spatially variant noise with a smooth per-pixel sigma map
    #[arg(long)]
    variant: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl NoiseArgs {
    fn spec_for(&self, img: &Image, index: u64) -> Result<NoiseSpec> {
        let seed = SeededRng::substream(self.seed, index).next_u64();
        let range = match &self.sigma_range {
            None => None,
            Some(s) => {
                let (lo, hi) = s.split_once(',').ok_or_else(|| {
                    FinoError::Invalid(format!("--sigma-range '{s}' is not 'lo,hi'"))
                })?;
                let parse = |t: &str| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| FinoError::Invalid(format!("bad sigma '{t}'")))
                };
                Some((parse(lo)? / 255.0, parse(hi)? / 255.0))
            }
        };
        if self.variant {
            let (lo, hi) = range.unwrap_or((0.0, self.sigma / 255.0));
            let map = data::make_variant_map(img.height(), img.width(), lo, hi, seed)?;
            return Ok(NoiseSpec::Variant {
                sigma_map: map,
                seed: seed.wrapping_add(1),
            });
        }
        Ok(match range {
            Some((lo, hi)) => NoiseSpec::Blind { low: lo, high: hi, seed },
            None => NoiseSpec::Uniform {
                sigma: self.sigma / 255.0,
                seed,
            },
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint; required unless --denoised-dir is given
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of clean reference images
    #[arg(long)]
    clean_dir: PathBuf,
    /// Compare clean images against pre-denoised files of the same name
    /// instead of running the model
    #[arg(long)]
    denoised_dir: Option<PathBuf>,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long, value_enum, default_value = "zero")]
    mode: ModeArg,
    /// Draws for --mode average
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Write the CSV report here (stdout when omitted)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct NoisegenArgs {
    /// Clean image file or directory
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the noisy counterparts
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args)]
struct RoundtripArgs {
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Coupling layers per block
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random inputs to audit
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Also audit this image file
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fail (exit 1) when the max error exceeds this
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Fail (exit 1) when the worst relative error exceeds this
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn mode_of(arg: ModeArg, seed: u64, k: usize) -> DenoiseMode {
    match arg {
        ModeArg::Zero => DenoiseMode::Zero,
        ModeArg::Sample => DenoiseMode::Sample { seed },
        ModeArg::Average => DenoiseMode::Average { k, seed },
    }
}

/// All images under `dir` in name order (.ppm/.pgm/.fnt).
fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| FinoError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm" | "pgm" | "fnt")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(FinoError::Invalid(format!(
            "no .ppm/.pgm/.fnt images in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| data::load_image(&p).map(|img| (p, img)))
        .collect()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let dataset: Vec<Image> = match &a.data {
        Some(dir) => load_dir(dir)?.into_iter().map(|(_, i)| i).collect(),
        None => data::make_toy_dataset(16, cfg.patch_size.max(32), cfg.seed ^ 0xDA7A),
    };
    let eval_set: Vec<Image> = match &a.eval_data {
        Some(dir) => load_dir(dir)?.into_iter().map(|(_, i)| i).collect(),
        None => data::make_toy_dataset(4, cfg.patch_size.max(32), cfg.seed ^ 0xE7A1),
    };
    let (_, log) = trainer::train_resumable(&dataset, &eval_set, &cfg, a.resume.as_deref())?;
    let mut out = String::from(trainer::TrainLogRecord::csv_header());
    out.push('\n');
    for rec in &log {
        out.push_str(&rec.to_csv_row());
        out.push('\n');
    }
    match &a.log {
        Some(p) => std::fs::write(p, out).map_err(|e| FinoError::io(p, e))?,
        None => print!("{out}"),
    }
    if let Some(ck) = &cfg.checkpoint_path {
        eprintln!("checkpoint written to {}", ck.display());
    }
    Ok(())
}

fn cmd_denoise(a: &DenoiseArgs) -> Result<()> {
    let model = FlowModel::load(&a.checkpoint)?;
    let noisy = data::load_image(&a.input)?;
    let out = denoise(&model, &noisy, &mode_of(a.mode, a.seed, a.k))?;
    data::save_image(&out, &a.output)?;
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let clean = load_dir(&a.clean_dir)?;
    let model = match (&a.checkpoint, &a.denoised_dir) {
        (_, Some(_)) => None,
        (Some(ck), None) => Some(FlowModel::load(ck)?),
        (None, None) => {
            return Err(FinoError::Invalid(
                "eval needs --checkpoint or --denoised-dir".into(),
            ))
        }
    };

    let mut report = format!(
        "# seed={} sigma={} sigma_range={} variant={} mode={}\n",
        a.noise.seed,
        a.noise.sigma,
        a.noise.sigma_range.as_deref().unwrap_or("-"),
        a.noise.variant,
        match a.mode {
            ModeArg::Zero => "zero",
            ModeArg::Sample => "sample",
            ModeArg::Average => "average",
        }
    );
    report.push_str("path,noisy_psnr,denoised_psnr,ssim\n");
    let (mut sum_noisy, mut sum_den, mut sum_ssim) = (0.0f64, 0.0f64, 0.0f64);
    for (i, (path, x)) in clean.iter().enumerate() {
        let (noisy, denoised) = match (&model, &a.denoised_dir) {
            (Some(m), _) => {
                let spec = a.noise.spec_for(x, i as u64)?;
                let (y, _, _) = data::synthesize(x, &spec)?;
                let d = denoise(m, &y, &mode_of(a.mode, a.noise.seed ^ i as u64, a.k))?;
                (y, d)
            }
            (None, Some(dir)) => {
                let name = path.file_name().ok_or_else(|| {
                    FinoError::Invalid(format!("no file name in {}", path.display()))
                })?;
                let d = data::load_image(&dir.join(name))?;
                (d.clone(), d)
            }
            (None, None) => unreachable!(),
        };
        let noisy_psnr = metrics::psnr(x, &noisy, 1.0)?;
        let den_psnr = metrics::psnr(x, &denoised, 1.0)?;
        let ssim = metrics::ssim(x, &denoised)?;
        sum_noisy += noisy_psnr;
        sum_den += den_psnr;
        sum_ssim += ssim;
        report.push_str(&format!(
            "{},{},{},{:.6}\n",
            path.display(),
            fmt_db(noisy_psnr),
            fmt_db(den_psnr),
            ssim
        ));
    }
    let n = clean.len() as f64;
    report.push_str(&format!(
        "mean,{},{},{:.6}\n",
        fmt_db(sum_noisy / n),
        fmt_db(sum_den / n),
        sum_ssim / n
    ));
    match &a.output {
        Some(p) => std::fs::write(p, report).map_err(|e| FinoError::io(p, e))?,
        None => print!("{report}"),
    }
    Ok(())
}

fn cmd_noisegen(a: &NoisegenArgs) -> Result<()> {
    let inputs: Vec<(PathBuf, Image)> = if a.input.is_dir() {
        load_dir(&a.input)?
    } else {
        vec![(a.input.clone(), data::load_image(&a.input)?)]
    };
    std::fs::create_dir_all(&a.output).map_err(|e| FinoError::io(&a.output, e))?;
    for (i, (path, x)) in inputs.iter().enumerate() {
        let spec = a.noise.spec_for(x, i as u64)?;
        let (y, _, sigma) = data::synthesize(x, &spec)?;
        let name = path
            .file_name()
            .ok_or_else(|| FinoError::Invalid(format!("no file name in {}", path.display())))?;
        let out = a.output.join(name);
        data::save_image(&y, &out)?;
        println!("{} sigma={:.4} -> {}", path.display(), sigma * 255.0, out.display());
    }
    Ok(())
}

fn cmd_roundtrip(a: &RoundtripArgs) -> Result<bool> {
    let channels = match &a.input {
        Some(p) => data::load_image(p)?.channels(),
        None => 3,
    };
    let model = FlowModel::new_random(channels, a.blocks, a.layers, a.width, a.seed);
    let f = model.spatial_factor();
    let side = 8 * f;
    let mut rng = SeededRng::substream(a.seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..a.trials {
        let x = Tensor::new(
            vec![1, channels, side, side],
            rng.normal_vec(channels * side * side),
        )?;
        worst = worst.max(flow::roundtrip_error(&model, &x)?);
    }
    if let Some(p) = &a.input {
        let img = data::load_image(p)?;
        let (c, h, w) = img.pixels.dims3()?;
        let (th, tw) = (h - h % f, w - w % f);
        if th == 0 || tw == 0 {
            return Err(FinoError::Invalid(format!(
                "image {h}x{w} smaller than one {f}x{f} cell"
            )));
        }
        let x = data::crop(&img, 0, 0, th.min(tw))?;
        let _ = (c, tw);
        worst = worst.max(flow::roundtrip_error(&model, &x.as_batch())?);
    }
    println!(
        "roundtrip max abs error {worst:.3e} over {} inputs (blocks={} layers={} width={})",
        a.trials + a.input.is_some() as usize,
        a.blocks,
        a.layers,
        a.width
    );
    Ok(worst < a.tolerance)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let (worst, name) = trainer::gradcheck_worst_rel_err(a.seed, a.step)?;
    println!("gradcheck worst relative error {worst:.3e} at {name}");
    Ok(worst < a.tolerance)
}

fn cmd_selftest() -> Result<bool> {
    let t0 = Instant::now();
    let mut all_ok = true;
    let mut check = |name: &str, r: Result<bool>| {
        match r {
            Ok(true) => println!("ok   {name}"),
            Ok(false) => {
                all_ok = false;
                println!("FAIL {name}");
            }
            Err(e) => {
                all_ok = false;
                println!("FAIL {name}: {e}");
            }
        }
    };

    check("wavelet energy conservation", {
        let mut rng = SeededRng::new(11);
        let mut ok = true;
        for _ in 0..20 {
            let x = Tensor::new(vec![1, 3, 8, 8], rng.normal_vec(192))?;
            let y = fino::kernels::haar_fwd(&x)?;
            let back = fino::kernels::haar_inv(&y)?;
            ok &= (x.sq_norm() - y.sq_norm()).abs() / x.sq_norm() < 1e-12;
            ok &= back.max_abs_diff(&x) < 1e-12;
        }
        Ok(ok)
    });

    check("flow invertibility", {
        let model = FlowModel::new_random(3, 2, 4, 16, 3);
        let mut rng = SeededRng::new(12);
        let x = Tensor::new(vec![1, 3, 16, 16], rng.normal_vec(768))?;
        Ok(flow::roundtrip_error(&model, &x)? < 1e-9)
    });

    check("noise-code swap involution", {
        let model = FlowModel::new_random(1, 1, 2, 8, 4);
        let tape = fino::tape::Tape::new();
        let tm = model.bind(&tape, false);
        let mut rng = SeededRng::new(13);
        let a = tape.constant(Tensor::new(vec![1, 1, 8, 8], rng.normal_vec(64))?);
        let b = tape.constant(Tensor::new(vec![1, 1, 8, 8], rng.normal_vec(64))?);
        let za = flow::flow_forward(a, &tm)?;
        let zb = flow::flow_forward(b, &tm)?;
        let (sa, sb) = flow::latent_swap(za, zb)?;
        let (ra, rb) = flow::latent_swap(sa, sb)?;
        Ok(ra.z.value() == za.z.value() && rb.z.value() == zb.z.value())
    });

    check("seeded rng reproducibility", {
        let a: Vec<f64> = SeededRng::substream(7, 3).normal_vec(64);
        let b: Vec<f64> = SeededRng::substream(7, 3).normal_vec(64);
        let c: Vec<f64> = SeededRng::substream(7, 4).normal_vec(64);
        Ok(a == b && a != c)
    });

    check("psnr/ssim analytic values", {
        let a = Image::new(Tensor::full(&[1, 16, 16], 0.5))?;
        let b = Image::new(Tensor::full(&[1, 16, 16], 0.6))?;
        Ok((metrics::psnr(&a, &b, 1.0)? - 20.0).abs() < 1e-12
            && metrics::psnr(&a, &a, 1.0)? == f64::INFINITY
            && metrics::ssim(&a, &a)? == 1.0)
    });

    check("loss gradients vs finite differences", {
        let (worst, _) = trainer::gradcheck_worst_rel_err(0, 1e-6)?;
        Ok(worst < 1e-5)
    });

    println!(
        "selftest {} in {:.1}s",
        if all_ok { "passed" } else { "FAILED" },
        t0.elapsed().as_secs_f64()
    );
    Ok(all_ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Denoise(a) => cmd_denoise(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Noisegen(a) => cmd_noisegen(a).map(|_| true),
        Command::Roundtrip(a) => cmd_roundtrip(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Selftest => cmd_selftest(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
