//! Subcommands of the `morphreg` binary.

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use morphreg_core::battery::{self, TOLERANCE};
use morphreg_core::metrics::{field_report, image_report, landmark_report, mask_report, EvalReport};
use morphreg_core::network::register_pair;
use morphreg_core::trainer::{gen_synthetic, load_dataset, load_model, save_dataset, train, SynthSpec, TrainConfig};
use morphreg_core::volume::{read_field, read_landmarks, read_mask, read_volume, write_field, write_volume};
use morphreg_core::warp::warp_volume;

use plot::Axis;

#[derive(Debug, Parser)]
#[command(name = "morphreg", version, about = "Deformable registration with windowed attention and a superresolution decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of deformed label phantoms
    GenSynth(GenSynthArgs),
    /// Train a model; writes checkpoints and loss.csv
    Train(TrainArgs),
    /// Predict the field for one pair and warp the moving volume
    Register(RegisterArgs),
    /// Metrics report (JSON) for a registered pair
    Eval(EvalArgs),
    /// Run the gradient-check battery; exits nonzero on any failure
    Gradcheck(GradcheckArgs),
    /// Render a field slice (PPM) and its Jacobian determinant (PGM)
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// SynthSpec JSON; defaults apply to missing fields
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub subjects: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TrainConfig JSON (model, loss and optimizer settings)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out_field: PathBuf,
    #[arg(long)]
    pub out_warped: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub warped: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, requires = "warped_mask")]
    pub fixed_mask: Option<PathBuf>,
    /// moving mask already warped by the field
    #[arg(long, requires = "fixed_mask")]
    pub warped_mask: Option<PathBuf>,
    #[arg(long, requires = "landmarks_moving")]
    pub landmarks_fixed: Option<PathBuf>,
    #[arg(long, requires = "landmarks_fixed")]
    pub landmarks_moving: Option<PathBuf>,
    /// report path; standard output when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, default_value_t = Axis::Z)]
    pub axis: Axis,
    #[arg(long)]
    pub slice: usize,
    /// output base path: writes `<out>.ppm` and `<out>_jacobian.pgm`
    #[arg(long)]
    pub out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Applies the flag overrides on top of an optional config file.
pub fn train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.iterations {
        cfg.max_iterations = n;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(c) = args.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_synth(a: &GenSynthArgs) -> anyhow::Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(n) = a.subjects {
        spec.n_subjects = n;
    }
    let data = gen_synthetic(&spec, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_dataset(&a.out, &data)?;
    write_json(&a.out.join("spec.json"), &serde_json::json!({ "spec": spec, "seed": a.seed }))?;
    eprintln!("wrote {} subjects to {}", data.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(a)?;
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let every = cfg.checkpoint_every.max(1).min(10);
    let out = train(&cfg, &data, Some(&a.out), |r| {
        if r.iteration == 1 || r.iteration % every == 0 {
            eprintln!("iter {:>6}  total {:.6}  sim {:.6}  smooth {:.6}", r.iteration, r.total, r.sim, r.smooth);
        }
    })?;
    eprintln!("final checkpoint {}", out.checkpoints.last().expect("final checkpoint").display());
    Ok(())
}

fn register(a: &RegisterArgs) -> anyhow::Result<()> {
    let model = load_model(&a.ckpt)?;
    let moving = read_volume(&a.moving)?;
    let fixed = read_volume(&a.fixed)?;
    let (field, _) = register_pair(&model, &moving.normalized(), &fixed.normalized())?;
    // the field is predicted from normalized inputs; the original intensities are warped
    let warped = warp_volume(&moving, &field)?;
    write_field(&field, &a.out_field)?;
    write_volume(&warped, &a.out_warped)?;
    Ok(())
}

/// Builds the report for `eval` from the files named in `a`.
pub fn eval_report(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    let fixed = read_volume(&a.fixed)?;
    let warped = read_volume(&a.warped)?;
    let field = read_field(&a.field)?;
    if field.dims() != fixed.dims() {
        bail!("field grid {:?} does not match fixed volume {:?}", field.dims(), fixed.dims());
    }
    let mut report = EvalReport::default();
    image_report(&mut report, &fixed, &warped)?;
    field_report(&mut report, &field);
    if let (Some(f), Some(w)) = (&a.fixed_mask, &a.warped_mask) {
        mask_report(&mut report, &read_mask(f)?, &read_mask(w)?)?;
    }
    if let (Some(f), Some(m)) = (&a.landmarks_fixed, &a.landmarks_moving) {
        landmark_report(&mut report, &read_landmarks(f)?, &read_landmarks(m)?, &field)?;
    }
    Ok(report)
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let report = eval_report(a)?;
    match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            write_json(p, &report)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<bool> {
    let mut failed = 0;
    let results = battery::run(a.seed, |c| {
        let r = &c.report;
        let status = if c.passed() { "ok" } else { "FAIL" };
        eprintln!(
            "{:<28} {status:<4} max_rel {:.3e} ({} of {} coords >= {TOLERANCE:e})",
            c.name,
            r.max_rel_error,
            r.count_at_least(TOLERANCE),
            r.coords_checked
        );
        failed += !c.passed() as usize;
    })?;
    eprintln!("{} of {} cases passed", results.len() - failed, results.len());
    Ok(failed == 0)
}

fn plot_cmd(a: &PlotArgs) -> anyhow::Result<()> {
    let field = read_field(&a.field)?;
    let base = a.out.with_extension("");
    ensure_parent(&base)?;
    let ppm = base.with_extension("ppm");
    let mut pgm = base.clone().into_os_string();
    pgm.push("_jacobian.pgm");
    fs::write(&ppm, plot::field_ppm(&field, a.axis, a.slice)?).with_context(|| format!("writing {}", ppm.display()))?;
    fs::write(&pgm, plot::jacobian_pgm(&field, a.axis, a.slice)?)
        .with_context(|| format!("writing {}", PathBuf::from(&pgm).display()))?;
    Ok(())
}

/// Runs one subcommand. `Ok(false)` means it completed but reported failures.
pub fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Register(a) => register(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Plot(a) => plot_cmd(a)?,
    }
    Ok(true)
}
