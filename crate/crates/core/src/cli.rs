//! The `rblb` command line: blur, train, deblur, eval, gradcheck.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::blur_synth::{
    blur_images, blur_sequences, gen_linear_kernel, CrfParams, DEFAULT_GAMMA, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::image_io;
use crate::metrics::evaluate_dirs;
use crate::models::{load_checkpoint, run_dbgan};
use crate::training::{run_training, Ablation, Stage, TrainConfig};

/// Status line on stdout. A closed pipe (`rblb gradcheck | head`) is not an
/// error worth panicking over, so write failures are ignored.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const THREADS_ENV: &str = "RBLB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rblb", version, about = "Learn to blur, then learn to deblur.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize (blurry, sharp) pairs from frame sequences or still images.
    Blur(BlurArgs),
    /// Train one stage: bgan, dbgan or dbgan-plus.
    Train(TrainArgs),
    /// Deblur every PNG in a directory with a trained deblur generator.
    Deblur(DeblurArgs),
    /// Score predicted PNGs against same-named targets (PSNR/SSIM CSV).
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BlurMode {
    Average,
    Kernel,
}

#[derive(Debug, Args)]
struct BlurArgs {
    #[arg(long, value_enum, default_value = "average")]
    mode: BlurMode,
    /// Sequence root (average) or image directory (kernel).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f32,
    /// Linear kernel length in pixels.
    #[arg(long, default_value_t = 9)]
    length: usize,
    /// Linear kernel angle in degrees.
    #[arg(long, default_value_t = 0.0)]
    angle: f32,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Bgan,
    Dbgan,
    DbganPlus,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Bgan => Stage::Bgan,
            StageArg::Dbgan => Stage::Dbgan,
            StageArg::DbganPlus => Stage::DbganPlus,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    DbganMinus,
    Dbgan,
    DbganPlus,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::DbganMinus => Ablation::DbganMinus,
            AblationArg::Dbgan => Ablation::Dbgan,
            AblationArg::DbganPlus => Ablation::DbganPlus,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with TrainConfig fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr_start: Option<f32>,
    #[arg(long)]
    lr_end: Option<f32>,
    #[arg(long)]
    mix_ratio: Option<f32>,
    /// Train full-size networks instead of the reduced desk preset.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    sharp_dir: Option<PathBuf>,
    #[arg(long)]
    blurry_dir: Option<PathBuf>,
    #[arg(long)]
    paired_manifest: Option<PathBuf>,
    #[arg(long)]
    bgan_checkpoint: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DeblurArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Signal peak: 1.0 for [0,1] images, 255 for the 8-bit domain.
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = gradsuite::DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run a single named case.
    #[arg(long)]
    case: Option<String>,
}

/// Worker count from `RBLB_THREADS`; unset, unparsable or 0 means one.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
        .max(1)
}

/// Parses `argv` (program name first) and runs the subcommand.
///
/// Returns 0 on success, 2 on a usage error, 1 on a runtime failure; runtime
/// failures print one JSON object `{"error": {"code", "message"}}` to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let report = serde_json::json!({
                "error": { "code": e.code(), "message": e.to_string() }
            });
            eprintln!("{report}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Blur(a) => blur(a),
        Command::Train(a) => train(a),
        Command::Deblur(a) => deblur(&a.checkpoint, &a.input, &a.output),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn blur(a: BlurArgs) -> Result<()> {
    let manifest = match a.mode {
        BlurMode::Average => {
            blur_sequences(&a.input, &a.output, a.window, CrfParams::new(a.gamma)?)?
        }
        BlurMode::Kernel => {
            let kernel = gen_linear_kernel(a.length, a.angle)?.with_noise(a.noise_std);
            blur_images(&a.input, &a.output, &kernel, a.seed)?
        }
    };
    say!(
        "wrote {} pairs to {}",
        manifest.pairs.len(),
        a.output.display()
    );
    Ok(())
}

/// File values (or defaults), then command-line overrides.
fn train_config(a: TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    match (a.stage, a.ablation) {
        (Some(s), Some(ab)) => {
            c.stage = s.into();
            c.ablation = ab.into();
        }
        (Some(s), None) => {
            c.stage = s.into();
            c.ablation = match c.stage {
                Stage::DbganPlus => Ablation::DbganPlus,
                Stage::Dbgan if c.ablation == Ablation::DbganPlus => Ablation::Dbgan,
                _ => c.ablation,
            };
        }
        (None, Some(ab)) => {
            c.ablation = ab.into();
            c.stage = c.ablation.stage();
        }
        (None, None) => {}
    }
    if a.paper_scale {
        c.desk_scale = false;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v; } )* };
    }
    set!(
        seed,
        max_steps,
        batch_size,
        crop,
        lr_start,
        lr_end,
        mix_ratio,
        checkpoint_every,
        out_dir
    );
    macro_rules! set_opt {
        ($($f:ident),*) => { $( if a.$f.is_some() { c.$f = a.$f; } )* };
    }
    set_opt!(
        sharp_dir,
        blurry_dir,
        paired_manifest,
        bgan_checkpoint,
        init_checkpoint,
        resume
    );
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = train_config(a)?;
    let outcome = run_training(&config)?;
    say!(
        "stage {} finished at step {} (lr {:e}); checkpoint {}",
        config.stage.as_str(),
        outcome.final_step,
        outcome.final_lr,
        outcome.checkpoint.display()
    );
    Ok(())
}

/// Runs the deblur generator stored in `checkpoint` over every PNG in `input`.
pub fn deblur(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let g = ckpt
        .stores
        .get("dbgan_g")
        .ok_or_else(|| Error::CorruptCheckpoint {
            path: checkpoint.to_path_buf(),
            reason: "no deblur generator (`dbgan_g`) in checkpoint".into(),
        })?;
    let files = image_io::list_pngs(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNGs in {}", input.display())));
    }
    for p in &files {
        let img = image_io::load_png(p)?;
        let out = run_dbgan(g, &img)?;
        image_io::save_png(&output.join(p.file_name().expect("listed file")), &out)?;
    }
    say!("deblurred {} images into {}", files.len(), output.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.peak > 0.0) {
        return Err(Error::invalid(
            "eval",
            format!("peak must be > 0, got {}", a.peak),
        ));
    }
    let result = evaluate_dirs(&a.pred, &a.target, a.peak, threads_from_env())?;
    result.write_csv(&a.out)?;
    say!(
        "{} images: mean PSNR {:.4} dB, mean SSIM {:.6}",
        result.rows.len(),
        result.mean_psnr_db,
        result.mean_ssim
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if let Some(name) = &a.case {
        if !gradsuite::case_names().contains(&name.as_str()) {
            return Err(Error::invalid(
                "gradcheck",
                format!("unknown case `{name}`"),
            ));
        }
    }
    let (results, secs) = gradsuite::run_timed(a.instances, a.seed, a.case.as_deref())?;
    let mut failed = Vec::new();
    for r in &results {
        say!(
            "{:<36} {:>10.3e} <= {:.0e}  checked {:>6} skipped {:>6}  {}",
            r.name,
            r.worst_rel_err,
            r.tolerance,
            r.checked,
            r.skipped,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    say!("{} cases, {:.1}s", results.len(), secs);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(
            "gradcheck",
            format!("failed cases: {}", failed.join(", ")),
        ))
    }
}
