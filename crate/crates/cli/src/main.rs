mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use synthgen::classmixpp::classmix_pp;
use synthgen::datasets::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use synthgen::datasets::{Dataset, LabeledImage};
use synthgen::engine::{adapt_student, evaluate, train_teacher, REPORT_FILE};
use synthgen::gmc::{apply_mask, sample_patch_mask, GmcConfig};
use synthgen::gradsuite::{self, SuiteConfig};
use synthgen::metrics::MiouReport;
use synthgen::model::SegNetParams;
use synthgen::numerics::{derive_seed, RngState};
use synthgen::scenegen::generate_dataset;

use config::{Role, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "synthgen",
    version,
    about = "Multi-source synthetic segmentation training and target adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the config-driven commands.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run configuration (JSON); every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gmc_patch_size: Option<usize>,
    #[arg(long)]
    gmc_ratio: Option<f64>,
    /// Output directory; defaults to a phase directory under `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset.
    GenData {
        #[arg(long)]
        style: String,
        /// JSON file with a custom style; `--style` then only names it.
        #[arg(long)]
        style_file: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        /// `HxW`.
        #[arg(long, default_value = "36x36", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix two labeled images with ClassMix++ and dump a GMC-masked view of
    /// the first.
    Mix {
        /// Image `A` (`.ppm`); labels are read from the `.pgm` beside it.
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GmcConfig::default().patch_size)]
        gmc_patch_size: usize,
        #[arg(long, default_value_t = GmcConfig::default().mask_ratio)]
        gmc_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher on the configured sources.
    TrainTeacher(ConfigArgs),
    /// Adapt a student to the configured target images.
    AdaptStudent {
        #[command(flatten)]
        args: ConfigArgs,
        /// Teacher checkpoint; defaults to `<out_dir>/teacher/teacher.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Data generation, teacher training, adaptation and evaluation in one go.
    Run(ConfigArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Report path; the report goes to standard output otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of every analytic gradient path.
    Gradcheck {
        #[arg(long, default_value_t = SuiteConfig::default().seeds)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Maps onto the process exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

/// Failures of the core library: configuration problems are usage errors,
/// everything else a runtime failure.
fn core(e: synthgen::Error) -> Failure {
    match e {
        synthgen::Error::Config(_) | synthgen::Error::InvalidArgument(_) => usage(e),
        other => runtime(other),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(b) = args.gmc_patch_size {
        cfg.teacher.gmc.patch_size = b;
    }
    if let Some(r) = args.gmc_ratio {
        cfg.teacher.gmc.mask_ratio = r;
    }
    let cfg = cfg.resolve();
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(usage(anyhow!("invalid configuration:\n  {}", problems.join("\n  "))));
    }
    Ok(cfg)
}

/// Handles `--print-config`; returns true when the command should stop.
fn print_config(args: &ConfigArgs, cfg: &RunConfig) -> Result<bool, Failure> {
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(cfg).map_err(runtime)?);
    }
    Ok(args.print_config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    std::fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn labeled(image: &Path) -> Result<LabeledImage, Failure> {
    let labels = image.with_extension("pgm");
    let img = read_ppm(image).map_err(usage)?;
    let map = read_pgm(&labels).map_err(usage)?;
    LabeledImage::new(img, map, "input").map_err(usage)
}

#[derive(Serialize)]
struct MixAudit {
    selected_classes: BTreeSet<u8>,
    seed: u64,
    gmc_patch_size: usize,
    gmc_ratio: f64,
    gmc_visible_fraction: Option<f64>,
}

fn cmd_mix(a: &Path, b: &Path, seed: u64, patch: usize, ratio: f64, out: &Path) -> CmdResult {
    let (a, b) = (labeled(a)?, labeled(b)?);
    let mut rng = RngState::new(seed);
    let mix = classmix_pp(&a, &b, &mut rng).map_err(core)?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(runtime)?;
    write_ppm(&out.join("mixed.ppm"), &mix.image).map_err(runtime)?;
    write_pgm(&out.join("mixed.pgm"), &mix.labels).map_err(runtime)?;
    write_pgm(&out.join("mask.pgm"), &mix.mask).map_err(runtime)?;

    let mut gmc_rng = RngState::new(derive_seed(seed, &[1]));
    let visible = match sample_patch_mask(a.height(), a.width(), patch, ratio, &mut gmc_rng) {
        Ok(mask) => {
            write_ppm(&out.join("gmc_masked.ppm"), &apply_mask(&a.image, &mask).map_err(core)?).map_err(runtime)?;
            Some(mask.visible_fraction())
        }
        Err(e) => {
            log::warn!("no GMC preview: {e}");
            None
        }
    };
    write_json(
        &out.join("audit.json"),
        &MixAudit {
            selected_classes: mix.selected_classes,
            seed,
            gmc_patch_size: patch,
            gmc_ratio: ratio,
            gmc_visible_fraction: visible,
        },
    )?;
    eprintln!("mixed sample written to {}", out.display());
    Ok(())
}

fn cmd_gen_data(
    style: &str,
    style_file: Option<&Path>,
    count: usize,
    size: (usize, usize),
    seed: u64,
    out: &Path,
) -> CmdResult {
    let style = match style_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .map_err(usage)?;
            let mut s: synthgen::scenegen::SceneStyle = serde_json::from_str(&text).map_err(usage)?;
            s.name = style.to_string();
            s.validate().map_err(usage)?;
            s
        }
        None => synthgen::scenegen::SceneStyle::preset(style).map_err(usage)?,
    };
    if count == 0 {
        return Err(usage(anyhow!("--count must be at least 1")));
    }
    if size.0 < 32 || size.1 < 32 {
        return Err(usage(anyhow!("--size must be at least 32x32")));
    }
    let schema = synthgen::scenegen::ClassSchema::default();
    generate_dataset(&style, &schema, count, size, seed, out).map_err(core)?;
    let manifest = out.join(synthgen::datasets::MANIFEST_FILE);
    eprintln!("{count} {} samples written", style.name);
    println!("{}", manifest.display());
    Ok(())
}

fn phase_dir(args: &ConfigArgs, cfg: &RunConfig, phase: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| cfg.out_dir.join(phase))
}

fn cmd_train_teacher(args: &ConfigArgs) -> CmdResult {
    let cfg = resolve_config(args)?;
    if print_config(args, &cfg)? {
        return Ok(());
    }
    let out = phase_dir(args, &cfg, "teacher");
    let sources = cfg.sources().map_err(runtime)?;
    let heldout = cfg.dataset(Role::Heldout).map_err(runtime)?;
    let refs: Vec<&Dataset> = sources.iter().collect();
    let outcome = train_teacher(&refs, Some(&heldout), &cfg.teacher, Some(&out)).map_err(core)?;
    write_json(&out.join("config.json"), &cfg)?;
    if let Some(val) = &outcome.report.val {
        eprintln!("teacher held-out mIoU {:.4}", val.miou);
    }
    eprintln!("teacher artifacts in {}", out.display());
    Ok(())
}

fn cmd_adapt_student(args: &ConfigArgs, teacher: Option<&Path>) -> CmdResult {
    let cfg = resolve_config(args)?;
    if print_config(args, &cfg)? {
        return Ok(());
    }
    let ckpt = teacher
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("teacher").join("teacher.ckpt"));
    let (params, _) = SegNetParams::load(&ckpt).map_err(usage)?;
    let out = phase_dir(args, &cfg, "student");
    adapt(&cfg, &params, &out)?;
    Ok(())
}

fn adapt(cfg: &RunConfig, teacher: &SegNetParams, out: &Path) -> Result<(MiouReport, MiouReport), Failure> {
    let target = cfg.dataset(Role::Target).map_err(runtime)?;
    let heldout = cfg.dataset(Role::Heldout).map_err(runtime)?;
    let sources = if cfg.student.source_ce_weight > 0.0 {
        cfg.sources().map_err(runtime)?
    } else {
        Vec::new()
    };
    let refs: Vec<&Dataset> = sources.iter().collect();
    let outcome = adapt_student(teacher, &target, &refs, Some(&heldout), &cfg.student, Some(out)).map_err(core)?;
    if outcome.target_label_reads != 0 {
        return Err(runtime(anyhow!(
            "target labels were read {} times during adaptation",
            outcome.target_label_reads
        )));
    }
    write_json(&out.join("config.json"), cfg)?;
    let before = evaluate(teacher, &heldout).map_err(core)?;
    let after = evaluate(&outcome.student, &heldout).map_err(core)?;
    eprintln!("held-out mIoU: teacher {:.4}, student {:.4}", before.miou, after.miou);
    eprintln!("student artifacts in {}", out.display());
    Ok((before, after))
}

#[derive(Serialize)]
struct PipelineReport {
    seed: u64,
    teacher: MiouReport,
    student: MiouReport,
}

fn cmd_run(args: &ConfigArgs) -> CmdResult {
    let cfg = resolve_config(args)?;
    if print_config(args, &cfg)? {
        return Ok(());
    }
    let root = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let data_dir = root.join("data");
    let mut materialized = cfg.clone();
    for i in 0..cfg.data.sources.len() {
        materialized.data.sources[i].manifest = Some(cfg.materialize(Role::Source(i), &data_dir).map_err(runtime)?);
    }
    materialized.data.target.manifest = Some(cfg.materialize(Role::Target, &data_dir).map_err(runtime)?);
    materialized.data.heldout.manifest = Some(cfg.materialize(Role::Heldout, &data_dir).map_err(runtime)?);
    eprintln!("datasets written to {}", data_dir.display());

    let sources = materialized.sources().map_err(runtime)?;
    let heldout = materialized.dataset(Role::Heldout).map_err(runtime)?;
    let refs: Vec<&Dataset> = sources.iter().collect();
    let teacher_dir = root.join("teacher");
    let teacher = train_teacher(&refs, Some(&heldout), &cfg.teacher, Some(&teacher_dir)).map_err(core)?;
    write_json(&teacher_dir.join("config.json"), &materialized)?;
    let (before, after) = adapt(&materialized, &teacher.params, &root.join("student"))?;
    write_json(
        &root.join(REPORT_FILE),
        &PipelineReport {
            seed: cfg.seed,
            teacher: before,
            student: after,
        },
    )
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> CmdResult {
    let (params, _) = SegNetParams::load(checkpoint).map_err(usage)?;
    let dataset = Dataset::load(data).map_err(usage)?;
    let report = evaluate(&params, &dataset).map_err(core)?;
    eprintln!("mIoU {:.4} over {} pixels", report.miou, report.pixels_evaluated);
    match out {
        Some(path) => write_json(path, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
            Ok(())
        }
    }
}

fn cmd_gradcheck(seeds: u64, out: Option<&Path>) -> CmdResult {
    let cfg = SuiteConfig {
        seeds,
        ..SuiteConfig::default()
    };
    let report = gradsuite::run(&cfg).map_err(runtime)?;
    for p in &report.paths {
        eprintln!(
            "{:<14} max relative error {:.3e} over {} seeds, {} coordinates: {}",
            p.path,
            p.max_relative_error,
            p.seeds,
            p.coordinates,
            if p.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check above tolerance {:e}",
            report.tolerance
        )))
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("SYNTHGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(anyhow!("SYNTHGEN_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)
}

fn dispatch(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            style,
            style_file,
            count,
            size,
            seed,
            out,
        } => cmd_gen_data(&style, style_file.as_deref(), count, size, seed, &out),
        Command::Mix {
            a,
            b,
            seed,
            gmc_patch_size,
            gmc_ratio,
            out,
        } => cmd_mix(&a, &b, seed, gmc_patch_size, gmc_ratio, &out),
        Command::TrainTeacher(args) => cmd_train_teacher(&args),
        Command::AdaptStudent { args, teacher } => cmd_adapt_student(&args, teacher.as_deref()),
        Command::Run(args) => cmd_run(&args),
        Command::Eval { checkpoint, data, out } => cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::Gradcheck { seeds, out } => cmd_gradcheck(seeds, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Usage(e) | Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Verification(msg) => eprintln!("verification failed: {msg}"),
            }
            ExitCode::from(failure.code())
        }
    }
}
