//! `tomo-rfid`: simulate read logs, calibrate, train, image and evaluate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tomo_rfid::channel_sim::log::{read_log, write_log};
use tomo_rfid::channel_sim::{ChannelModel, ObstructionScene};
use tomo_rfid::dnn::MlpEnsemble;
use tomo_rfid::geometry::{Layout, LayoutConfig};
use tomo_rfid::pipeline::{run_session, ImagingMode, Imager, PipelineConfig};
use tomo_rfid::preprocess::{run_calibration, CalibrationProfile};
use tomo_rfid::scenario::{
    calibrate, suite_by_name, test_profile, train_ensemble, training_profiles, training_set, EvalContext, Scenario,
    SuiteConfig,
};
use tomo_rfid::tracking::{EvalReport, REPORT_HEADER};

const SEED_ENV: &str = "TOMO_RFID_SEED";

/// Everything configurable, in one TOML file. Missing sections take defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    layout: LayoutConfig,
    channel: ChannelModel,
    pipeline: PipelineConfig,
    suite: SuiteConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.channel.validate()?;
        cfg.pipeline.imaging.validate()?;
        Ok(cfg)
    }
}

#[derive(Parser)]
#[command(name = "tomo-rfid", version, about = "RFID shelf tomography: simulate, calibrate, train, image, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration ([layout], [channel], [pipeline], [suite]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; the TOMO_RFID_SEED environment variable wins when set.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn seed(&self) -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer"))?)),
            Err(_) => Ok(self.seed),
        }
    }

    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed()? {
            cfg.suite.seed = seed;
            cfg.pipeline.window.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a read log from a scene.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scene JSON file.
        #[arg(long, conflicts_with = "scenario")]
        scene: Option<PathBuf>,
        /// Built-in scene instead of a file, e.g. "3" or "1+4+6".
        #[arg(long)]
        scenario: Option<String>,
        /// Overrides the scene duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Reads per second; defaults to the suite rate.
        #[arg(long)]
        rate: Option<f64>,
        /// Output log, CSV or JSON Lines by extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a calibration profile from an obstruction-free log.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network ensemble on synthetic training bodies.
    Train {
        #[command(flatten)]
        common: Common,
        /// Calibration JSON; simulated from the suite settings when absent.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Ensemble size D.
        #[arg(long)]
        ensemble: Option<usize>,
        #[arg(long)]
        k_cw: Option<usize>,
        #[arg(long)]
        rate: Option<f64>,
        /// Checkpoint path; per-epoch losses go next to it as .losses.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a log through monitoring, imaging and tracking.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value = "dnn")]
        mode: ImagingMode,
        /// Network checkpoint, required in dnn mode.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        k_cw: Option<usize>,
        /// Output directory for frames and scores.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score scenario suites and the reading-rate sweep.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value = "dnn")]
        mode: ImagingMode,
        #[arg(long)]
        model: Option<PathBuf>,
        /// single, two, three, multi, all, or names like "1+3,2+4+6".
        #[arg(long, default_value = "all")]
        suite: String,
        /// Comma-separated impact widths; the configured width when omitted.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        k_cw: Option<Vec<usize>>,
        /// Base reading rate; defaults to the suite rate.
        #[arg(long)]
        rate: Option<f64>,
        /// Skip the reading-rate sweep.
        #[arg(long)]
        no_sweep: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration as TOML.
    Defaults,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            scene,
            scenario,
            duration,
            rate,
            out,
        } => cmd_simulate(&common, scene.as_deref(), scenario.as_deref(), duration, rate, &out),
        Command::Calibrate { common, log, out } => cmd_calibrate(&common, &log, &out),
        Command::Train {
            common,
            calib,
            epochs,
            ensemble,
            k_cw,
            rate,
            out,
        } => cmd_train(&common, calib.as_deref(), epochs, ensemble, k_cw, rate, &out),
        Command::Pipeline {
            common,
            log,
            calib,
            mode,
            model,
            k_cw,
            out,
        } => cmd_pipeline(&common, &log, &calib, mode, model.as_deref(), k_cw, &out),
        Command::Eval {
            common,
            calib,
            mode,
            model,
            suite,
            k_cw,
            rate,
            no_sweep,
            out,
        } => cmd_eval(&common, calib.as_deref(), mode, model.as_deref(), &suite, k_cw, rate, !no_sweep, &out),
        Command::Defaults => {
            print!("{}", toml::to_string(&RunConfig::default())?);
            Ok(())
        }
    }
}

fn load_calibration(path: &Path) -> Result<CalibrationProfile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading calibration {}", path.display()))?;
    CalibrationProfile::from_json_str(&text).with_context(|| format!("parsing calibration {}", path.display()))
}

fn calibration_or_simulated(path: Option<&Path>, layout: &Layout, cfg: &RunConfig) -> Result<CalibrationProfile> {
    let profile = match path {
        Some(p) => load_calibration(p)?,
        None => {
            eprintln!("no --calib given; simulating a {} s calibration capture", cfg.suite.calibration_s);
            calibrate(layout, &cfg.channel, cfg.suite.rate, cfg.suite.calibration_s, cfg.suite.seed)?
        }
    };
    profile
        .check_compatible(layout.num_tags(), layout.num_antennas(), cfg.channel.num_channels())
        .context("calibration does not match the layout and channel plan")?;
    Ok(profile)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_simulate(
    common: &Common,
    scene_path: Option<&Path>,
    scenario: Option<&str>,
    duration: Option<f64>,
    rate: Option<f64>,
    out: &Path,
) -> Result<()> {
    let cfg = common.config()?;
    let layout = cfg.layout.build()?;
    let seed = common.seed()?;
    let mut scene = match (scene_path, scenario) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading scene {}", path.display()))?;
            ObstructionScene::from_json_str(&text).with_context(|| format!("parsing scene {}", path.display()))?
        }
        (None, Some(name)) => {
            let scn = Scenario::parse(name, layout.categories.len())?;
            let s = &cfg.suite;
            scn.scene(&layout, &test_profile(), s.lead_in_s, s.scenario_duration_s(), s.seed)
        }
        (None, None) => bail!("one of --scene or --scenario is required"),
    };
    if let Some(d) = duration {
        scene.duration_s = d;
    }
    if let Some(s) = seed {
        scene.seed = s;
    }
    scene.validate()?;
    let rate = rate.unwrap_or(cfg.suite.rate);
    let reads = tomo_rfid::channel_sim::generate_reads(&layout.grid, &layout.antennas, &cfg.channel, &scene, rate)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let n = write_log(out, reads)?;
    println!("wrote {n} reads to {}", out.display());
    Ok(())
}

fn cmd_calibrate(common: &Common, log: &Path, out: &Path) -> Result<()> {
    let cfg = common.config()?;
    let layout = cfg.layout.build()?;
    let reads = read_log(log)?;
    let profile = run_calibration(&reads, &layout.grid, &layout.antennas, cfg.channel.num_channels())?;
    write_file(out, profile.to_json_string().as_bytes())?;
    println!(
        "calibrated {} tags x {} antennas x {} channels from {} reads; sigma_y = {:.4}",
        profile.num_tags,
        profile.num_antennas,
        profile.num_channels,
        reads.len(),
        profile.sigma_y_cal
    );
    Ok(())
}

fn cmd_train(
    common: &Common,
    calib: Option<&Path>,
    epochs: Option<usize>,
    ensemble: Option<usize>,
    k_cw: Option<usize>,
    rate: Option<f64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = common.config()?;
    if let Some(e) = epochs {
        cfg.suite.epochs = e;
    }
    if let Some(d) = ensemble {
        cfg.suite.ensemble_size = d;
    }
    if let Some(k) = k_cw {
        cfg.pipeline.window.k_cw = k;
    }
    if let Some(r) = rate {
        cfg.suite.rate = r;
    }
    let layout = cfg.layout.build()?;
    let profile = calibration_or_simulated(calib, &layout, &cfg)?;
    let set = training_set(&layout, &cfg.channel, &profile, &cfg.pipeline, &cfg.suite)?;
    eprintln!(
        "training {} network(s) x {} epochs on {} samples ({} bodies x {} categories, plus synthesized no-obstruction samples)",
        cfg.suite.ensemble_size,
        cfg.suite.epochs,
        set.len(),
        training_profiles().len(),
        layout.categories.len()
    );
    let (ens, histories) = train_ensemble(&layout, &set, &cfg.suite)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ens.save(out)?;
    let mut csv = String::from("member,epoch,loss\n");
    for (m, h) in histories.iter().enumerate() {
        for (e, loss) in h.iter().enumerate() {
            csv.push_str(&format!("{m},{},{loss:.6e}\n", e + 1));
        }
    }
    let loss_path = out.with_extension("losses.csv");
    write_file(&loss_path, csv.as_bytes())?;
    let finals: Vec<String> = histories
        .iter()
        .filter_map(|h| h.last())
        .map(|l| format!("{l:.5}"))
        .collect();
    println!(
        "saved {} (final losses [{}]); losses in {}",
        out.display(),
        finals.join(", "),
        loss_path.display()
    );
    Ok(())
}

fn build_imager(mode: ImagingMode, model: Option<&Path>, layout: &Layout, profile: &CalibrationProfile, cfg: &RunConfig) -> Result<Imager> {
    match mode {
        ImagingMode::Analytic => Ok(Imager::analytic(layout, profile, &cfg.pipeline.imaging)?),
        ImagingMode::Dnn => {
            let path = model.context("--model is required in dnn mode")?;
            let ens = MlpEnsemble::load(path, layout.num_tags(), layout.num_voxels())
                .with_context(|| format!("loading model {}", path.display()))?;
            Ok(Imager::Dnn(ens))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_pipeline(
    common: &Common,
    log: &Path,
    calib: &Path,
    mode: ImagingMode,
    model: Option<&Path>,
    k_cw: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = common.config()?;
    if let Some(k) = k_cw {
        cfg.pipeline.window.k_cw = k;
    }
    let layout = cfg.layout.build()?;
    let profile = calibration_or_simulated(Some(calib), &layout, &cfg)?;
    let reads = read_log(log)?;
    let imager = build_imager(mode, model, &layout, &profile, &cfg)?;
    let ticks = run_session(
        reads,
        &layout,
        &profile,
        &imager,
        cfg.channel.num_channels(),
        cfg.channel.average_wavelength(),
        &cfg.pipeline,
    )?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let n_cat = layout.categories.len();
    let mut csv = String::from("tick,timestamp_s,frame,blobs,categories");
    for j in 1..=n_cat {
        csv.push_str(&format!(",p{j}"));
    }
    csv.push('\n');
    let mut jsonl = String::new();
    let mut frames = 0usize;
    for t in &ticks {
        let frame_name = match &t.frame {
            Some(f) => {
                frames += 1;
                let name = format!("frame_{frames:06}.pgm");
                f.write_pgm(&out.join(&name))?;
                name
            }
            None => String::new(),
        };
        let cats: Vec<String> = t.score.categories.iter().map(|c| (c + 1).to_string()).collect();
        csv.push_str(&format!(
            "{},{:.6},{},{},{}",
            t.score.tick,
            t.score.timestamp_s,
            frame_name,
            t.score.blobs,
            cats.join("+")
        ));
        for p in &t.score.scores {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
        jsonl.push_str(&t.score.to_json_line());
        jsonl.push('\n');
    }
    write_file(&out.join("scores.csv"), csv.as_bytes())?;
    write_file(&out.join("scores.jsonl"), jsonl.as_bytes())?;
    let last = ticks.last().map(|t| t.score.scores.clone()).unwrap_or_else(|| vec![0; n_cat]);
    println!("{} ticks, {frames} frames; popularity {:?}", ticks.len(), last);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    calib: Option<&Path>,
    mode: ImagingMode,
    model: Option<&Path>,
    suite_name: &str,
    k_cws: Option<Vec<usize>>,
    rate: Option<f64>,
    sweep: bool,
    out: &Path,
) -> Result<()> {
    let mut cfg = common.config()?;
    let k_cws = k_cws.unwrap_or_else(|| vec![cfg.pipeline.window.k_cw]);
    if k_cws.is_empty() {
        bail!("--k-cw needs at least one impact width");
    }
    if let Some(r) = rate {
        cfg.suite.rate = r;
    }
    let layout = cfg.layout.build()?;
    let scenarios = suite_by_name(suite_name, layout.categories.len())?;
    let profile = calibration_or_simulated(calib, &layout, &cfg)?;
    let imager = build_imager(mode, model, &layout, &profile, &cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut report = EvalReport::default();
    for &k in &k_cws {
        let mut pipeline = cfg.pipeline.clone();
        pipeline.window.k_cw = k;
        let ctx = EvalContext {
            layout: &layout,
            model: &cfg.channel,
            profile: &profile,
            imager: &imager,
            pipeline: &pipeline,
            suite: &cfg.suite,
            training_users: training_profiles().len(),
        };
        report.rows.extend(ctx.run_suite(&scenarios, cfg.suite.rate)?.rows);
    }
    write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
    print!("{report}");

    if sweep {
        let mut pipeline = cfg.pipeline.clone();
        pipeline.window.k_cw = k_cws[0];
        let ctx = EvalContext {
            layout: &layout,
            model: &cfg.channel,
            profile: &profile,
            imager: &imager,
            pipeline: &pipeline,
            suite: &cfg.suite,
            training_users: training_profiles().len(),
        };
        let mut csv = format!("rate_fraction,rate,{REPORT_HEADER}\n");
        for fraction in [1.0, 0.5, 0.25, 0.1] {
            let r = cfg.suite.rate * fraction;
            for row in ctx.run_suite(&scenarios, r)?.rows {
                csv.push_str(&format!(
                    "{fraction},{r},{},{},{},{:.6},{:.6},{:.6}\n",
                    row.scenario, row.k_cw, row.training_users, row.tpr, row.fpr, row.mr
                ));
            }
        }
        write_file(&out.join("rate_sweep.csv"), csv.as_bytes())?;
    }
    let mut stdout = std::io::stdout();
    writeln!(stdout, "wrote {}", out.join("report.csv").display())?;
    Ok(())
}
