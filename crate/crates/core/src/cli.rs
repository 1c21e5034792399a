//! Command-line entry point.
//!
//! Every subcommand resolves a [`RunConfig`] from defaults, an optional JSON
//! file and flags (flags win), prints it to standard error and then runs.
//! Exit status is 0 on success, 1 on operational errors and 2 on usage
//! errors.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_image, feasibility_sweep, AttackConfig, Enumeration};
use crate::certify::{certify_grid, CertRule};
use crate::data::{load_standard, random_split, Dataset, DatasetKind, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_occlusion_training, evaluate_defense, multi_trial, run_trial, MultiTrialReport, TrialSetup,
};
use crate::grid::{prediction_grid, PredictionGrid};
use crate::image::Image;
use crate::nn::{self, load_params, save_params, InputShape, ModelParams, TrainConfig};
use crate::occlusion::{occlusion_size, BorderPolicy, DefenseConfig, Extent, VoteMode};
use crate::render::{render_prediction_grid, render_prediction_grid_ppm, render_vote_grid, RenderSpec};
use crate::vote::vote;

/// Which part of a dataset images are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Held-out part of the training file, split with the run seed.
    Val,
    #[default]
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub split: Split,
    pub model: Option<PathBuf>,
    pub defense: DefenseConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub rule: CertRule,
    pub taus: Vec<f64>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub trials: usize,
    /// Images drawn from the split; 0 means all of them.
    pub images: usize,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            split: Split::Test,
            model: None,
            defense: DefenseConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            rule: CertRule::Unanimous,
            taus: vec![0.5, 0.7, 0.9, 0.99],
            out: None,
            seed: 0,
            trials: 1,
            images: 200,
            threads: 0,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "occvote", version, about = "Occlusion-voting defense against adversarial patches")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<DatasetKind>,
    #[arg(long, global = true, env = "OCCVOTE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Image source: train, val or test.
    #[arg(long, global = true)]
    split: Option<Split>,
    /// Model checkpoint to read (or, for `train`, to write with --out).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Patch side in pixels, or WxH (the attack patch for `attack`).
    #[arg(long, global = true)]
    patch: Option<Extent>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    border: Option<BorderPolicy>,
    #[arg(long, global = true)]
    vote: Option<VoteMode>,
    /// Certification rule: unanimous or positionwise.
    #[arg(long, global = true)]
    rule: Option<CertRule>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of images to draw (0 = all).
    #[arg(long, global = true)]
    images: Option<usize>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the classifier and write a checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Train on unoccluded images only.
        #[arg(long)]
        no_occlusion_training: bool,
    },
    /// Write the prediction grid of one image.
    Grid(ImageArgs),
    /// Print the defended verdict for one image.
    Defend(ImageArgs),
    /// Certify one image, a grid file, or --images images.
    Certify {
        #[command(flatten)]
        image: ImageArgs,
        /// Certify this grid file instead of running the model.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Patch attack on the undefended classifier.
    Attack {
        /// Comma-separated patch sizes for a feasibility sweep.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Clean and certified accuracy over a threshold sweep.
    Eval {
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        /// Model trained without occlusion, for the ablation table.
        #[arg(long)]
        plain_model: Option<PathBuf>,
        /// Evaluate every image of the split.
        #[arg(long)]
        full: bool,
    },
    /// Draw a grid file as SVG.
    Render {
        #[arg(long)]
        grid: PathBuf,
        /// Hatch the windows covering a patch at X,Y.
        #[arg(long)]
        highlight: Option<String>,
        /// Draw the vote grid instead of the prediction grid.
        #[arg(long)]
        votes: bool,
        /// Also write a PPM raster here.
        #[arg(long)]
        ppm: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        cell: usize,
    },
}

#[derive(Debug, Args)]
struct ImageArgs {
    /// Index of the image within the split.
    #[arg(long)]
    index: Option<usize>,
}

/// Runs the command line and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            return 2;
        }
    };
    if cfg.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match serde_json::to_string_pretty(&cfg) {
        Ok(text) => eprintln!("effective configuration:\n{text}"),
        Err(e) => eprintln!("warning: cannot print configuration: {e}"),
    }
    match run(&cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.dataset {
        cfg.dataset = v;
    }
    if let Some(v) = &c.data_dir {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = c.split {
        cfg.split = v;
    }
    if let Some(v) = &c.model {
        cfg.model = Some(v.clone());
    }
    match (&cli.command, c.patch) {
        (Command::Attack { .. }, Some(p)) => {
            if !p.is_square() {
                return Err(Error::InvalidConfig("attack patches are square".into()));
            }
            cfg.attack.patch = p.width;
        }
        (_, Some(p)) => cfg.defense.patch = p,
        _ => {}
    }
    if let Some(v) = c.stride {
        cfg.defense.stride = v;
    }
    cfg.defense.occlusion = Extent {
        width: occlusion_size(cfg.defense.patch.width, cfg.defense.stride),
        height: occlusion_size(cfg.defense.patch.height, cfg.defense.stride),
    };
    if let Some(v) = c.tau {
        cfg.defense.tau = v;
    }
    if let Some(v) = c.border {
        cfg.defense.border = v;
    }
    if let Some(v) = c.vote {
        cfg.defense.vote = v;
    }
    if let Some(v) = c.rule {
        cfg.rule = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
        cfg.train.seed = v;
        cfg.attack.seed = v;
    }
    if let Some(v) = c.trials {
        cfg.trials = v;
    }
    if let Some(v) = &c.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = c.images {
        cfg.images = v;
    }
    if let Some(v) = c.threads {
        cfg.threads = v;
    }
    match &cli.command {
        Command::Train {
            epochs,
            batch_size,
            learning_rate,
            no_occlusion_training,
        } => {
            if let Some(v) = epochs {
                cfg.train.epochs = *v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = *v;
            }
            if let Some(v) = learning_rate {
                cfg.train.learning_rate = *v;
            }
            if *no_occlusion_training {
                cfg.train.occlusion_augmentation = false;
            }
            cfg.train.augmentation = crate::data::Augmentation::for_dataset(cfg.dataset);
            cfg.train.validate()?;
        }
        Command::Eval { taus, .. } if !taus.is_empty() => cfg.taus = taus.clone(),
        _ => {}
    }
    cfg.defense.validate()?;
    cfg.attack.validate()?;
    Ok(cfg)
}

fn run(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Train { .. } => cmd_train(cfg),
        Command::Grid(args) => cmd_grid(cfg, args),
        Command::Defend(args) => cmd_defend(cfg, args),
        Command::Certify { image, grid } => cmd_certify(cfg, image, grid.as_deref()),
        Command::Attack { sizes } => cmd_attack(cfg, sizes),
        Command::Eval { plain_model, full, .. } => cmd_eval(cfg, plain_model.as_deref(), *full),
        Command::Render {
            grid,
            highlight,
            votes,
            ppm,
            cell,
        } => cmd_render(cfg, grid, highlight.as_deref(), *votes, ppm.as_deref(), *cell),
    }
}

fn split_spec(cfg: &RunConfig) -> SplitSpec {
    SplitSpec {
        seed: cfg.seed,
        ..SplitSpec::default()
    }
}

/// Images of the configured split.
fn load_split(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.split {
        Split::Test => load_standard(cfg.dataset, &cfg.data_dir, false),
        Split::Train => load_standard(cfg.dataset, &cfg.data_dir, true),
        Split::Val => {
            let pool = load_standard(cfg.dataset, &cfg.data_dir, true)?;
            Ok(random_split(&pool, &split_spec(cfg))?.1)
        }
    }
}

/// A seeded sample of `cfg.images` images from the split (all if 0).
fn load_sample(cfg: &RunConfig, full: bool) -> Result<Dataset> {
    let data = load_split(cfg)?;
    if full || cfg.images == 0 || cfg.images >= data.len() {
        return Ok(data);
    }
    Ok(data.sample(cfg.images, cfg.seed))
}

fn load_model(cfg: &RunConfig) -> Result<ModelParams<f32>> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--model is required".into()))?;
    load_params(path)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut pool = load_standard(cfg.dataset, &cfg.data_dir, true)?;
    if cfg.images > 0 && cfg.images < pool.len() {
        pool = pool.sample(cfg.images, cfg.seed);
    }
    let (train_set, val) = random_split(&pool, &split_spec(cfg))?;
    let input = InputShape {
        channels: pool.channels,
        height: pool.height,
        width: pool.width,
    };
    let init = ModelParams::desk_cnn(input, pool.classes, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    eprintln!(
        "training on {} images, validating on {} ({} weights)",
        train_set.len(),
        val.len(),
        init.weight_count()
    );
    let outcome = nn::train(&init, &train_set, Some(&val), &cfg.train, &cfg.defense)?;
    for m in &outcome.metrics {
        println!("{}", serde_json::to_string(m)?);
    }
    let out = cfg.out.clone().or_else(|| cfg.model.clone()).unwrap_or_else(|| "model.bin".into());
    save_params(&outcome.params, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn image_at(cfg: &RunConfig, args: &ImageArgs) -> Result<(String, Image, usize)> {
    let data = load_split(cfg)?;
    let i = args.index.unwrap_or(0);
    if i >= data.len() {
        return Err(Error::InvalidConfig(format!(
            "index {i} out of range for {} images",
            data.len()
        )));
    }
    Ok((format!("{}-{i}", cfg.split), data.images[i].clone(), data.labels[i]))
}

fn grid_for(cfg: &RunConfig, args: &ImageArgs) -> Result<PredictionGrid> {
    let model = load_model(cfg)?;
    let (id, image, label) = image_at(cfg, args)?;
    let mut grid = prediction_grid(&model, &image, &cfg.defense)?;
    grid.image_id = id;
    grid.true_label = Some(label);
    Ok(grid)
}

fn cmd_grid(cfg: &RunConfig, args: &ImageArgs) -> Result<()> {
    let grid = grid_for(cfg, args)?;
    write_output(cfg.out.as_deref(), &(grid.to_json()? + "\n"))
}

fn cmd_defend(cfg: &RunConfig, args: &ImageArgs) -> Result<()> {
    let grid = grid_for(cfg, args)?;
    let (_, outcome) = crate::vote::defend(&grid)?;
    let line = serde_json::json!({
        "image_id": grid.image_id,
        "true_label": grid.true_label,
        "verdict": outcome.verdict.name(),
        "class": outcome.verdict.class(),
        "census": outcome.census,
    });
    write_output(cfg.out.as_deref(), &format!("{line}\n"))
}

/// Applies the run's voting settings to a grid read from a file.
fn with_vote_settings(mut grid: PredictionGrid, cfg: &RunConfig) -> PredictionGrid {
    grid.config.tau = cfg.defense.tau;
    grid.config.vote = cfg.defense.vote;
    grid
}

fn cmd_certify(cfg: &RunConfig, args: &ImageArgs, grid_file: Option<&Path>) -> Result<()> {
    let mut lines = String::new();
    if let Some(path) = grid_file {
        let grid = with_vote_settings(PredictionGrid::load(path)?, cfg);
        lines.push_str(&certify_grid(&grid)?.report_line(cfg.rule)?);
        lines.push('\n');
    } else if args.index.is_some() {
        let grid = grid_for(cfg, args)?;
        lines.push_str(&certify_grid(&grid)?.report_line(cfg.rule)?);
        lines.push('\n');
    } else {
        let model = load_model(cfg)?;
        let data = load_sample(cfg, false)?;
        let grids = crate::eval::dataset_grids(&model, &data, &cfg.defense, &format!("{}-s{}-", cfg.split, cfg.seed))?;
        let (mut safe, mut accurate) = (0, 0);
        for g in &grids {
            let r = certify_grid(g)?;
            safe += usize::from(r.certified_safe(cfg.rule));
            accurate += usize::from(r.certified_accurate(cfg.rule));
            lines.push_str(&r.report_line(cfg.rule)?);
            lines.push('\n');
        }
        eprintln!(
            "{} images: {safe} certified safe, {accurate} certified accurate ({} rule)",
            grids.len(),
            cfg.rule
        );
    }
    write_output(cfg.out.as_deref(), &lines)
}

fn cmd_attack(cfg: &RunConfig, sizes: &[usize]) -> Result<()> {
    let model = load_model(cfg)?;
    let data = load_sample(cfg, false)?;
    if !sizes.is_empty() {
        let rows = feasibility_sweep(&model, &data.images, &data.labels, sizes, &cfg.attack)?;
        let mut text = String::from("patch,images,successes,success_rate\n");
        for r in rows {
            text.push_str(&format!("{},{},{},{:.6}\n", r.patch, r.images, r.successes, r.success_rate));
        }
        return write_output(cfg.out.as_deref(), &text);
    }
    let mut lines = String::new();
    let mut successes = 0;
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let per_image = AttackConfig {
            seed: cfg.attack.seed.wrapping_add(i as u64),
            ..cfg.attack
        };
        let mut r = attack_image(&model, img, label, &per_image, Enumeration::Exhaustive)?;
        r.image_id = format!("{}-s{}-{i}", cfg.split, cfg.seed);
        successes += usize::from(r.success);
        lines.push_str(&r.report_line()?);
        lines.push('\n');
    }
    eprintln!("{successes}/{} images attacked successfully", data.len());
    write_output(cfg.out.as_deref(), &lines)
}

fn cmd_eval(cfg: &RunConfig, plain_model: Option<&Path>, full: bool) -> Result<()> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("eval-out"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    if cfg.trials > 1 || cfg.model.is_none() {
        let pool = load_standard(cfg.dataset, &cfg.data_dir, true)?;
        let setup = TrialSetup {
            pool: &pool,
            train: cfg.train,
            defense: cfg.defense,
            split: split_spec(cfg),
            eval_images: if cfg.images == 0 { usize::MAX } else { cfg.images },
        };
        let seeds: Vec<u64> = (0..cfg.trials.max(1) as u64).map(|k| cfg.seed + k).collect();
        let report: MultiTrialReport = multi_trial(&seeds, |s| {
            eprintln!("trial with seed {s}");
            run_trial(&setup, s)
        })?;
        write("trials.csv", &report.csv())?;
        write("trials.json", &serde_json::to_string_pretty(&report)?)?;
        print!("{}", report.csv());
        return Ok(());
    }
    let model = load_model(cfg)?;
    if full {
        eprintln!("warning: evaluating every image of the split; this can take a long time");
    }
    let data = load_sample(cfg, full)?;
    let report = evaluate_defense(&model, &data, &cfg.defense, &cfg.taus)?;
    write("tau_sweep.csv", &report.tau_csv())?;
    write("report.json", &serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.tau_csv());
    if let Some(path) = plain_model {
        let plain = load_params(path)?;
        let ablation = ablation_occlusion_training(&model, &plain, &data, &cfg.defense)?;
        write("ablation.csv", &ablation.csv())?;
        print!("{}", ablation.csv());
    }
    Ok(())
}

fn parse_position(s: &str) -> Result<crate::occlusion::Position> {
    let bad = || Error::InvalidConfig(format!("expected X,Y, got {s:?}"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    Ok(crate::occlusion::Position::new(
        x.trim().parse().map_err(|_| bad())?,
        y.trim().parse().map_err(|_| bad())?,
    ))
}

fn cmd_render(
    cfg: &RunConfig,
    grid_path: &Path,
    highlight: Option<&str>,
    votes: bool,
    ppm: Option<&Path>,
    cell: usize,
) -> Result<()> {
    let grid = with_vote_settings(PredictionGrid::load(grid_path)?, cfg);
    let spec = RenderSpec {
        cell,
        highlight: highlight.map(parse_position).transpose()?,
        ..RenderSpec::default()
    };
    let svg = if votes {
        render_vote_grid(&vote(&grid)?, grid.classes, &spec)?
    } else {
        render_prediction_grid(&grid, &spec)?
    };
    if let Some(path) = ppm {
        fs::write(path, render_prediction_grid_ppm(&grid, &spec)?).map_err(|e| Error::io(path, e))?;
    }
    write_output(cfg.out.as_deref(), &svg)
}
