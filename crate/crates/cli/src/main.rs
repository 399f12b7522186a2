use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dagnet::ablation::run_ablation;
use dagnet::config::{parse_splits, RunConfig};
use dagnet::data::{self, split_dataset, Splits};
use dagnet::eval::{evaluate, load_for_eval, EvalConfig, ModelPredictor};
use dagnet::model::{ModelVariant, RolloutOptions};
use dagnet::plot::plot_rollout;
use dagnet::scene::{DatasetKind, Scene};
use dagnet::train::train_run;

#[derive(Parser)]
#[command(name = "dagnet", version, about = "Goal-conditioned multi-agent trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model variant and save its best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint with ADE/FDE on one or more splits.
    Eval(EvalArgs),
    /// Train and evaluate all three variants on the same data.
    Ablate(AblateArgs),
    /// Render a checkpoint's roll-out of one scene as SVG.
    Plot(PlotArgs),
    /// Write a synthetic dataset in TrajNet or play format.
    Synth(SynthArgs),
    /// Convert SportVU JSON to the play format.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Data file or directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Team to model on sports data: atk or def.
    #[arg(long)]
    team: Option<String>,
    #[arg(long)]
    variant: Option<ModelVariant>,
    #[arg(long)]
    obs: Option<usize>,
    #[arg(long)]
    pred: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample latents and outputs instead of taking means.
    #[arg(long)]
    sample: bool,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), self.dataset)?;
        if let Some(p) = &self.data {
            cfg.data_path = Some(p.clone());
        }
        if let Some(t) = &self.team {
            cfg.set("team", &format!("\"{t}\""))?;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(n) = self.obs {
            cfg.set("obs", &n.to_string())?;
        }
        if let Some(n) = self.pred {
            cfg.set("pred", &n.to_string())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.sample {
            cfg.sample = true;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
    All,
}

fn pick(splits: Splits<Scene>, part: Part) -> Vec<Scene> {
    match part {
        Part::Train => splits.train,
        Part::Val => splits.val,
        Part::Test => splits.test,
        Part::All => splits.train.into_iter().chain(splits.val).chain(splits.test).collect(),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Long-term splits as `obs-pred,...`; defaults to `--obs`/`--pred`.
    #[arg(long)]
    splits: Option<String>,
    /// Which part of the seeded train/val/test split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    part: Part,
    /// Directory for `eval.jsonl`; the report is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    splits: Option<String>,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index of the scene within the chosen part.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long, value_enum, default_value = "test")]
    part: Part,
    /// Overlay the goal grid.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of scenes (or plays).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// SportVU game JSON.
    input: PathBuf,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eval_config(cfg: &RunConfig, splits: Option<&str>) -> Result<EvalConfig> {
    Ok(EvalConfig {
        splits: match splits {
            Some(s) => parse_splits(s)?,
            None => vec![(cfg.obs, cfg.pred)],
        },
        seed: cfg.seed,
    })
}

fn load_parts(cfg: &RunConfig, window: usize) -> Result<Splits<Scene>> {
    let scenes = cfg.load_scenes_with_window(window)?;
    if scenes.is_empty() {
        bail!("dataset `{}` produced no scenes", cfg.dataset);
    }
    Ok(split_dataset(&scenes, cfg.data_seed))
}

fn longest(eval: &EvalConfig) -> usize {
    eval.splits.iter().map(|&(o, p)| o + p).max().unwrap_or(0)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let parts = load_parts(&cfg, cfg.obs + cfg.pred)?;
    create_dir(&args.out)?;
    write(&args.out.join("config.toml"), &cfg.to_toml())?;
    let art = train_run(&cfg, &parts.train, &parts.val, &args.out)?;
    println!(
        "trained {} for {} steps over {} scenes; best epoch {}",
        cfg.variant.display_name(),
        art.outcome.steps,
        parts.train.len(),
        art.outcome.best_epoch
    );
    println!("checkpoint: {}", art.checkpoint.display());
    println!("log: {}", art.log.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let (model, store) = load_for_eval(&args.checkpoint, args.common.variant)?;
    let ecfg = eval_config(&cfg, args.splits.as_deref())?;
    let scenes = pick(load_parts(&cfg, longest(&ecfg))?, args.part);
    let predictor = ModelPredictor {
        model: &model,
        store: &store,
        sample: cfg.sample,
        ground_truth_goals: cfg.eval_ground_truth_goals,
    };
    let report = evaluate(&predictor, model.config.variant.display_name(), &scenes, cfg.dataset, &ecfg)?;
    let lines = report.to_json_lines();
    print!("{lines}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write(&dir.join("eval.jsonl"), &lines)?;
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let ecfg = eval_config(&cfg, args.splits.as_deref())?;
    let parts = load_parts(&cfg, longest(&ecfg).max(cfg.obs + cfg.pred))?;
    create_dir(&args.out)?;
    let table = run_ablation(&cfg, &parts, &ecfg, Some(&args.out))?;
    let tsv = table.to_tsv();
    write(&args.out.join("ablation.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let (model, store) = load_for_eval(&args.checkpoint, args.common.variant)?;
    let scenes = pick(load_parts(&cfg, cfg.obs + cfg.pred)?, args.part);
    let scene = scenes
        .get(args.scene)
        .with_context(|| format!("scene {} out of range ({} scenes)", args.scene, scenes.len()))?;
    if scene.len() < cfg.obs + cfg.pred {
        bail!("scene {} has {} steps, need {}", args.scene, scene.len(), cfg.obs + cfg.pred);
    }
    let opts = RolloutOptions {
        obs: cfg.obs,
        pred: cfg.pred,
        sample: cfg.sample,
        ground_truth_goals: cfg.eval_ground_truth_goals,
    };
    let rollout = model.rollout(&store, scene, &opts, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let grid = if args.grid {
        Some(dagnet::grid::SceneGrid::new(scene.extent, cfg.grid_rows, cfg.grid_cols)?)
    } else {
        None
    };
    create_dir(&args.out)?;
    let path = args.out.join(format!("scene_{}.svg", args.scene));
    plot_rollout(scene, &rollout, cfg.obs, grid.as_ref(), &path)?;
    println!("{}", path.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    create_dir(&args.out)?;
    let path = match cfg.dataset {
        DatasetKind::Sports => {
            let plays = data::generate_synthetic_plays(cfg.data_seed, args.count.unwrap_or(100), 0.3);
            let path = args.out.join("plays.txt");
            write(&path, &data::write_plays(&plays))?;
            path
        }
        DatasetKind::Sdd | DatasetKind::Synthetic => {
            if let Some(n) = args.count {
                cfg.synth_scenes = n;
            }
            let scenes = data::generate_synthetic(&cfg.synthetic_config())?;
            let path = args.out.join("synthetic.txt");
            write(&path, &data::write_trajnet(&data::scenes_to_records(&scenes, 10)))?;
            path
        }
    };
    println!("{}", path.display());
    Ok(())
}

fn convert(args: ConvertArgs) -> Result<()> {
    let json = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let plays = data::convert_sportvu(&json).with_context(|| format!("converting {}", args.input.display()))?;
    create_dir(&args.out)?;
    let path = args.out.join("plays.txt");
    write(&path, &data::write_plays(&plays))?;
    println!("{} plays -> {}", plays.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot(a),
        Command::Synth(a) => synth(a),
        Command::Convert(a) => convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
