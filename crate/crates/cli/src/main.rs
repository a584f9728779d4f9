//! `milkit` command-line driver.
//!
//! Failures print one line to stderr, `error kind=<kind> message=<json string>`,
//! and exit with status 1. Usage errors exit with status 2.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use milkit::bagsynth::{self, Bag, BagRecipe, Manifest};
use milkit::gradcheck;
use milkit::harness::train::{make_folds, InstanceTargets};
use milkit::harness::{cross_validate_with, ensemble_predict, Checkpoint, CvRun, TrainConfig};
use milkit::metrics::{aggregate_folds, FoldMetrics, MetricsReport};
use milkit::pseudolabel::{assign_pseudo_labels, ensemble_infer, read_records, records_to_targets, write_records, LabelTable};
use milkit::{par, Model};

#[derive(Parser)]
#[command(name = "milkit", version, about = "Multiple-instance learning experiments on synthetic bags")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Override the seed of the recipe or config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fold and bag parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run single-threaded so results are bit-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Directory for every file a command writes.
    #[arg(long, global = true, env = "MILKIT_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Grade,
    Max,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset manifest from a recipe.
    GenData {
        #[arg(long, value_enum, default_value = "grade")]
        task: Task,
        /// Recipe JSON file; replaces --task and its size flags.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        bags: usize,
        /// Instances per bag.
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Pattern count of the max-rule task.
        #[arg(long, default_value_t = 4)]
        patterns: usize,
        /// Also write the generated bags as JSON lines.
        #[arg(long)]
        jsonl: bool,
    },
    /// Cross-validate a config and save one checkpoint per fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Method name in the report.
        #[arg(long)]
        method: Option<String>,
    },
    /// Derive instance pseudo-labels from an ensemble of checkpoints.
    PseudoLabel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// Label only the training bags of this fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value = "pseudo_labels.jsonl")]
        output: String,
    },
    /// Cross-validate again with the patch loss on pseudo-labels.
    Retrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        method: Option<String>,
    },
    /// Score an ensemble of checkpoints on a dataset.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// Manifest JSON or bags JSON lines (`.jsonl`).
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Take the dataset from a config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        method: String,
    },
    /// Collect reports into one CSV table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<milkit::Error> for Failure {
    fn from(e: milkit::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

impl Failure {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = serde_json::to_string(&f.message).unwrap_or_default();
            eprintln!("error kind={} message={message}", f.kind);
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let g = cli.global;
    if g.deterministic {
        par::set_sequential(true);
    } else if let Some(n) = g.threads {
        par::init_threads(n)?;
    }
    fs::create_dir_all(&g.out_dir).map_err(|e| io_failure(&g.out_dir, e))?;
    match cli.command {
        Command::GenData { task, recipe, bags, k, patterns, jsonl } => gen_data(&g, task, recipe.as_deref(), bags, k, patterns, jsonl),
        Command::Train { config, method } => {
            let cfg = load_config(&config, g.seed)?;
            let bags = cfg.data.load()?;
            fit(&g, &cfg, &bags, method.as_deref().unwrap_or(cfg.model.head.variant.label()), None)
        }
        Command::PseudoLabel { config, checkpoints, fold, output } => pseudo_label(&g, &config, &checkpoints, fold, &output),
        Command::Retrain { config, labels, method } => {
            let cfg = load_config(&config, g.seed)?;
            let bags = cfg.data.load()?;
            let targets = records_to_targets(&read_records(&labels)?, &bags)?;
            let method = method.unwrap_or_else(|| format!("{} + pseudo-labels", cfg.model.head.variant.label()));
            fit(&g, &cfg, &bags, &method, Some(&targets))
        }
        Command::Eval { checkpoints, data, config, method } => eval(&g, &checkpoints, data.as_deref(), config.as_deref(), &method),
        Command::Report { reports, output } => report(&g, &reports, output.as_deref()),
        Command::Gradcheck { trials } => grad_check(trials, g.seed.unwrap_or(0)),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(milkit::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn load_config(path: &Path, seed: Option<u64>) -> Outcome<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_data(path: &Path) -> Outcome<Vec<Bag>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(bagsynth::read_jsonl(path)?)
    } else {
        Ok(bagsynth::load_manifest(path)?.generate()?)
    }
}

fn load_models(paths: &[PathBuf]) -> Outcome<Vec<Model<f32>>> {
    paths.iter().map(|p| Ok(Checkpoint::load(p)?.model)).collect()
}

fn gen_data(g: &Global, task: Task, recipe: Option<&Path>, bags: usize, k: usize, patterns: usize, jsonl: bool) -> Outcome {
    let seed = g.seed.unwrap_or(0);
    let mut recipe = match recipe {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str::<BagRecipe>(&text).map_err(|e| Failure::new("config", format!("{}: {e}", path.display())))?
        }
        None => match task {
            Task::Grade => BagRecipe::two_pattern_grade(bags, k, seed),
            Task::Max => BagRecipe::max_rule(bags, k, patterns, seed),
        },
    };
    if let Some(s) = g.seed {
        recipe.seed = s;
    }
    let manifest = Manifest::new(recipe);
    let generated = manifest.generate()?;
    let path = g.out_dir.join("manifest.json");
    bagsynth::save_manifest(&path, &manifest)?;
    println!("wrote {} ({} bags)", path.display(), generated.len());
    if jsonl {
        let path = g.out_dir.join("bags.jsonl");
        bagsynth::write_jsonl(&path, &generated)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fit(g: &Global, cfg: &TrainConfig, bags: &[Bag], method: &str, targets: Option<&[InstanceTargets]>) -> Outcome {
    let CvRun { models, report, .. } = cross_validate_with(cfg, bags, method, targets)?;
    for (f, trained) in models.into_iter().enumerate() {
        let mut ckpt = Checkpoint::new(trained.model, trained.steps);
        ckpt.header.fold = Some(f);
        ckpt.header.metrics = trained.metrics;
        let path = g.out_dir.join(format!("fold{f}.ckpt"));
        ckpt.save(&path)?;
        let m = trained.metrics.unwrap_or_default();
        println!("fold {f}: best epoch {} qwk {:.4} accuracy {:.4} -> {}", trained.best_epoch, m.qwk, m.accuracy, path.display());
    }
    let path = g.out_dir.join("report.json");
    write_json(&path, &report)?;
    let row = report.csv_row();
    println!("{}: accuracy {} auc {} qwk {}", row[0], row[1], row[2], row[3]);
    Ok(())
}

fn pseudo_label(g: &Global, config: &Path, checkpoints: &[PathBuf], fold: Option<usize>, output: &str) -> Outcome {
    let cfg = load_config(config, g.seed)?;
    let all = cfg.data.load()?;
    let bags: Vec<Bag> = match fold {
        None => all,
        Some(f) => {
            let folds = make_folds(&cfg, &all)?;
            let chosen = folds.get(f).ok_or_else(|| Failure::new("config", format!("fold {f} of {}", folds.len())))?;
            chosen.train.iter().map(|&i| all[i].clone()).collect()
        }
    };
    let models = load_models(checkpoints)?;
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let inference = ensemble_infer(&refs, &bags)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let records = assign_pseudo_labels(&inference, &labels)?;
    let path = g.out_dir.join(output);
    write_records(&path, &records)?;
    let table = LabelTable::from_records(&records, inference.classes);
    println!("wrote {} ({} instances, {} unknown)", path.display(), records.len(), table.unknown);
    Ok(())
}

fn eval(g: &Global, checkpoints: &[PathBuf], data: Option<&Path>, config: Option<&Path>, method: &str) -> Outcome {
    let bags = match (data, config) {
        (Some(d), _) => load_data(d)?,
        (None, Some(c)) => load_config(c, g.seed)?.data.load()?,
        (None, None) => return Err(Failure::new("config", "eval needs --data or --config")),
    };
    let models = load_models(checkpoints)?;
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let (probs, preds) = ensemble_predict(&refs, &bags)?;
    let targets: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let metrics = FoldMetrics::compute(&targets, &preds, &probs, models[0].num_classes())?;
    let report = aggregate_folds(method, &[metrics])?;
    let path = g.out_dir.join("eval.json");
    write_json(&path, &report)?;
    let auc = metrics.auc.map_or("-".to_string(), |a| format!("{a:.4}"));
    println!("{method}: accuracy {:.4} auc {auc} qwk {:.4} ({} bags)", metrics.accuracy, metrics.qwk, bags.len());
    Ok(())
}

fn report(g: &Global, reports: &[PathBuf], output: Option<&str>) -> Outcome {
    let mut table = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::new("io", e.to_string());
    table.write_record(MetricsReport::csv_header()).map_err(csv_err)?;
    for path in reports {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let r: MetricsReport = serde_json::from_str(&text).map_err(|e| Failure::new("json", format!("{}: {e}", path.display())))?;
        table.write_record(r.csv_row()).map_err(csv_err)?;
    }
    let bytes = table.into_inner().map_err(|e| Failure::new("io", e.to_string()))?;
    match output {
        Some(name) => {
            let path = g.out_dir.join(name);
            fs::write(&path, &bytes).map_err(|e| io_failure(&path, e))?;
        }
        None => std::io::stdout().write_all(&bytes).map_err(|e| io_failure(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

fn grad_check(trials: usize, seed: u64) -> Outcome {
    let results = gradcheck::suite(trials, seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status} {} trials={} max_rel_err={:.3e} tol={:.0e}", r.name, r.trials, r.max_rel_err, r.tolerance);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Failure::new("gradcheck", format!("{} of {} cases failed: {}", failed.len(), results.len(), failed.join(", "))));
    }
    println!("{} cases passed", results.len());
    Ok(())
}
