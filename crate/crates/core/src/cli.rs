//! Command-line front end. Every command resolves one [`RunConfig`], writes
//! it with its hash next to the outputs, and stamps the hash into each file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::benchgen::io::{Provenance, FORMAT_VERSION};
use crate::benchgen::Subset;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    beta_grid, beta_sweep, caam_ablation, comparison_table, evaluate, robustness_eval, roi_crop_baseline, AblationRow, MetricsReport, RobustnessRow, SweepRow,
    Table,
};
use crate::model::{load_checkpoint, run_gradcheck, save_checkpoint, train, BetaSource, Checkpoint, GradCheckRow, ModelParams, QueryView, TrainConfig};
use crate::pipeline::{eval_sets, generate_benchmark, read_benchmark, training_samples, write_benchmark, Benchmark};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "anchorfocus", version, about = "Instance-anchored composed image retrieval on a synthetic benchmark")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Benchmark directory written by `gen`; defaults to the output directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Comma-separated subsets: training subsets for `train`, evaluated
    /// subsets otherwise.
    #[arg(long, global = true, value_delimiter = ',')]
    pub subsets: Option<Vec<String>>,
    /// Comma-separated sweep grid as multiples of sqrt(d_k).
    #[arg(long, global = true, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    /// Checkpoint to read (eval, ablate) or write (train).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate worlds, quadruples and galleries for every subset.
    Gen,
    /// Train a model on generated data.
    Train,
    /// Evaluate a checkpoint.
    Eval,
    /// Run one of the ablation studies.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
    },
    /// Finite-difference check of every trainable parameter group.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    Beta,
    Caam,
    Robustness,
    Roicrop,
}

/// What a command reports back besides its files.
#[derive(Debug)]
pub enum Outcome {
    Ok,
    /// A check ran and failed.
    CheckFailed(String),
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Gallery(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command, and maps the result
/// to an exit code. Diagnostics go to stderr.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Applies file and flag overrides to the defaults.
pub fn resolve_config(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(b) = &common.betas {
        cfg.eval.beta_multipliers = b.clone();
    }
    if let Some(list) = &common.subsets {
        let parsed = list.iter().map(|s| s.trim().parse::<Subset>()).collect::<Result<Vec<_>>>()?;
        match command {
            Command::Train => cfg.train.subsets = parsed.iter().map(|s| s.name().to_string()).collect(),
            Command::Gen => cfg.world.subsets = parsed,
            _ => cfg.eval.subsets = parsed,
        }
    }
    cfg.resolve()
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let ctx = Context {
        cfg,
        data: cli.common.data.clone(),
        checkpoint: cli.common.checkpoint.clone(),
    };
    match &cli.command {
        Command::Gen => ctx.gen(),
        Command::Train => ctx.train(),
        Command::Eval => ctx.eval(),
        Command::Ablate { kind } => ctx.ablate(*kind),
        Command::Gradcheck => ctx.gradcheck(),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

struct Context {
    cfg: RunConfig,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

impl Context {
    fn out(&self) -> &Path {
        &self.cfg.out
    }

    fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.cfg.out)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.cfg.out.join("checkpoint.bin"))
    }

    fn hash(&self) -> String {
        self.cfg.hash()
    }

    /// Writes `<name>_config.json` with the resolved config and hash.
    fn stamp(&self, name: &str) -> Result<()> {
        write(&self.out().join(format!("{name}_config.json")), self.cfg.resolved_json())
    }

    /// CSV with a provenance comment line.
    fn write_table(&self, file: &str, table: &Table) -> Result<()> {
        let text = format!("# config_hash={} seed={}\n{}", self.hash(), self.cfg.seed, table.to_csv());
        print!("{}", table.to_csv());
        write(&self.out().join(file), text)
    }

    fn eval_subsets(&self) -> Vec<Subset> {
        if self.cfg.eval.subsets.is_empty() {
            self.cfg.world.subsets.clone()
        } else {
            self.cfg.eval.subsets.clone()
        }
    }

    fn load(&self, subsets: &[Subset]) -> Result<Benchmark> {
        Ok(read_benchmark(self.data_dir(), subsets)?.0)
    }

    fn load_params(&self) -> Result<ModelParams> {
        Ok(load_checkpoint(&self.checkpoint_path())?.params)
    }

    fn gen(&self) -> Result<Outcome> {
        let encoder = self.cfg.encoder()?;
        let bench = generate_benchmark(&self.cfg.benchmark(), &encoder)?;
        let prov = Provenance {
            format: "anchorfocus-benchmark".into(),
            version: FORMAT_VERSION,
            seed: self.cfg.seed,
            config_hash: self.hash(),
        };
        write_benchmark(self.out(), &bench, &prov)?;
        self.write_table("stats.csv", &stats_table(&bench))?;
        self.stamp("gen")?;
        Ok(Outcome::Ok)
    }

    fn train(&self) -> Result<Outcome> {
        let subsets = self.cfg.world.subsets.clone();
        let bench = self.load(&subsets)?;
        let encoder = self.cfg.encoder()?;
        let chosen = self.cfg.train_subsets()?;
        if let Some(s) = chosen.iter().find(|s| !subsets.contains(s)) {
            return Err(Error::Config(format!("train.subsets names {s}, which is not among world.subsets")));
        }
        let samples = training_samples(&bench, &encoder, &chosen)?;
        let mut params = ModelParams::new(&self.cfg.model, encoder, self.cfg.model_seed())?;
        let report = train(&self.cfg.train, &samples, &mut params)?;
        let ck = Checkpoint {
            params,
            seed: self.cfg.seed,
            config_hash: self.hash(),
        };
        save_checkpoint(&self.checkpoint_path(), &ck)?;

        let mut log = Table::new(&["epoch", "mean_loss", "mean_beta"]);
        for e in &report.epochs {
            log.push(vec![
                e.epoch.to_string(),
                format!("{:.6}", e.mean_loss),
                e.mean_beta.map(|b| format!("{b:.6}")).unwrap_or_default(),
            ]);
        }
        self.write_table("train_log.csv", &log)?;

        #[derive(Serialize)]
        struct Manifest {
            config_hash: String,
            seed: u64,
            subsets: Vec<Subset>,
            n_samples: usize,
            instances: Vec<(Subset, Vec<u32>)>,
            initial_loss: f64,
        }
        let used: Vec<&_> = bench.subsets.iter().filter(|d| chosen.is_empty() || chosen.contains(&d.subset())).collect();
        let manifest = Manifest {
            config_hash: self.hash(),
            seed: self.cfg.seed,
            subsets: used.iter().map(|d| d.subset()).collect(),
            n_samples: samples.len(),
            instances: used.iter().map(|d| (d.subset(), d.split.train_instances.iter().copied().collect())).collect(),
            initial_loss: report.initial_loss,
        };
        write(&self.out().join("train_manifest.json"), pretty(&manifest))?;
        self.stamp("train")?;
        Ok(Outcome::Ok)
    }

    fn eval(&self) -> Result<Outcome> {
        let params = self.load_params()?;
        let bench = self.load(&self.eval_subsets())?;
        let sets = eval_sets(&bench, &params.encoder)?;
        let report = evaluate(&params, &sets, self.cfg.eval.beta_source, self.cfg.eval.view, &self.hash(), self.cfg.seed)?;
        write(&self.out().join("metrics.json"), report.to_json() + "\n")?;
        self.write_table("metrics.csv", &metrics_table(&report))?;
        self.stamp("eval")?;
        Ok(Outcome::Ok)
    }

    fn ablate(&self, kind: AblationKind) -> Result<Outcome> {
        let bench = self.load(&self.eval_subsets())?;
        let hash = self.hash();
        let seed = self.cfg.eval_seed();
        let name = match kind {
            AblationKind::Beta => {
                let params = self.load_params()?;
                let sets = eval_sets(&bench, &params.encoder)?;
                let d_k = params.config.fusion.d_k;
                let rows = beta_sweep(&params, &sets, &beta_grid(&self.cfg.eval.beta_multipliers, d_k), &hash, seed)?;
                self.write_table("ablate_beta.csv", &SweepRow::table(&rows, d_k))?;
                "ablate_beta"
            }
            AblationKind::Robustness => {
                let params = self.load_params()?;
                let sets = eval_sets(&bench, &params.encoder)?;
                let rows = robustness_eval(&params, &sets, &self.cfg.eval.perturbations, &hash, seed)?;
                self.write_table("ablate_robustness.csv", &RobustnessRow::table(&rows))?;
                "ablate_robustness"
            }
            AblationKind::Caam => {
                let encoder = self.cfg.encoder()?;
                let samples = training_samples(&bench, &encoder, &self.cfg.train_subsets()?)?;
                let sets = eval_sets(&bench, &encoder)?;
                let tc = TrainConfig {
                    epochs: self.cfg.eval.ablation.epochs,
                    ..self.cfg.train.clone()
                };
                let variants = self.cfg.eval.ablation.variants();
                let rows = caam_ablation(&self.cfg.model, &tc, &encoder, &samples, &sets, &variants, &hash, self.cfg.model_seed())?;
                self.write_table("ablate_caam.csv", &AblationRow::table(&rows))?;
                "ablate_caam"
            }
            AblationKind::Roicrop => {
                let params = self.load_params()?;
                let encoder = params.encoder.clone();
                let samples = training_samples(&bench, &encoder, &self.cfg.train_subsets()?)?;
                let sets = eval_sets(&bench, &encoder)?;
                let full = evaluate(&params, &sets, BetaSource::Adaptive, QueryView::Full, &hash, seed)?;
                let (_, crop) = roi_crop_baseline(&params.config, &self.cfg.train, &encoder, &samples, &sets, &hash, self.cfg.model_seed())?;
                self.write_table("ablate_roicrop.csv", &comparison_table(&[("adaptive", &full), ("roi crop", &crop)]))?;
                "ablate_roicrop"
            }
        };
        self.stamp(name)?;
        Ok(Outcome::Ok)
    }

    fn gradcheck(&self) -> Result<Outcome> {
        let rows = run_gradcheck(&self.cfg.gradcheck)?;
        self.write_table("gradcheck.csv", &gradcheck_table(&rows))?;
        self.stamp("gradcheck")?;
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        if failed.is_empty() {
            Ok(Outcome::Ok)
        } else {
            Ok(Outcome::CheckFailed(format!(
                "{} parameter(s) over tolerance: {}",
                failed.len(),
                failed.join(", ")
            )))
        }
    }
}

/// Per-subset counts of a generated benchmark.
pub fn stats_table(bench: &Benchmark) -> Table {
    let mut t = Table::new(&[
        "subset",
        "categories",
        "instances",
        "images",
        "train_quadruples",
        "eval_quadruples",
        "train_instances",
        "eval_instances",
        "gallery",
        "distractors",
        "valid",
        "high",
        "centric",
        "count",
    ]);
    for d in &bench.subsets {
        let c = &d.world.config;
        let th = c.thresholds;
        let distractors = d.gallery.entries.iter().filter(|e| !e.is_target).count();
        t.push(vec![
            d.subset().to_string(),
            c.n_categories.to_string(),
            d.world.instances.iter().filter(|i| !i.reserve).count().to_string(),
            d.world.images.len().to_string(),
            d.split.train.len().to_string(),
            d.split.eval.len().to_string(),
            d.split.train_instances.len().to_string(),
            d.split.eval_instances.len().to_string(),
            d.gallery.entries.len().to_string(),
            distractors.to_string(),
            th.valid.to_string(),
            th.high.to_string(),
            th.centric.to_string(),
            th.count.to_string(),
        ]);
    }
    t
}

pub fn metrics_table(r: &MetricsReport) -> Table {
    let mut t = Table::new(&["subset", "queries", "gallery", "rid_at_1", "r_at_1", "r_at_5", "mean_beta"]);
    let f = |v: f64| format!("{v:.4}");
    for s in &r.subsets {
        t.push(vec![
            s.subset.to_string(),
            s.n_queries.to_string(),
            s.gallery_size.to_string(),
            f(s.recalls.rid_at_1),
            f(s.recalls.r_at_1),
            f(s.recalls.r_at_5),
            s.mean_beta.map(f).unwrap_or_default(),
        ]);
    }
    let m = r.macro_average;
    t.push(vec![
        "macro".into(),
        String::new(),
        String::new(),
        f(m.rid_at_1),
        f(m.r_at_1),
        f(m.r_at_5),
        String::new(),
    ]);
    t
}

pub fn gradcheck_table(rows: &[GradCheckRow]) -> Table {
    let mut t = Table::new(&["parameter", "group", "len", "max_rel_error", "passed"]);
    for r in rows {
        let group = match r.group {
            crate::params::ParamGroup::Caam => "caam",
            crate::params::ParamGroup::Encoder => "encoder",
        };
        t.push(vec![
            r.name.clone(),
            group.into(),
            r.len.to_string(),
            format!("{:.3e}", r.max_rel_error),
            r.passed.to_string(),
        ]);
    }
    t
}
