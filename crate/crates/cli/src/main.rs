use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use terrameta::control;
use terrameta::costnet::{self, ModelParams};
use terrameta::harness::{self, Dataset, ExperimentConfig, LossPoint, Manifest};
use terrameta::meta;
use terrameta::terrain::{self, TerrainField};
use terrameta::vehicle;

#[derive(Parser)]
#[command(name = "terrameta", version, about = "Traversability learning experiments on synthetic terrain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset directory from `collect`; collected in-process when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every terrain of the roster.
    GenTerrain(Common),
    /// Drive the collection policy and write the dataset.
    Collect(Common),
    /// Meta-train the global model.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train the pooled-SGD baseline.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Zero-shot and adapted metrics on the held-out environments.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint as NAME=PATH (or PATH); repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
    },
    /// One closed-loop navigation run.
    Navigate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Roster environment to drive in; first held-out one by default.
        #[arg(long)]
        world: Option<String>,
        #[arg(long, value_enum, default_value = "on")]
        adapt: Switch,
    },
    /// Navigation sweep over models, held-out worlds and bench seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint as NAME=PATH (or PATH); repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
    },
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn start(command: &str, common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.master_seed = s;
        }
        cfg.validate()?;
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let mut manifest = Manifest::new(command, &cfg);
        if let Some(p) = &common.config {
            manifest.add_input("config", p)?;
        }
        Ok(Run {
            cfg,
            out: common.out.clone(),
            manifest,
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.add_output(name, &path)?;
        Ok(())
    }

    fn save_model(&mut self, name: &str, p: &ModelParams) -> Result<()> {
        let path = self.out.join(name);
        costnet::save_checkpoint(p, &path)?;
        self.manifest.add_output(name, &path)?;
        Ok(())
    }

    fn dataset(&mut self, data: &DataArg) -> Result<Dataset> {
        match &data.dataset {
            Some(dir) => {
                self.manifest.add_input("dataset", dir)?;
                Ok(Dataset::load(dir)?)
            }
            None => Ok(harness::collect(&self.cfg)?),
        }
    }

    fn model(&mut self, spec: &str) -> Result<(String, ModelParams)> {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
                (stem, p)
            }
        };
        self.manifest.add_input(&format!("model:{name}"), &path)?;
        let p = costnet::load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok((name, p))
    }

    fn finish(self) -> Result<()> {
        self.manifest.write(&self.out)?;
        Ok(())
    }
}

fn heldout_worlds(cfg: &ExperimentConfig) -> Result<Vec<(String, TerrainField)>> {
    cfg.environments
        .iter()
        .enumerate()
        .filter(|(_, e)| e.heldout)
        .map(|(i, e)| Ok((e.name.clone(), terrain::generate_terrain(&cfg.effective_spec(i))?)))
        .collect()
}

fn terrain_stats(name: &str, field: &TerrainField) -> String {
    let h = field.heights();
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let std = (h.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    format!("{name},{},{},{mean},{std},{lo},{hi}\n", field.n(), field.resolution_m())
}

fn baseline_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("iter,pooled_nll\n");
    for p in curve {
        let _ = writeln!(out, "{},{}", p.iter, p.pooled_nll);
    }
    out
}

fn gen_terrain(common: &Common) -> Result<()> {
    let mut run = Run::start("gen-terrain", common)?;
    let worlds = harness::build_worlds(&run.cfg)?;
    let mut stats = String::from("env,nodes_per_side,resolution_m,mean_z,std_z,min_z,max_z\n");
    for (e, field) in run.cfg.environments.clone().iter().zip(&worlds) {
        run.write(&format!("{}.terrain", e.name), field.to_text())?;
        stats.push_str(&terrain_stats(&e.name, field));
    }
    run.write("terrain.csv", stats)?;
    run.finish()
}

fn collect(common: &Common) -> Result<()> {
    let mut run = Run::start("collect", common)?;
    let ds = harness::collect(&run.cfg)?;
    let dir = run.out.join("dataset");
    ds.save(&dir)?;
    run.manifest.add_output("dataset", &dir)?;
    let mut summary = String::from("env,heldout,episodes,scans,samples\n");
    for e in &ds.envs {
        let scans: usize = e.episodes.iter().map(|ep| ep.scans.len()).sum();
        let _ = writeln!(summary, "{},{},{},{scans},{}", e.name, e.heldout, e.episodes.len(), e.sample_count());
    }
    run.write("collect.csv", summary)?;
    run.finish()
}

fn meta_train(common: &Common, data: &DataArg) -> Result<()> {
    let mut run = Run::start("meta-train", common)?;
    let ds = run.dataset(data)?;
    let (model, curve) = harness::meta_train_dataset(&run.cfg, &ds)?;
    run.save_model("meta.ckpt", &model)?;
    run.write("meta_curve.csv", meta::curve_csv(&curve))?;
    run.finish()
}

fn train_baseline(common: &Common, data: &DataArg) -> Result<()> {
    let mut run = Run::start("train-baseline", common)?;
    let ds = run.dataset(data)?;
    let (model, curve) = harness::train_baseline(&ds, &run.cfg.arch, &run.cfg.baseline, run.cfg.init_seed())?;
    run.save_model("baseline.ckpt", &model)?;
    run.write("baseline_curve.csv", baseline_curve_csv(&curve))?;
    run.finish()
}

fn evaluate(common: &Common, data: &DataArg, models: &[String]) -> Result<()> {
    let mut run = Run::start("evaluate", common)?;
    let ds = run.dataset(data)?;
    let (_, held) = harness::tasks(&ds, run.cfg.split_fraction);
    let mut reports = Vec::new();
    for spec in models {
        let (name, p) = run.model(spec)?;
        reports.push((name, harness::evaluate(&p, &held, &run.cfg.meta)?));
    }
    run.write("eval.csv", harness::eval_csv(&reports))?;
    run.write("eval.json", serde_json::to_string_pretty(&reports)? + "\n")?;
    run.finish()
}

fn navigate(common: &Common, model: &Path, world: Option<&str>, adapt: Switch) -> Result<()> {
    let mut run = Run::start("navigate", common)?;
    let (_, p) = run.model(&model.to_string_lossy())?;
    let cfg = &run.cfg;
    let index = match world {
        Some(w) => cfg.environments.iter().position(|e| e.name == w),
        None => cfg.environments.iter().position(|e| e.heldout),
    };
    let Some(index) = index else {
        bail!("no environment named {:?} in the roster", world.unwrap_or("<held-out>"));
    };
    let field = terrain::generate_terrain(&cfg.effective_spec(index))?;
    let (start, goal) = harness::route(&field, cfg.bench.route_length_m, cfg.master_seed);
    let ep = control::navigate(&field, &p, &cfg.nav, start, goal, matches!(adapt, Switch::On), cfg.master_seed)?;
    run.write("report.json", ep.report.to_json() + "\n")?;
    run.write("path.log", vehicle::episode_log(&ep.path.states, ep.path.dt))?;
    run.finish()
}

fn bench(common: &Common, models: &[String]) -> Result<()> {
    let mut run = Run::start("bench", common)?;
    let models = models.iter().map(|m| run.model(m)).collect::<Result<Vec<_>>>()?;
    let worlds = heldout_worlds(&run.cfg)?;
    let rows = harness::bench_navigation(
        &run.cfg.nav,
        run.cfg.bench.route_length_m,
        &models,
        &worlds,
        &run.cfg.bench.seeds,
    );
    run.write("bench.csv", harness::bench_csv(&rows))?;
    run.write("bench_summary.csv", harness::bench_summary_csv(&rows))?;
    run.finish()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenTerrain(c) => gen_terrain(&c),
        Command::Collect(c) => collect(&c),
        Command::MetaTrain { common, data } => meta_train(&common, &data),
        Command::TrainBaseline { common, data } => train_baseline(&common, &data),
        Command::Evaluate { common, data, models } => evaluate(&common, &data, &models),
        Command::Navigate {
            common,
            model,
            world,
            adapt,
        } => navigate(&common, &model, world.as_deref(), adapt),
        Command::Bench { common, models } => bench(&common, &models),
    }
}
