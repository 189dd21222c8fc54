mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvgmn::bench::{run_scaling_bench, to_csv, BenchConfig};
use mvgmn::checkpoint;
use mvgmn::data::{generate_synthetic, load_dataset, Dataset, Manifest, Protocol, Sample};
use mvgmn::fusion::FusionMode;
use mvgmn::model::{Aggregator, Model, ModelConfig};
use mvgmn::train::{configure_threads, evaluate, train_loop, TrainConfig};
use mvgmn::{Error, Result};
use serde_json::json;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "mvgmn",
    version,
    about = "Multi-view graph state-space network for action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory for the manifest and feature files.
        #[arg(long)]
        out: PathBuf,
        /// Number of action classes.
        #[arg(long)]
        classes: Option<usize>,
        /// Samples generated per class.
        #[arg(long)]
        samples_per_class: Option<usize>,
        /// Gaussian noise standard deviation.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train a model and write a checkpoint plus the per-epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (or its manifest.json).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on a protocol's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every fusion and/or aggregator variant and tabulate them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Ladder::All)]
        ladder: Ladder,
    },
    /// Forward-time scaling sweep over sequence lengths.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sequence lengths L = V*T.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Comma-separated aggregator names.
        #[arg(long, value_delimiter = ',')]
        aggregators: Option<Vec<String>>,
        /// Minimum timed runs per point.
        #[arg(long)]
        repeats: Option<usize>,
        /// Model width.
        #[arg(long)]
        width: Option<usize>,
    },
    /// Dump the graph edges one GCN block uses for one sample.
    InspectGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Use trained weights instead of a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: usize,
        /// GCN block index, counted from 0.
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ladder {
    Aggregator,
    Fusion,
    All,
}

#[derive(Args, Default)]
struct Common {
    /// JSON config file with flat dotted keys, e.g. {"model.knn_k": 3}.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    aggregator: Option<String>,
    #[arg(long)]
    scan_mode: Option<String>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    /// Layers for [`RunConfig::resolve`]; `seed_key` receives `--seed`.
    fn layers(&self, seed_key: &str) -> Result<Vec<Overrides>> {
        let file = match &self.config {
            Some(path) => Overrides::from_file(path)?,
            None => Overrides::default(),
        };
        let mut flags = Overrides::default();
        if let Some(s) = self.seed {
            flags.set(seed_key, s);
        }
        if let Some(p) = &self.protocol {
            flags.set("train.protocol", p.parse::<Protocol>()?.name());
        }
        if let Some(a) = &self.aggregator {
            flags.set("model.aggregator", a.parse::<Aggregator>()?.name());
        }
        if let Some(m) = &self.scan_mode {
            flags.set("model.scan_mode", m.parse::<mvgmn::scan::ScanMode>()?.name());
        }
        if let Some(f) = &self.fusion {
            flags.set("model.fusion_mode", f.parse::<FusionMode>()?.name());
        }
        if let Some(n) = self.blocks {
            flags.set("model.n_blocks", n);
        }
        if let Some(k) = self.knn_k {
            flags.set("model.knn_k", k);
        }
        if let Some(b) = self.batch {
            flags.set("train.batch_size", b);
        }
        if let Some(e) = self.epochs {
            flags.set("train.max_epochs", e);
        }
        Ok(vec![file, flags])
    }

    fn resolve(&self, seed_key: &str) -> Result<RunConfig> {
        RunConfig::resolve(&self.layers(seed_key)?)
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn load(data: &Path) -> Result<(Manifest, Dataset)> {
    let path = manifest_path(data);
    if !path.exists() {
        return Err(Error::Input(format!("no dataset manifest at {}", path.display())));
    }
    load_dataset(&path)
}

fn splits(data: &Dataset, protocol: Protocol) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let split = data.split(protocol)?;
    Ok((
        data.subset(&split.train, None)?,
        data.subset(&split.test, split.masked_view)?,
    ))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn train_one(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    train: &[Sample],
    test: &[Sample],
    on_epoch: impl FnMut(&mvgmn::train::EpochRecord),
) -> Result<(Model, mvgmn::train::TrainLog)> {
    let mut model = Model::new(model_cfg, train_cfg.seed)?;
    let log = train_loop(&mut model, train, test, train_cfg, on_epoch)?;
    Ok((model, log))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            common,
            out,
            classes,
            samples_per_class,
            sigma,
        } => {
            let mut layers = common.layers("data.seed")?;
            let mut extra = Overrides::default();
            if let Some(c) = classes {
                extra.set("data.n_classes", c);
            }
            if let Some(n) = samples_per_class {
                extra.set("data.samples_per_class", n);
            }
            if let Some(s) = sigma {
                extra.set("data.noise_sigma", s);
            }
            layers.push(extra);
            let cfg = RunConfig::resolve(&layers)?;
            fs::create_dir_all(&out)?;
            let manifest = generate_synthetic(&cfg.data, &out)?;
            println!(
                "{}",
                json!({"samples": manifest.samples.len(), "manifest": out.join("manifest.json"), "spec": cfg.data})
            );
        }
        Command::Train { common, data, out } => {
            let cfg = common.resolve("train.seed")?;
            let (manifest, dataset) = load(&data)?;
            let model_cfg = cfg.model_for(&manifest.spec)?;
            let (train, test) = splits(&dataset, cfg.train.protocol)?;
            fs::create_dir_all(&out)?;
            let probe = Model::new(model_cfg.clone(), cfg.train.seed)?;
            println!("parameters: {}", probe.count_parameters());
            drop(probe);
            let (model, log) = train_one(model_cfg, &cfg.train, &train, &test, |rec| {
                println!("{}", serde_json::to_string(rec).expect("plain record"));
            })?;
            write(&out.join("train_log.jsonl"), log.to_jsonl())?;
            checkpoint::save(&model, &out.join("checkpoint.mvgc"))?;
            let summary = json!({
                "parameters": model.count_parameters(),
                "top1": log.final_top1(),
                "protocol": cfg.train.protocol,
                "model": model.config(),
                "train": cfg.train,
            });
            write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        }
        Command::Eval {
            common,
            data,
            checkpoint: ckpt,
            out,
        } => {
            let cfg = common.resolve("train.seed")?;
            let model = checkpoint::load(&ckpt)?;
            let (_, dataset) = load(&data)?;
            if dataset.views != model.config().views || dataset.steps != model.config().steps {
                return Err(Error::Input("checkpoint and dataset disagree on views or steps".into()));
            }
            let (_, test) = splits(&dataset, cfg.train.protocol)?;
            let top1 = evaluate(&model, &test)?;
            let result = json!({"top1": top1, "n": test.len(), "protocol": cfg.train.protocol});
            println!("{result}");
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                write(&out.join("eval.json"), serde_json::to_string_pretty(&result)?)?;
            }
        }
        Command::Ablate {
            common,
            data,
            out,
            ladder,
        } => {
            let cfg = common.resolve("train.seed")?;
            let (manifest, dataset) = load(&data)?;
            let base = cfg.model_for(&manifest.spec)?;
            let (train, test) = splits(&dataset, cfg.train.protocol)?;
            let mut variants: Vec<(&str, ModelConfig)> = Vec::new();
            if matches!(ladder, Ladder::Aggregator | Ladder::All) {
                for a in Aggregator::ALL {
                    variants.push((
                        "aggregator",
                        ModelConfig {
                            aggregator: a,
                            ..base.clone()
                        },
                    ));
                }
            }
            if matches!(ladder, Ladder::Fusion | Ladder::All) {
                for f in FusionMode::ALL {
                    variants.push((
                        "fusion",
                        ModelConfig {
                            fusion_mode: f,
                            ..base.clone()
                        },
                    ));
                }
            }
            fs::create_dir_all(&out)?;
            let mut rows = Vec::new();
            let mut csv = String::from("ladder,variant,params,top1\n");
            println!("{:<10} {:<16} {:>10} {:>7}", "ladder", "variant", "params", "top1");
            for (kind, model_cfg) in variants {
                let variant = match kind {
                    "aggregator" => model_cfg.aggregator.name(),
                    _ => model_cfg.fusion_mode.name(),
                };
                let (model, log) = train_one(model_cfg.clone(), &cfg.train, &train, &test, |_| {})?;
                let top1 = match log.final_top1() {
                    Some(t) => t,
                    None => evaluate(&model, &test)?,
                };
                let params = model.count_parameters();
                println!("{kind:<10} {variant:<16} {params:>10} {top1:>7.4}");
                csv.push_str(&format!("{kind},{variant},{params},{top1}\n"));
                rows.push(json!({"ladder": kind, "variant": variant, "params": params, "top1": top1}));
            }
            write(&out.join("ablation.csv"), csv)?;
            write(
                &out.join("ablation.json"),
                serde_json::to_string_pretty(&json!({"rows": rows, "train": cfg.train}))?,
            )?;
        }
        Command::Bench {
            common,
            out,
            lengths,
            aggregators,
            repeats,
            width,
        } => {
            let mut bench = BenchConfig::default();
            if let Some(seed) = common.seed {
                bench.seed = seed;
            }
            if let Some(l) = lengths {
                bench.lengths = l;
            }
            if let Some(a) = aggregators {
                bench.aggregators = a.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            } else if let Some(a) = &common.aggregator {
                bench.aggregators = vec![a.parse()?];
            }
            if let Some(r) = repeats {
                bench.repeats = r;
            }
            if let Some(w) = width {
                bench.d_model = w;
            }
            if let Some(b) = common.blocks {
                bench.n_blocks = b;
            }
            if bench.lengths.is_empty() || bench.aggregators.is_empty() {
                return Err(Error::Config(
                    "bench needs at least one length and one aggregator".into(),
                ));
            }
            bench.min_total = bench.min_total.max(Duration::from_millis(1));
            fs::create_dir_all(&out)?;
            println!("aggregator,L,median_ns,repeats");
            let summary = run_scaling_bench(&bench, |r| {
                println!("{},{},{},{}", r.aggregator, r.l, r.median_ns, r.repeats);
            })?;
            write(&out.join("bench.csv"), to_csv(&summary.records))?;
            write(&out.join("bench.json"), serde_json::to_string_pretty(&summary)?)?;
            for (name, fit) in &summary.fits {
                eprintln!("{name}: slope {:.3}, R^2 {:.4}", fit.slope, fit.r2);
            }
        }
        Command::InspectGraph {
            common,
            data,
            checkpoint: ckpt,
            sample,
            block,
            out,
        } => {
            let cfg = common.resolve("train.seed")?;
            let (manifest, dataset) = load(&data)?;
            let model = match ckpt {
                Some(path) => checkpoint::load(&path)?,
                None => Model::new(cfg.model_for(&manifest.spec)?, cfg.train.seed)?,
            };
            let s = dataset
                .samples
                .iter()
                .find(|s| s.id == sample)
                .ok_or_else(|| Error::Input(format!("no sample with id {sample}")))?;
            let graphs = model.block_graphs(&s.views)?;
            let n = graphs.len();
            let g = graphs
                .into_iter()
                .nth(block)
                .ok_or_else(|| Error::Input(format!("block {block} out of range; the model has {n} GCN blocks")))?;
            let text = serde_json::to_string(&g)?;
            println!("{text}");
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                write(&out.join(format!("graph_{sample}_{block}.json")), text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
