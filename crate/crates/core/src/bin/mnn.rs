use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mnn_core::exec::Execution;
use mnn_core::harness::{
    emit_report, evaluate_checkpoint, generate_dataset, raw_input_knn, sweep, train_with, AugmentPair, Axis,
    Checkpoint, Method, RunConfig, RunManifest,
};
use mnn_core::objective::{Granularity, MixPolicy};

#[derive(Parser)]
#[command(name = "mnn", version, about = "Mixed nearest-neighbor self-supervised learning on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it as JSON.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run; writes metrics.csv, manifest.json, plots.svg and checkpoint.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Re-evaluate a checkpoint; optionally append the result to a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train every value of one axis for several seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// k | support_size | augmentation | strategy | lambda | weight_scheme
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write metrics.csv, manifests and plots.svg for existing manifests.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run settings. A `--config` JSON file overrides the defaults and flags
/// override the file.
#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    support: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Teacher EMA coefficient.
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// off | uniform | a fixed value in [0, 1]
    #[arg(long)]
    mix: Option<String>,
    /// Draw λ per neighbor instead of per batch.
    #[arg(long)]
    per_neighbor_lambda: bool,
    /// Student/teacher augmentation strengths, e.g. s/w.
    #[arg(long)]
    augment: Option<String>,
    /// Use only the forward view direction.
    #[arg(long)]
    asymmetric: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    k_eval: Option<usize>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    skip_probe: bool,
    /// Disable data-parallel execution.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.method => c.method);
        set!(self.k => c.k);
        set!(self.support => c.support_capacity);
        set!(self.batch => c.batch_size);
        set!(self.epochs => c.epochs);
        set!(self.warmup => c.warmup_epochs);
        set!(self.momentum => c.momentum);
        set!(self.lr => c.base_lr);
        set!(self.weight_decay => c.weight_decay);
        set!(self.seed => c.seed);
        set!(self.data_seed => c.dataset.seed);
        set!(self.n_train => c.dataset.n_train);
        set!(self.n_test => c.dataset.n_test);
        set!(self.spread => c.dataset.cluster_spread);
        set!(self.separation => c.dataset.class_separation);
        set!(self.latent_dim => c.dataset.latent_dim);
        set!(self.k_eval => c.eval.k_eval);
        set!(self.probe_epochs => c.eval.probe.epochs);
        if let Some(m) = &self.mix {
            c.mix = match m.as_str() {
                "off" => MixPolicy::OFF,
                "uniform" => MixPolicy::uniform(),
                v => MixPolicy::fixed(v.parse().with_context(|| format!("--mix {v:?}"))?),
            };
        }
        if self.per_neighbor_lambda {
            c.mix.granularity = Granularity::PerNeighbor;
        }
        if let Some(a) = &self.augment {
            c.augment = AugmentPair::parse(a)?;
        }
        if self.asymmetric {
            c.symmetric_loss = false;
        }
        if self.skip_probe {
            c.eval.skip_probe = true;
        }
        if self.sequential {
            c.execution = Execution::Sequential;
        }
        c.validate()?;
        Ok(c)
    }
}

fn write_train_outputs(out: &Path, manifest: &RunManifest, ckpt: &Checkpoint) -> Result<()> {
    let files = emit_report(std::slice::from_ref(manifest), out)?;
    ckpt.save(&out.join("checkpoint.json"))?;
    for f in files.all() {
        println!("wrote {}", f.display());
    }
    println!("wrote {}", out.join("checkpoint.json").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { run, out } => {
            let c = run.resolve()?;
            let data = generate_dataset(&c.dataset)?;
            let raw = raw_input_knn(&data, c.eval.k_eval, c.execution)?;
            fs::write(&out, serde_json::to_vec(&data)?)?;
            println!("wrote {} ({} train, {} test); raw-input knn accuracy {raw:.4}", out.display(), data.train.len(), data.test.len());
        }
        Command::Train { run, out, quiet } => {
            let mut c = run.resolve()?;
            c.output_dir = Some(out.clone());
            let data = generate_dataset(&c.dataset)?;
            let outcome = train_with(&c, data, |m| {
                if !quiet {
                    eprintln!(
                        "epoch {:>3}  loss {:.5}  lr {:.5}  purity {}",
                        m.epoch,
                        m.loss_mean,
                        m.lr,
                        m.purity.map_or("-".to_string(), |p| format!("{p:.4}"))
                    );
                }
            })?;
            let m = &outcome.manifest;
            println!(
                "{}: knn {:.4}  probe {}  (untrained knn {:.4}, raw-input knn {:.4})",
                m.run_id,
                m.final_eval.knn_acc,
                m.final_eval.probe_acc.map_or("-".to_string(), |p| format!("{p:.4}")),
                m.baseline.knn_acc,
                m.raw_input_knn
            );
            write_train_outputs(&out, m, &outcome.trainer.checkpoint())?;
        }
        Command::Evaluate { checkpoint, manifest } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let report = evaluate_checkpoint(&ckpt)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(p) = manifest {
                let mut m = RunManifest::load(&p)?;
                m.evaluations.push(report);
                m.save(&p)?;
            }
        }
        Command::Sweep { run, axis, values, seeds, out } => {
            let base = run.resolve()?;
            let axis: Axis = axis.parse()?;
            let result = sweep(axis, &values, &base, &seeds, Some(&out))?;
            for (v, knn) in result.means(|p| Some(p.knn_acc)) {
                println!("{axis}={v}: mean knn {:.4}", knn.unwrap_or(f64::NAN));
            }
            println!("wrote {}", out.join("comparison.csv").display());
        }
        Command::Report { manifests, out } => {
            if manifests.is_empty() {
                bail!("no manifests given");
            }
            let ms = manifests
                .iter()
                .map(|p| RunManifest::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            for f in emit_report(&ms, &out)?.all() {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
