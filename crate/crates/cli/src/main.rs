use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nd_cli::experiments;
use nd_cli::workbench::{generate, Dataset, GenerateArgs, Workbench};
use nd_core::dataset::Split;
use nd_core::mesh::io::read_mesh;
use nd_core::mesh::{MeshSpec, PrimitiveKind};
use nd_core::scenario::{default_scheme_library, load_scheme_library};
use nd_serve::{MeshEntry, Registry, Service, ServiceConfig};
use nd_surrogate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use nd_surrogate::eval::{mse_band, mean_std};
use nd_surrogate::experiment::{
    evaluate, experiment_tf_vs_stf, experiment_window_sweep, CachedRunner, DirectRunner, Runner,
};
use nd_surrogate::model::ModelConfig;
use nd_surrogate::train::{autoregressive_finetune, TrainConfig};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "ndsim", version, about = "Soft-tissue simulation data, surrogate training and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Box,
    Ellipsoid,
    Hemisphere,
}

#[derive(Args)]
struct MeshArgs {
    /// Existing mesh file with sidecar; the procedural spec is used otherwise.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hemisphere")]
    kind: Kind,
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    /// Bounding box size (mm).
    #[arg(long, num_args = 3, default_values_t = [120.0, 100.0, 60.0])]
    extent: Vec<f64>,
}

impl MeshArgs {
    fn spec(&self) -> MeshSpec {
        let kind = match self.kind {
            Kind::Box => PrimitiveKind::Box,
            Kind::Ellipsoid => PrimitiveKind::Ellipsoid,
            Kind::Hemisphere => PrimitiveKind::HemisphereWithFissure,
        };
        MeshSpec::new(kind, self.resolution, [self.extent[0], self.extent[1], self.extent[2]])
    }

    fn workbench(&self) -> Result<Workbench> {
        match &self.mesh {
            Some(p) => Workbench::load(p),
            None => Workbench::from_spec(&self.spec()),
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// `experiment` (desk size, residual head), `desk`, `tiny`, `full` or
    /// a JSON model config file.
    #[arg(long, default_value = "experiment")]
    model: String,
    /// JSON training config; the experiment defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn model_config(&self) -> Result<ModelConfig> {
        Ok(match self.model.as_str() {
            "experiment" => experiments::model_config(),
            "desk" => ModelConfig::desk(),
            "tiny" => ModelConfig::tiny(),
            "full" => ModelConfig::full(),
            path => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {path}"))?)?,
        })
    }

    fn train_config(&self) -> Result<TrainConfig> {
        match &self.config {
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => Ok(experiments::train_config()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural tetrahedral mesh.
    GenMesh {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mesh: MeshArgs,
    },
    /// Simulate a dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mesh: MeshArgs,
        /// JSON scheme library; the built-in five otherwise.
        #[arg(long)]
        schemes: Option<PathBuf>,
        #[arg(long, default_value_t = experiments::DATA_PER_SCHEME)]
        per_scheme: usize,
        #[arg(long, default_value_t = experiments::DATA_SEED)]
        seed: u64,
        #[arg(long, default_value_t = experiments::DATA_TEST)]
        n_test: usize,
        #[arg(long, default_value_t = experiments::DATA_VAL)]
        n_val: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print the built-in scheme library as JSON.
    Schemes,
    /// Summarise a dataset directory.
    Inspect { data: PathBuf },
    /// Train a surrogate.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Fully autoregressive fine-tuning of a checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate checkpoints and run the comparison experiments.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve meshes and models over HTTP and WebSocket.
    Serve {
        /// Mesh files with sidecars; ids are the file stems.
        #[arg(long, required = true)]
        mesh: Vec<PathBuf>,
        /// Checkpoints; ids are the file stems.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Full rollouts of a checkpoint on the test split.
    Rollout {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Teacher-forced against stochastic teacher forcing at one window.
    TfVsStf {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// One run per rollout window.
    WindowSweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = experiments::SWEEP_WINDOWS)]
        windows: Vec<usize>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reuse runs stored here, keyed by data, initial model and config.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

impl ExperimentArgs {
    fn runner(&self, ds: &Dataset) -> Box<dyn Runner> {
        match &self.cache {
            Some(dir) => Box::new(CachedRunner {
                dir: dir.clone(),
                data_key: ds.key(),
            }),
            None => Box::new(DirectRunner {
                log_dir: Some(self.out.join("logs")),
            }),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenMesh { out, mesh } => {
            let bench = mesh.workbench()?;
            bench.save(&out)?;
            println!(
                "{}: {} vertices, {} tets, {} surface faces, {} domain faces, {} fixed nodes",
                out.display(),
                bench.mesh.n_vertices(),
                bench.mesh.tets.len(),
                bench.surface.n_faces(),
                bench.domain.len(),
                bench.fixed.len()
            );
        }
        Command::GenData {
            out,
            mesh,
            schemes,
            per_scheme,
            seed,
            n_test,
            n_val,
            workers,
        } => {
            let bench = mesh.workbench()?;
            let schemes = match schemes {
                Some(p) => load_scheme_library(&p)?,
                None => default_scheme_library(),
            };
            let args = GenerateArgs {
                n_per_scheme: per_scheme,
                master_seed: seed,
                n_test,
                n_val,
                workers,
            };
            let m = generate(&bench, &schemes, &args, &out)?;
            println!("{} trajectories written, {} excluded", m.entries.len(), m.excluded.len());
        }
        Command::Schemes => println!("{}", serde_json::to_string_pretty(&default_scheme_library())?),
        Command::Inspect { data } => {
            let ds = Dataset::load(&data)?;
            let m = &ds.manifest;
            let count = |s| m.entries_in(s).count();
            let max_disp = ds
                .train
                .iter()
                .chain(&ds.validation)
                .chain(&ds.test)
                .map(|t| t.max_displacement())
                .fold(0.0f32, f32::max);
            let summary = serde_json::json!({
                "n_nodes": m.n_nodes,
                "snapshot_interval_s": m.dt,
                "snapshots_per_trajectory": m.entries.first().map(|e| e.n_steps),
                "train": count(Split::Train),
                "validation": count(Split::Validation),
                "test": count(Split::Test),
                "excluded": m.excluded,
                "norm_stats": m.norm_stats,
                "coord_transform": m.coord_transform,
                "max_displacement_mm": max_disp,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { data, out, model } => {
            let ds = Dataset::load(&data)?;
            let init = experiments::initial_model(&ds, model.model_config()?)?;
            let cfg = model.train_config()?;
            fs::create_dir_all(&out)?;
            let mut runner = DirectRunner { log_dir: Some(out.clone()) };
            let res = runner.run("train", &init, &cfg, &ds.train_data(init.config.d_embed))?;
            let hash = save_checkpoint(&out.join("best.ndckpt"), &res.checkpoint)?;
            write_json(&out.join("run.json"), &res.record)?;
            println!(
                "best epoch {} validation MSE {:.5} checkpoint {}",
                res.record.best_epoch, res.record.best_eval_mse, hash
            );
        }
        Command::Finetune {
            data,
            checkpoint,
            out,
            epochs,
            config,
        } => {
            let ds = Dataset::load(&data)?;
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => experiments::train_config(),
            };
            fs::create_dir_all(&out)?;
            let mut log = fs::File::create(out.join("finetune_log.jsonl"))?;
            let d = ds.train_data(ck.model.config.d_embed);
            let res = autoregressive_finetune(ck.model, &d, &cfg, epochs, Some(&mut log))?;
            save_checkpoint(&out.join("best.ndckpt"), &res.best)?;
            println!("best validation MSE {:.5} at epoch {}", res.best_eval_mse, res.best_epoch);
        }
        Command::Eval(cmd) => eval(cmd)?,
        Command::Serve { mesh, model, addr, seed } => serve(&mesh, &model, &addr, seed)?,
    }
    Ok(())
}

fn stem(p: &Path) -> Result<String> {
    Ok(p.file_stem().context("path has no file name")?.to_string_lossy().into_owned())
}

fn eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Rollout {
            data,
            checkpoint,
            out,
            seed,
        } => {
            let ds = Dataset::load(&data)?;
            let ck: Checkpoint = load_checkpoint(&checkpoint)?;
            let d = ds.train_data(ck.model.config.d_embed);
            let reports = evaluate(&ck, &d, &experiments::test_set(&ds), seed)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("rollouts.json"), &reports)?;
            let band = mse_band(&reports);
            let mut csv = String::from("step,mse_mean,mse_min,mse_max\n");
            for i in 0..band.mean.len() {
                csv += &format!("{},{},{},{}\n", i + 1, band.mean[i], band.min[i], band.max[i]);
            }
            fs::write(out.join("mse_curve.csv"), csv)?;
            let summary = serde_json::json!({
                "mse": mean_std(reports.iter().map(|r| r.l_auto_mse)),
                "hausdorff_mm": mean_std(reports.iter().map(|r| r.l_auto_hausdorff)),
                "max_error_mm": mean_std(reports.iter().map(|r| r.l_auto_max)),
                "ms_per_step": mean_std(reports.iter().map(|r| r.ms_per_step)),
                "diverged": reports.iter().filter(|r| r.diverged).count(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        EvalCommand::TfVsStf { exp } => {
            let ds = Dataset::load(&exp.data)?;
            let init = experiments::initial_model(&ds, exp.model.model_config()?)?;
            let cfg = exp.model.train_config()?;
            fs::create_dir_all(&exp.out)?;
            let mut runner = exp.runner(&ds);
            let d = ds.train_data(init.config.d_embed);
            let report = experiment_tf_vs_stf(runner.as_mut(), &init, &cfg, &d, &experiments::test_set(&ds))?;
            write_json(&exp.out.join("tf_vs_stf.json"), &report)?;
            fs::write(exp.out.join("tf_vs_stf.csv"), report.to_csv())?;
            fs::write(exp.out.join("tf_vs_stf_curves.csv"), report.curves_csv())?;
            println!(
                "TF  MSE {:.4} ± {:.4}  max {:.3} mm\nSTF MSE {:.4} ± {:.4}  max {:.3} mm\nSTF better on {}/{} (MSE), {}/{} (MSE and max)",
                report.teacher_forced.mse.mean,
                report.teacher_forced.mse.std,
                report.teacher_forced.max_error.mean,
                report.stochastic.mse.mean,
                report.stochastic.mse.std,
                report.stochastic.max_error.mean,
                report.stf_better_mse,
                report.rows.len(),
                report.stf_better_both,
                report.rows.len()
            );
        }
        EvalCommand::WindowSweep { exp, windows } => {
            let ds = Dataset::load(&exp.data)?;
            let init = experiments::initial_model(&ds, exp.model.model_config()?)?;
            let cfg = exp.model.train_config()?;
            fs::create_dir_all(&exp.out)?;
            let mut runner = exp.runner(&ds);
            let d = ds.train_data(init.config.d_embed);
            let report = experiment_window_sweep(runner.as_mut(), &init, &cfg, &windows, &d, &experiments::test_set(&ds))?;
            write_json(&exp.out.join("window_sweep.json"), &report)?;
            fs::write(exp.out.join("window_sweep.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
            println!("best window {}", report.best_window);
        }
    }
    Ok(())
}

fn serve(meshes: &[PathBuf], models: &[PathBuf], addr: &str, seed: u64) -> Result<()> {
    let mut reg = Registry::default();
    for p in meshes {
        let (mesh, sidecar) = read_mesh(p)?;
        let Some(sidecar) = sidecar else {
            bail!("{} has no JSON sidecar", p.display())
        };
        reg.add_mesh(MeshEntry::new(stem(p)?, mesh, sidecar)?);
    }
    for p in models {
        let ck = load_checkpoint(p)?;
        reg.add_model(stem(p)?, ck.model, ck.meta);
    }
    let service = Arc::new(Service::new(reg, ServiceConfig { seed, ..Default::default() }));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        nd_serve::http::serve(service, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
