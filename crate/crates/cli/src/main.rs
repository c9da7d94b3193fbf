//! `mif`: simulate, preprocess, train, mesh and evaluate monotonic implicit
//! field reconstructions from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mif_core::ingest::{PoseFormat, ScanSet};
use mif_core::pipeline::{self, Checkpoint, Manifest, PipelineInput, RunConfig};
use mif_core::simlidar::{self, SceneDoc};
use mif_core::{par, MifError};

#[derive(Parser, Debug)]
#[command(name = "mif", version, about = "Monotonic implicit field mapping from LiDAR scans")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run config; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs fully sequential and bitwise reproducible, 0 = all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "mif_out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cast synthetic scans from a scene file (default: the built-in sphere room).
    Simulate {
        /// Scene JSON: primitives, sensor poses, scanner and bounds.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Crop, downsample and clean posed scans into a scan-set cache.
    Preprocess {
        /// Directory of .ply/.xyz/.bin scans, taken in file-name order.
        #[arg(long)]
        scans: PathBuf,
        /// One sensor-to-world pose per scan.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, value_enum, default_value_t = PoseFmt::Kitti)]
        pose_format: PoseFmt,
    },
    /// Fit the field to a scan-set cache.
    Train {
        /// Scan-set cache written by `preprocess`.
        #[arg(long)]
        scanset: PathBuf,
        /// Overrides train.iterations.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Extract the zero level-set of a checkpoint.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid spacing in metres; overrides mesh.spacing.
        #[arg(long)]
        spacing: Option<f64>,
        /// Also extract in cells far from any allocated octree leaf.
        #[arg(long)]
        no_mask: bool,
        #[arg(long, value_enum, default_value_t = MeshFmt::Ply)]
        format: MeshFmt,
    },
    /// Compare a predicted mesh against a reference mesh.
    Eval {
        /// Reconstructed mesh (.ply or .obj).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth mesh (.ply or .obj).
        #[arg(long)]
        gt: PathBuf,
    },
    /// simulate/preprocess/train/mesh/eval in one run directory.
    Pipeline {
        /// Simulate from this scene (default: the built-in sphere room).
        #[arg(long, conflicts_with = "scans")]
        scene: Option<PathBuf>,
        /// Start from real scans instead of a simulated scene.
        #[arg(long, requires = "poses")]
        scans: Option<PathBuf>,
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PoseFmt::Kitti)]
        pose_format: PoseFmt,
        /// Reference mesh for evaluation when running from scans.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Overrides train.iterations.
        #[arg(long)]
        iterations: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoseFmt {
    Kitti,
    Matrix4x4,
}

impl From<PoseFmt> for PoseFormat {
    fn from(f: PoseFmt) -> Self {
        match f {
            PoseFmt::Kitti => PoseFormat::Kitti3x4Rows,
            PoseFmt::Matrix4x4 => PoseFormat::Matrix4x4Blocks,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MeshFmt {
    Ply,
    Obj,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Mesh { .. } => "mesh",
            Command::Eval { .. } => "eval",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

fn run_config(g: &Global) -> mif_core::Result<RunConfig> {
    let cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match g.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_out(dir: &Path) -> mif_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MifError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn run(cli: &Cli) -> mif_core::Result<()> {
    let g = &cli.global;
    let threads = g.threads;
    let name = cli.command.name();
    match &cli.command {
        Command::Simulate { scene } => {
            let mut doc = match scene {
                Some(p) => SceneDoc::load(p)?,
                None => simlidar::sphere_room(),
            };
            if let Some(s) = g.seed {
                doc.scanner.seed = s;
            }
            let m = Manifest::new(name, &doc, doc.scanner.seed, threads)?;
            create_out(&g.out)?;
            m.save(&g.out)?;
            let sim = pipeline::cmd_simulate(&doc, &g.out, &m)?;
            print_json(&serde_json::json!({
                "command": name,
                "scans": sim.scan_dir,
                "poses": sim.poses,
                "reference": sim.reference,
                "config_hash": m.config_hash,
            }));
        }
        Command::Preprocess {
            scans,
            poses,
            pose_format,
        } => {
            let cfg = run_config(g)?;
            cfg.validate()?;
            let m = Manifest::new(name, &cfg, cfg.seed, threads)?;
            create_out(&g.out)?;
            m.save(&g.out)?;
            let out = g.out.join("scanset.mifss");
            let set = pipeline::cmd_preprocess(
                &pipeline::list_scans(scans)?,
                poses,
                (*pose_format).into(),
                &cfg.preprocess,
                &out,
                &m,
            )?;
            print_json(&serde_json::json!({
                "command": name,
                "scanset": out,
                "scans": set.scans.len(),
                "points": set.num_points(),
                "config_hash": m.config_hash,
            }));
        }
        Command::Train { scanset, iterations } => {
            let mut cfg = run_config(g)?;
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            cfg.validate()?;
            let m = Manifest::new(name, &cfg, cfg.seed, threads)?;
            create_out(&g.out)?;
            m.save(&g.out)?;
            let set = ScanSet::load(scanset)?;
            let t = pipeline::cmd_train(&set, &cfg, &g.out, &m)?;
            print_json(&serde_json::json!({
                "command": name,
                "checkpoint": g.out.join("checkpoint.mif"),
                "iterations": t.history.len(),
                "final_loss": t.history.last().map(|h| h.total),
                "config_hash": m.config_hash,
            }));
        }
        Command::Mesh {
            checkpoint,
            spacing,
            no_mask,
            format,
        } => {
            let mut cfg = run_config(g)?;
            if let Some(s) = spacing {
                cfg.mesh.spacing = *s;
            }
            if *no_mask {
                cfg.mesh.masked = false;
            }
            cfg.validate()?;
            let m = Manifest::new(name, &cfg.mesh, cfg.seed, threads)?;
            create_out(&g.out)?;
            m.save(&g.out)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let out = g.out.join(match format {
                MeshFmt::Ply => "mesh.ply",
                MeshFmt::Obj => "mesh.obj",
            });
            let mesh = pipeline::cmd_mesh(&ckpt, &cfg.mesh, &out, &m)?;
            print_json(&serde_json::json!({
                "command": name,
                "mesh": out,
                "vertices": mesh.vertices.len(),
                "triangles": mesh.triangles.len(),
                "config_hash": m.config_hash,
            }));
        }
        Command::Eval { pred, gt } => {
            let cfg = run_config(g)?;
            cfg.metrics.validate()?;
            let m = Manifest::new(name, &cfg.metrics, cfg.seed, threads)?;
            create_out(&g.out)?;
            m.save(&g.out)?;
            let r = pipeline::cmd_eval(pred, gt, &cfg.metrics, &g.out.join("metrics"), &m, &BTreeMap::new())?;
            print_json(&serde_json::json!({
                "command": name,
                "fscore": r.fscore,
                "accuracy": r.accuracy,
                "completion": r.completion,
                "chamfer_l1": r.chamfer_l1,
                "chamfer_l2": r.chamfer_l2,
                "config_hash": m.config_hash,
            }));
        }
        Command::Pipeline {
            scene,
            scans,
            poses,
            pose_format,
            reference,
            iterations,
        } => {
            let mut cfg = run_config(g)?;
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            let input = match (scans, poses) {
                (Some(dir), Some(p)) => PipelineInput::Scans {
                    dir: dir.clone(),
                    poses: p.clone(),
                    pose_format: (*pose_format).into(),
                    reference: reference.clone(),
                },
                _ => PipelineInput::Scene(Box::new(match scene {
                    Some(p) => SceneDoc::load(p)?,
                    None => simlidar::sphere_room(),
                })),
            };
            let value = pipeline::pipeline_config_value(&input, &cfg)?;
            let m = Manifest::new(name, &value, cfg.seed, threads)?;
            let s = pipeline::cmd_pipeline(&input, &cfg, &g.out, &m)?;
            print_json(&serde_json::json!({
                "command": name,
                "out": g.out,
                "final_loss": s.final_loss,
                "triangles": s.mesh_triangles,
                "fscore": s.metrics.as_ref().map(|r| r.fscore),
                "chamfer_l1": s.metrics.as_ref().map(|r| r.chamfer_l1),
                "holdout_monotone_fraction": s.holdout_monotone,
                "config_hash": m.config_hash,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIF_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.global.threads {
        1 => par::sequential(|| run(&cli)),
        n => {
            #[cfg(feature = "parallel")]
            if n > 1 {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            #[cfg(not(feature = "parallel"))]
            let _ = n;
            run(&cli)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "command": cli.command.name(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
