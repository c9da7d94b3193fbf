//! Run configuration, manifests, checkpoints and the batch commands
//! (simulate, preprocess, train, mesh, eval, pipeline).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::decoder::{DecoderConfig, DecoderParams, FieldModel};
use crate::error::{MifError, Result};
use crate::evalmetrics::{self, MetricParams, MetricsReport};
use crate::geometry::{Aabb, Point3};
use crate::ingest::{self, PoseFormat, PreprocessConfig, ScanFormat, ScanSet};
use crate::meshing::{self, Mesh, DEFAULT_CELL_BUDGET};
use crate::octree::LatentOctree;
use crate::sampler::{build_training_set, stream_seed, SampleConfig, TrainingSet};
use crate::simlidar::SceneDoc;
use crate::training::{self, HistoryRow, OptState, TrainConfig};

const INIT_STREAM: u64 = 0x696e_6974;
const HOLDOUT_STREAM: u64 = 0x686f_6c64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OctreeConfig {
    pub leaf_voxel: f64,
    pub num_levels: usize,
    pub dim: usize,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        OctreeConfig {
            leaf_voxel: 0.2,
            num_levels: 3,
            dim: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub spacing: f64,
    pub masked: bool,
    pub cell_budget: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            spacing: 0.10,
            masked: true,
            cell_budget: DEFAULT_CELL_BUDGET,
        }
    }
}

/// Everything a run needs apart from file paths. The top-level `seed`
/// overrides the per-stage seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub sample: SampleConfig,
    pub octree: OctreeConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub mesh: MeshConfig,
    pub metrics: MetricParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            preprocess: PreprocessConfig::default(),
            sample: SampleConfig::default(),
            octree: OctreeConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            mesh: MeshConfig::default(),
            metrics: MetricParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg.resolved())
    }

    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.seed = seed;
        self.sample.rng_seed = seed;
        self.train.seed = seed;
        self.metrics.seed = seed;
        self
    }

    pub fn resolved(self) -> RunConfig {
        let s = self.seed;
        self.with_seed(s)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        if !(p.min_range >= 0.0 && p.min_range < p.max_range) {
            return Err(MifError::InvalidRange {
                min: p.min_range,
                max: p.max_range,
            });
        }
        if !(p.voxel > 0.0) {
            return Err(MifError::InvalidVoxel(p.voxel));
        }
        if p.outlier_k == 0 || !(p.outlier_std > 0.0) {
            return Err(MifError::Config("outlier_k >= 1 and outlier_std > 0 required".into()));
        }
        self.sample.validate()?;
        let o = &self.octree;
        if !(o.leaf_voxel > 0.0) || o.num_levels == 0 || o.dim == 0 {
            return Err(MifError::Config("octree needs leaf_voxel > 0, num_levels >= 1, dim >= 1".into()));
        }
        self.decoder.validate()?;
        self.train.validate()?;
        if !(self.mesh.spacing > 0.0) || self.mesh.cell_budget == 0 {
            return Err(MifError::Config("mesh spacing and cell_budget must be > 0".into()));
        }
        self.metrics.validate()
    }
}

/// Hex SHA-256 of the JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, config: &T, seed: u64, threads: usize) -> Result<Manifest> {
        Ok(Manifest {
            tool: "mif".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config_hash(config)?,
            seed,
            threads,
            config: serde_json::to_value(config)?,
        })
    }

    pub fn tag(&self) -> String {
        format!("config_hash {}", self.config_hash)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| MifError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MifError::io(dir, e))
}

/// Trained model plus what is needed to resume or mesh it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub world_bounds: Aabb,
    pub model: FieldModel,
    pub opt: OptState,
}

impl Checkpoint {
    const MAGIC: &'static [u8] = b"MIFCKPT1";

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| MifError::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        w.tag(Self::MAGIC)?;
        w.bytes(&serde_json::to_vec(&self.manifest)?)?;
        w.f64s(&self.world_bounds.min.to_array())?;
        w.f64s(&self.world_bounds.max.to_array())?;
        self.model.tree.write_section(&mut w)?;
        self.model
            .decoder
            .write_section(&mut w, &self.model.posenc, self.model.alpha)?;
        self.opt.write_section(&mut w)?;
        w.into_inner()
            .into_inner()
            .map_err(|e| MifError::io(path, e.into_error()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| MifError::io(path, e))?;
        let mut r = Reader::new(bytes.as_slice());
        r.expect_tag(Self::MAGIC)?;
        let manifest: Manifest = serde_json::from_slice(&r.bytes(1 << 24)?)?;
        let lo = r.f64s(3)?;
        let hi = r.f64s(3)?;
        let world_bounds = Aabb::new(Point3::new(lo[0], lo[1], lo[2]), Point3::new(hi[0], hi[1], hi[2]))?;
        let tree = LatentOctree::read_section(&mut r)?;
        let (decoder, posenc, alpha) = DecoderParams::read_section(&mut r)?;
        let opt = OptState::read_section(&mut r)?;
        let model = FieldModel {
            decoder,
            tree,
            posenc,
            alpha,
        };
        model.check()?;
        if opt.latent.m.len() != model.tree.features().len() || opt.tensors.len() != model.decoder.tensors().len() {
            return Err(MifError::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Checkpoint {
            manifest,
            world_bounds,
            model,
            opt,
        })
    }
}

/// Scan files in `dir` with a recognised extension, sorted by name.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| MifError::io(dir, e))? {
        let p = entry.map_err(|e| MifError::io(dir, e))?.path();
        if p.is_file() && ScanFormat::from_path(&p).is_some() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(MifError::EmptyScanSet);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutput {
    pub scan_dir: PathBuf,
    pub poses: PathBuf,
    pub holdout_dir: Option<PathBuf>,
    pub holdout_poses: Option<PathBuf>,
    pub reference: PathBuf,
}

/// Scans go to `dir`, poses to `poses_path` (outside `dir`, where a `.txt`
/// would be mistaken for a scan).
fn write_scans(dir: &Path, poses_path: &Path, scans: &[ingest::Scan], comments: &[String]) -> Result<()> {
    create_dir(dir)?;
    for (i, s) in scans.iter().enumerate() {
        crate::ply::write_binary(&dir.join(format!("scan_{i:04}.ply")), &s.points, &[], comments)?;
    }
    let poses: Vec<_> = scans.iter().map(|s| s.pose).collect();
    ingest::save_poses_kitti(poses_path, &poses, comments)
}

/// Simulated scans (sensor frame, PLY), KITTI poses and the reference mesh.
pub fn cmd_simulate(doc: &SceneDoc, out: &Path, manifest: &Manifest) -> Result<SimulateOutput> {
    doc.validate()?;
    create_dir(out)?;
    let tag = vec![manifest.tag()];
    let scans = doc.simulate()?;
    let scan_dir = out.join("scans");
    let poses = out.join("poses.txt");
    write_scans(&scan_dir, &poses, &scans, &tag)?;
    let (holdout_dir, holdout_poses) = if doc.holdout_poses.is_empty() {
        (None, None)
    } else {
        let dir = out.join("holdout");
        let p = out.join("holdout_poses.txt");
        write_scans(&dir, &p, &doc.simulate_holdout()?, &tag)?;
        (Some(dir), Some(p))
    };
    let reference = out.join("reference.ply");
    doc.reference_mesh()?.save(&reference, &tag)?;
    doc.save(&out.join("scene.json"))?;
    log::info!("simulated {} scans, {} points", scans.len(), scans.iter().map(|s| s.points.len()).sum::<usize>());
    Ok(SimulateOutput {
        scan_dir,
        poses,
        holdout_dir,
        holdout_poses,
        reference,
    })
}

pub fn load_raw_scans(scan_paths: &[PathBuf]) -> Result<Vec<Vec<Point3>>> {
    scan_paths
        .iter()
        .map(|p| {
            let fmt = ScanFormat::from_path(p)
                .ok_or_else(|| MifError::format(p, 0, "unrecognised scan extension"))?;
            ingest::load_scan(p, fmt)
        })
        .collect()
}

pub fn preprocess_files(
    scan_paths: &[PathBuf],
    poses: &Path,
    pose_format: PoseFormat,
    cfg: &PreprocessConfig,
) -> Result<ScanSet> {
    let raw = load_raw_scans(scan_paths)?;
    let poses = ingest::load_poses(poses, pose_format)?;
    ingest::preprocess_scanset(&raw, &poses, cfg)
}

pub fn cmd_preprocess(
    scan_paths: &[PathBuf],
    poses: &Path,
    pose_format: PoseFormat,
    cfg: &PreprocessConfig,
    out_file: &Path,
    manifest: &Manifest,
) -> Result<ScanSet> {
    let set = preprocess_files(scan_paths, poses, pose_format, cfg)?;
    set.save_annotated(out_file, &manifest.tag())?;
    log::info!("preprocessed {} scans into {} points", set.scans.len(), set.num_points());
    Ok(set)
}

/// Octree over the near-surface samples and a freshly initialised decoder.
pub fn build_model(scanset: &ScanSet, tset: &TrainingSet, cfg: &RunConfig) -> Result<FieldModel> {
    let o = &cfg.octree;
    let tree = LatentOctree::build(&tset.near_surface_points(), o.leaf_voxel, o.num_levels, o.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, INIT_STREAM));
    FieldModel::new(tree, &scanset.world_bounds, &cfg.decoder, &mut rng)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Trains from scratch; writes `checkpoint.mif`, `losses.csv` and, when
/// enabled, periodic checkpoints under `checkpoints/`.
pub fn cmd_train(scanset: &ScanSet, cfg: &RunConfig, out: &Path, manifest: &Manifest) -> Result<TrainOutput> {
    cfg.validate()?;
    create_dir(out)?;
    let tset = build_training_set(scanset, &cfg.sample)?;
    let mut model = build_model(scanset, &tset, cfg)?;
    log::info!(
        "training on {} rays ({} samples), {} latent features, {} decoder params",
        tset.rays.len(),
        tset.num_samples(),
        model.tree.num_features(),
        model.decoder.num_params()
    );
    let mut opt = OptState::new(cfg.train.optimizer, &model);
    let ckpt_dir = out.join("checkpoints");
    let bounds = scanset.world_bounds;
    let history = training::train(&mut model, &tset, &cfg.train, &mut opt, |it, m, s| {
        create_dir(&ckpt_dir)?;
        Checkpoint {
            manifest: manifest.clone(),
            world_bounds: bounds,
            model: m.clone(),
            opt: s.clone(),
        }
        .save(&ckpt_dir.join(format!("ckpt_{it:07}.mif")))
    })?;
    training::write_history_csv(&out.join("losses.csv"), &history, Some(&manifest.tag()))?;
    let checkpoint = Checkpoint {
        manifest: manifest.clone(),
        world_bounds: bounds,
        model,
        opt,
    };
    checkpoint.save(&out.join("checkpoint.mif"))?;
    Ok(TrainOutput { checkpoint, history })
}

/// Zero level-set of the checkpoint's field over its world bounds.
pub fn extract_mesh(ckpt: &Checkpoint, cfg: &MeshConfig) -> Result<Mesh> {
    let bounds = ckpt.world_bounds.expanded(cfg.spacing);
    let grid = meshing::evaluate_grid_with_budget(&ckpt.model, &bounds, cfg.spacing, cfg.masked, cfg.cell_budget)?;
    Ok(meshing::marching_cubes(&grid, 0.0))
}

pub fn cmd_mesh(ckpt: &Checkpoint, cfg: &MeshConfig, out_file: &Path, manifest: &Manifest) -> Result<Mesh> {
    let mesh = extract_mesh(ckpt, cfg)?;
    mesh.validate()?;
    mesh.save(out_file, &[manifest.tag()])?;
    log::info!("mesh: {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    Ok(mesh)
}

/// Metrics between two mesh files, written as JSON and CSV next to `out_stem`.
pub fn cmd_eval(
    pred: &Path,
    gt: &Path,
    params: &MetricParams,
    out_stem: &Path,
    manifest: &Manifest,
    extra: &BTreeMap<String, f64>,
) -> Result<MetricsReport> {
    let p = Mesh::load(pred)?;
    let g = Mesh::load(gt)?;
    let report = evalmetrics::reconstruction_metrics(&p, &g, params)?;
    write_reports(out_stem, &report, manifest, extra)?;
    Ok(report)
}

fn write_reports(stem: &Path, report: &MetricsReport, manifest: &Manifest, extra: &BTreeMap<String, f64>) -> Result<()> {
    let mut json: BTreeMap<String, serde_json::Value> = extra
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::json!(v)))
        .collect();
    json.insert("config_hash".into(), manifest.config_hash.clone().into());
    evalmetrics::write_json(&stem.with_extension("json"), report, &json)?;
    let mut csv: BTreeMap<String, String> = extra.iter().map(|(k, v)| (k.clone(), format!("{v:e}"))).collect();
    csv.insert("config_hash".into(), manifest.config_hash.clone());
    evalmetrics::write_csv(&stem.with_extension("csv"), report, &csv)
}

/// Share of held-out rays whose samples see a non-increasing field.
pub fn holdout_monotonicity(model: &FieldModel, holdout: &ScanSet, cfg: &RunConfig) -> Result<f64> {
    let mut sample = cfg.sample;
    sample.rng_seed = stream_seed(cfg.seed, HOLDOUT_STREAM);
    let tset = build_training_set(holdout, &sample)?;
    training::monotone_chain_fraction(model, &tset.rays)
}

/// Where the pipeline gets its scans.
#[derive(Debug, Clone)]
pub enum PipelineInput {
    Scene(Box<SceneDoc>),
    Scans {
        dir: PathBuf,
        poses: PathBuf,
        pose_format: PoseFormat,
        reference: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub final_loss: f64,
    pub mesh_triangles: usize,
    pub metrics: Option<MetricsReport>,
    pub holdout_monotone: Option<f64>,
}

/// Manifest config for a pipeline run: the scene (if any) and the run config.
pub fn pipeline_config_value(input: &PipelineInput, cfg: &RunConfig) -> Result<serde_json::Value> {
    let scene = match input {
        PipelineInput::Scene(doc) => serde_json::to_value(doc.as_ref())?,
        PipelineInput::Scans { .. } => serde_json::Value::Null,
    };
    Ok(serde_json::json!({ "scene": scene, "run": cfg }))
}

/// simulate (for scene input), preprocess, train, mesh, eval into `out`.
pub fn cmd_pipeline(input: &PipelineInput, cfg: &RunConfig, out: &Path, manifest: &Manifest) -> Result<PipelineSummary> {
    cfg.validate()?;
    create_dir(out)?;
    manifest.save(out)?;
    let (scan_dir, poses, pose_format, reference, holdout) = match input {
        PipelineInput::Scene(doc) => {
            let sim = cmd_simulate(doc, out, manifest)?;
            let holdout = match (&sim.holdout_dir, &sim.holdout_poses) {
                (Some(d), Some(p)) => Some((d.clone(), p.clone())),
                _ => None,
            };
            (sim.scan_dir, sim.poses, PoseFormat::Kitti3x4Rows, Some(sim.reference), holdout)
        }
        PipelineInput::Scans {
            dir,
            poses,
            pose_format,
            reference,
        } => (dir.clone(), poses.clone(), *pose_format, reference.clone(), None),
    };
    let scans = list_scans(&scan_dir)?;
    let scanset = cmd_preprocess(&scans, &poses, pose_format, &cfg.preprocess, &out.join("scanset.mifss"), manifest)?;
    let trained = cmd_train(&scanset, cfg, out, manifest)?;
    let mesh_path = out.join("mesh.ply");
    let mesh = cmd_mesh(&trained.checkpoint, &cfg.mesh, &mesh_path, manifest)?;
    let mut extra = BTreeMap::new();
    let holdout_monotone = match holdout {
        Some((dir, p)) => {
            let set = preprocess_files(&list_scans(&dir)?, &p, PoseFormat::Kitti3x4Rows, &cfg.preprocess)?;
            let frac = holdout_monotonicity(&trained.checkpoint.model, &set, cfg)?;
            extra.insert("holdout_monotone_fraction".to_string(), frac);
            Some(frac)
        }
        None => None,
    };
    let final_loss = trained.history.last().map_or(f64::NAN, |h| h.total);
    extra.insert("final_loss".to_string(), final_loss);
    let metrics = match reference {
        Some(gt) if !mesh.is_empty() => Some(cmd_eval(&mesh_path, &gt, &cfg.metrics, &out.join("metrics"), manifest, &extra)?),
        Some(_) => return Err(MifError::EmptyMesh),
        None => None,
    };
    Ok(PipelineSummary {
        config_hash: manifest.config_hash.clone(),
        final_loss,
        mesh_triangles: mesh.triangles.len(),
        metrics,
        holdout_monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_propagates_and_hash_tracks_config() {
        let a = RunConfig::default().with_seed(7);
        assert_eq!((a.sample.rng_seed, a.train.seed, a.metrics.seed), (7, 7, 7));
        let b = RunConfig::default().with_seed(8);
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "train": {"iterations": 10}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.octree, OctreeConfig::default());
        c.validate().unwrap();

        fs::write(&p, r#"{"train": {"iterations": 0}}"#).unwrap();
        let err = RunConfig::load(&p).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("iterations ≥ 1"));
        fs::write(&p, r#"{"bogus": 1}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = crate::decoder::tests::micro_model(3, 6, 2, 2);
        let opt = OptState::new(Default::default(), &model);
        let ck = Checkpoint {
            manifest: Manifest::new("train", &RunConfig::default(), 0, 1).unwrap(),
            world_bounds: Aabb::new(Point3::ZERO, Point3::new(1.0, 2.0, 3.0)).unwrap(),
            model,
            opt,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mif");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
