//! Reconstruction metrics between a predicted and a reference mesh, computed
//! on uniformly sampled point sets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MifError, Result};
use crate::geometry::Point3;
use crate::meshing::Mesh;
use crate::par;
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    pub sample_resolution: f64,
    pub completion_trunc: f64,
    pub fscore_threshold: f64,
    pub seed: u64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            sample_resolution: 0.02,
            completion_trunc: 2.0,
            fscore_threshold: 0.10,
            seed: 0,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("sample_resolution", self.sample_resolution),
            ("completion_trunc", self.completion_trunc),
            ("fscore_threshold", self.fscore_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MifError::Config(format!("{n} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub completion: f64,
    /// `(mean d²_pred→gt + mean min(d_gt→pred, trunc)²) / 2`.
    pub chamfer_l2: f64,
    /// `(accuracy + completion) / 2`.
    pub chamfer_l1: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub pred_samples: usize,
    pub gt_samples: usize,
    pub params: MetricParams,
}

/// Area-weighted random points on `mesh`; each triangle receives
/// `floor(a/res²)` points plus one more with probability equal to the
/// fractional part.
pub fn sample_mesh_uniform(mesh: &Mesh, resolution: f64, seed: u64) -> Result<Vec<Point3>> {
    if mesh.triangles.is_empty() {
        return Err(MifError::EmptyMesh);
    }
    let inv = 1.0 / (resolution * resolution);
    let total = mesh.area();
    if !(total > 0.0) {
        return Err(MifError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity((total * inv) as usize + 16);
    for t in 0..mesh.triangles.len() {
        let expected = mesh.triangle_area(t) * inv;
        let mut n = expected.floor() as usize;
        if rng.random::<f64>() < expected - expected.floor() {
            n += 1;
        }
        let [a, b, c] = mesh.triangle(t);
        for _ in 0..n {
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(a + (b - a) * u + (c - a) * v);
        }
    }
    Ok(out)
}

/// Exact nearest-neighbour distance from every query point into `target`.
pub fn nearest_distances(query: &[Point3], target: &[Point3]) -> Result<Vec<f64>> {
    if target.is_empty() {
        return Err(MifError::EmptyTarget);
    }
    let tree = KdTree::build(target);
    Ok(nearest_with(&tree, query))
}

fn nearest_with(tree: &KdTree, query: &[Point3]) -> Vec<f64> {
    par::map_chunks(query, 4096, |_, chunk| {
        chunk
            .iter()
            .map(|q| tree.nearest(*q).expect("non-empty tree").1)
            .collect::<Vec<_>>()
    })
    .concat()
}

/// Metrics between already sampled point sets.
pub fn metrics_from_samples(pred: &[Point3], gt: &[Point3], params: &MetricParams) -> Result<MetricsReport> {
    params.validate()?;
    let d_pred = nearest_distances(pred, gt)?;
    let d_gt = nearest_distances(gt, pred)?;
    if d_pred.is_empty() {
        return Err(MifError::EmptyInput("predicted samples"));
    }
    let np = d_pred.len() as f64;
    let ng = d_gt.len() as f64;
    let trunc = params.completion_trunc;
    let accuracy = d_pred.iter().sum::<f64>() / np;
    let completion = d_gt.iter().map(|d| d.min(trunc)).sum::<f64>() / ng;
    let acc_sq = d_pred.iter().map(|d| d * d).sum::<f64>() / np;
    let comp_sq = d_gt.iter().map(|d| d.min(trunc).powi(2)).sum::<f64>() / ng;
    let tau = params.fscore_threshold;
    let precision = d_pred.iter().filter(|d| **d < tau).count() as f64 / np;
    let recall = d_gt.iter().filter(|d| **d < tau).count() as f64 / ng;
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        accuracy,
        completion,
        chamfer_l2: 0.5 * (acc_sq + comp_sq),
        chamfer_l1: 0.5 * (accuracy + completion),
        precision,
        recall,
        fscore,
        pred_samples: pred.len(),
        gt_samples: gt.len(),
        params: *params,
    })
}

pub fn reconstruction_metrics(pred: &Mesh, gt: &Mesh, params: &MetricParams) -> Result<MetricsReport> {
    params.validate()?;
    let ps = sample_mesh_uniform(pred, params.sample_resolution, params.seed)?;
    let gs = sample_mesh_uniform(gt, params.sample_resolution, params.seed)?;
    metrics_from_samples(&ps, &gs, params)
}

/// JSON report with `extra` provenance fields merged at the top level.
pub fn write_json(path: &Path, report: &MetricsReport, extra: &BTreeMap<String, serde_json::Value>) -> Result<()> {
    let mut v = serde_json::to_value(report)?;
    if let Some(obj) = v.as_object_mut() {
        for (k, x) in extra {
            obj.insert(k.clone(), x.clone());
        }
    }
    let s = serde_json::to_string_pretty(&v)?;
    fs::write(path, s + "\n").map_err(|e| MifError::io(path, e))
}

pub fn write_csv(path: &Path, report: &MetricsReport, extra: &BTreeMap<String, String>) -> Result<()> {
    let p = &report.params;
    let mut cols: Vec<(String, String)> = vec![
        ("accuracy".into(), format!("{:e}", report.accuracy)),
        ("completion".into(), format!("{:e}", report.completion)),
        ("chamfer_l2".into(), format!("{:e}", report.chamfer_l2)),
        ("chamfer_l1".into(), format!("{:e}", report.chamfer_l1)),
        ("precision".into(), format!("{:e}", report.precision)),
        ("recall".into(), format!("{:e}", report.recall)),
        ("fscore".into(), format!("{:e}", report.fscore)),
        ("pred_samples".into(), report.pred_samples.to_string()),
        ("gt_samples".into(), report.gt_samples.to_string()),
        ("sample_resolution".into(), format!("{:e}", p.sample_resolution)),
        ("completion_trunc".into(), format!("{:e}", p.completion_trunc)),
        ("fscore_threshold".into(), format!("{:e}", p.fscore_threshold)),
        ("seed".into(), p.seed.to_string()),
    ];
    cols.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    let header: Vec<&str> = cols.iter().map(|c| c.0.as_str()).collect();
    let row: Vec<&str> = cols.iter().map(|c| c.1.as_str()).collect();
    fs::write(path, format!("{}\n{}\n", header.join(","), row.join(","))).map_err(|e| MifError::io(path, e))
}
