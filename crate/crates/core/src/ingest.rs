//! Scan and pose loading plus the preprocessing filters (range crop, voxel
//! downsampling, statistical outlier removal).

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{MifError, Result};
use crate::geometry::{Aabb, Mat3, Point3, Pose};
use crate::spatial::KdTree;
use crate::{par, ply};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanFormat {
    XyzText,
    PlyAscii,
    PlyBinaryLittleEndian,
    KittiBin,
}

impl ScanFormat {
    /// Guesses the format from the extension (`.xyz`/`.txt`, `.ply`, `.bin`).
    /// PLY files are parsed by header, so either PLY variant reads both.
    pub fn from_path(path: &Path) -> Option<ScanFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(ScanFormat::XyzText),
            "ply" => Some(ScanFormat::PlyBinaryLittleEndian),
            "bin" => Some(ScanFormat::KittiBin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseFormat {
    Kitti3x4Rows,
    Matrix4x4Blocks,
}

/// Rotations further than this from orthonormal are rejected instead of projected.
pub const RIGID_PROJECTION_LIMIT: f64 = 1e-3;

pub fn load_scan(path: &Path, format: ScanFormat) -> Result<Vec<Point3>> {
    let points = match format {
        ScanFormat::XyzText => {
            let text = fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
            let mut pts = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| MifError::format(path, i, "malformed number"))?;
                if vals.len() < 3 {
                    return Err(MifError::format(path, i, "expected 3 coordinates"));
                }
                let p = Point3::new(vals[0], vals[1], vals[2]);
                if !p.is_finite() {
                    return Err(MifError::format(path, i, "non-finite coordinate"));
                }
                pts.push(p);
            }
            pts
        }
        ScanFormat::PlyAscii | ScanFormat::PlyBinaryLittleEndian => ply::read(path)?.vertices,
        ScanFormat::KittiBin => {
            let bytes = fs::read(path).map_err(|e| MifError::io(path, e))?;
            if bytes.len() % 16 != 0 {
                return Err(MifError::format(
                    path,
                    bytes.len() / 16,
                    "trailing partial record (expected 16 bytes per point)",
                ));
            }
            let mut pts = Vec::with_capacity(bytes.len() / 16);
            for (i, rec) in bytes.chunks_exact(16).enumerate() {
                let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
                let p = Point3::new(f(0), f(4), f(8));
                if !p.is_finite() {
                    return Err(MifError::format(path, i, "non-finite coordinate"));
                }
                pts.push(p);
            }
            pts
        }
    };
    if points.is_empty() {
        return Err(MifError::format(path, 0, "empty cloud"));
    }
    Ok(points)
}

pub fn save_scan(path: &Path, points: &[Point3], format: ScanFormat) -> Result<()> {
    match format {
        ScanFormat::XyzText => {
            let mut s = String::with_capacity(points.len() * 40);
            for p in points {
                s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
            }
            fs::write(path, s).map_err(|e| MifError::io(path, e))
        }
        ScanFormat::PlyAscii => ply::write_ascii(path, points),
        ScanFormat::PlyBinaryLittleEndian => ply::write_binary(path, points, &[], &[]),
        ScanFormat::KittiBin => {
            let mut buf = Vec::with_capacity(points.len() * 16);
            for p in points {
                for c in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
            }
            fs::write(path, buf).map_err(|e| MifError::io(path, e))
        }
    }
}

pub fn load_poses(path: &Path, format: PoseFormat) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
    let mut records: Vec<Vec<f64>> = Vec::new();
    match format {
        PoseFormat::Kitti3x4Rows => {
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| MifError::format(path, i, "malformed number"))?;
                if vals.len() != 12 {
                    return Err(MifError::format(
                        path,
                        records.len(),
                        format!("expected 12 values, found {}", vals.len()),
                    ));
                }
                records.push(vals);
            }
        }
        PoseFormat::Matrix4x4Blocks => {
            let vals: Vec<f64> = text
                .lines()
                .filter(|l| !l.trim_start().starts_with('#'))
                .flat_map(str::split_whitespace)
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| MifError::format(path, 0, "malformed number"))?;
            if vals.len() % 16 != 0 {
                return Err(MifError::format(path, vals.len() / 16, "incomplete 4x4 block"));
            }
            for (i, block) in vals.chunks_exact(16).enumerate() {
                let last = &block[12..16];
                if last.iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-9) {
                    return Err(MifError::format(path, i, "last row must be 0 0 0 1"));
                }
                records.push(block[..12].to_vec());
            }
        }
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| pose_from_3x4(r, i, path))
        .collect()
}

fn pose_from_3x4(r: &[f64], record: usize, path: &Path) -> Result<Pose> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(MifError::format(path, record, "non-finite value"));
    }
    let rot = Mat3([[r[0], r[1], r[2]], [r[4], r[5], r[6]], [r[8], r[9], r[10]]]);
    let t = Point3::new(r[3], r[7], r[11]);
    let deviation = rot
        .orthonormality_error()
        .max((rot.determinant() - 1.0).abs());
    if deviation >= RIGID_PROJECTION_LIMIT {
        return Err(MifError::NonRigid { record, deviation });
    }
    if deviation <= crate::geometry::POSE_TOLERANCE {
        return Pose::new(rot, t);
    }
    Pose::new(project_to_rotation(&rot), t)
}

/// Nearest rotation in the Frobenius sense, via SVD.
pub fn project_to_rotation(m: &Mat3) -> Mat3 {
    let a = Matrix3::from_fn(|r, c| m.0[r][c]);
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    Mat3(std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])))
}

/// One 3×4 row-major pose per line, preceded by `# comment` lines.
pub fn save_poses_kitti(path: &Path, poses: &[Pose], comments: &[String]) -> Result<()> {
    let mut s = String::new();
    for c in comments {
        s.push_str(&format!("# {c}\n"));
    }
    for p in poses {
        let row: Vec<String> = p.to_3x4().iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| MifError::io(path, e))
}

/// Keeps points with `min_r <= |p| <= max_r`, in order.
pub fn range_filter(points: &[Point3], min_r: f64, max_r: f64) -> Result<Vec<Point3>> {
    if !(min_r >= 0.0 && min_r < max_r) {
        return Err(MifError::InvalidRange {
            min: min_r,
            max: max_r,
        });
    }
    Ok(points
        .iter()
        .filter(|p| {
            let r = p.norm();
            r >= min_r && r <= max_r
        })
        .copied()
        .collect())
}

pub fn voxel_index(p: Point3, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// One centroid per occupied voxel, in order of first occupancy.
pub fn voxel_downsample(points: &[Point3], voxel: f64) -> Result<Vec<Point3>> {
    if !(voxel > 0.0) {
        return Err(MifError::InvalidVoxel(voxel));
    }
    let mut slot: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(points.len());
    let mut acc: Vec<(Point3, usize)> = Vec::new();
    for p in points {
        let idx = *slot.entry(voxel_index(*p, voxel)).or_insert_with(|| {
            acc.push((Point3::ZERO, 0));
            acc.len() - 1
        });
        acc[idx].0 += *p;
        acc[idx].1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(sum, n)| if n == 1 { sum } else { sum / n as f64 })
        .collect())
}

/// Mean distance from every point to its `k` nearest other points.
pub fn mean_knn_distances(points: &[Point3], k: usize) -> Vec<f64> {
    let tree = KdTree::build(points);
    par::map_range(points.len(), |i| {
        let nn = tree.knn(points[i], k + 1);
        let mut sum = 0.0;
        let mut n = 0;
        for (j, d) in nn {
            if j != i && n < k {
                sum += d;
                n += 1;
            }
        }
        sum / n.max(1) as f64
    })
}

/// Drops points whose mean k-NN distance exceeds `mean + max_std·std` over
/// the cloud. Inputs with at most `k` points come back unchanged.
pub fn remove_statistical_outliers(points: &[Point3], k: usize, max_std: f64) -> Vec<Point3> {
    if k == 0 || points.len() <= k {
        return points.to_vec();
    }
    let d = mean_knn_distances(points, k);
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let limit = mean + max_std * var.sqrt();
    points
        .iter()
        .zip(&d)
        .filter(|(_, &di)| di <= limit)
        .map(|(p, _)| *p)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_range: f64,
    pub max_range: f64,
    pub voxel: f64,
    pub outlier_k: usize,
    pub outlier_std: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_range: 1.5,
            max_range: 50.0,
            voxel: 0.05,
            outlier_k: 25,
            outlier_std: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    /// Sensor-frame points.
    pub points: Vec<Point3>,
    pub sensor_origin: Point3,
    pub pose: Pose,
}

impl Scan {
    pub fn world_points(&self) -> impl Iterator<Item = Point3> + '_ {
        self.points.iter().map(|p| self.pose.transform_point(*p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSet {
    pub scans: Vec<Scan>,
    pub world_bounds: Aabb,
}

impl ScanSet {
    pub fn from_scans(scans: Vec<Scan>) -> Result<ScanSet> {
        let mut bounds: Option<Aabb> = None;
        for s in &scans {
            for p in s.world_points() {
                bounds = Some(match bounds {
                    Some(b) => b.union(&Aabb { min: p, max: p }),
                    None => Aabb { min: p, max: p },
                });
            }
        }
        let world_bounds = bounds.ok_or(MifError::EmptyScanSet)?;
        Ok(ScanSet {
            scans,
            world_bounds,
        })
    }

    pub fn num_points(&self) -> usize {
        self.scans.iter().map(|s| s.points.len()).sum()
    }

    const MAGIC: &'static [u8] = b"MIFSS1\0";

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_annotated(path, "")
    }

    /// Saves with a free-form `note` (e.g. the producing config hash) in the header.
    pub fn save_annotated(&self, path: &Path, note: &str) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| MifError::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        w.tag(Self::MAGIC)?;
        w.bytes(note.as_bytes())?;
        w.u64(self.scans.len() as u64)?;
        for s in &self.scans {
            w.f64s(&s.pose.to_3x4())?;
            w.u64(s.points.len() as u64)?;
            for p in &s.points {
                w.f64s(&p.to_array())?;
            }
        }
        drop(w.into_inner());
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScanSet> {
        Ok(Self::load_annotated(path)?.0)
    }

    pub fn load_annotated(path: &Path) -> Result<(ScanSet, String)> {
        let bytes = fs::read(path).map_err(|e| MifError::io(path, e))?;
        let mut r = Reader::new(bytes.as_slice());
        r.expect_tag(Self::MAGIC)?;
        let note = String::from_utf8(r.bytes(1 << 20)?)
            .map_err(|_| MifError::format(path, 0, "note is not UTF-8"))?;
        let n = r.len(1 << 32)?;
        let mut scans = Vec::with_capacity(n);
        for i in 0..n {
            let m = r.f64s(12)?;
            let pose = pose_from_3x4(&m, i, path)?;
            let count = r.len(1 << 40)?;
            let mut points = Vec::with_capacity(count);
            for _ in 0..count {
                let v = r.f64s(3)?;
                points.push(Point3::new(v[0], v[1], v[2]));
            }
            scans.push(Scan {
                points,
                sensor_origin: pose.translation(),
                pose,
            });
        }
        Ok((ScanSet::from_scans(scans)?, note))
    }
}

/// Range crop, voxel downsample, outlier removal, then pose attachment, per scan.
pub fn preprocess_scanset(
    raw: &[Vec<Point3>],
    poses: &[Pose],
    cfg: &PreprocessConfig,
) -> Result<ScanSet> {
    if raw.len() != poses.len() {
        return Err(MifError::CountMismatch {
            scans: raw.len(),
            poses: poses.len(),
        });
    }
    if raw.is_empty() {
        return Err(MifError::EmptyScanSet);
    }
    let idx: Vec<usize> = (0..raw.len()).collect();
    let filtered = par::map(&idx, |&i| -> Result<Vec<Point3>> {
        let pts = range_filter(&raw[i], cfg.min_range, cfg.max_range)?;
        let pts = voxel_downsample(&pts, cfg.voxel)?;
        let pts = remove_statistical_outliers(&pts, cfg.outlier_k, cfg.outlier_std);
        if pts.is_empty() {
            return Err(MifError::EmptyAfterFilter { scan: i });
        }
        Ok(pts)
    });
    let mut scans = Vec::with_capacity(raw.len());
    for (points, pose) in filtered.into_iter().zip(poses) {
        scans.push(Scan {
            points: points?,
            sensor_origin: pose.translation(),
            pose: *pose,
        });
    }
    ScanSet::from_scans(scans)
}
