//! Synthetic LiDAR over analytic signed-distance scenes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MifError, Result};
use crate::geometry::{Aabb, Mat3, Point3, Pose};
use crate::ingest::Scan;
use crate::meshing::{marching_cubes, sample_grid, Mesh, DEFAULT_CELL_BUDGET};
use crate::par;
use crate::sampler::stream_seed;

pub const HIT_EPSILON: f64 = 1e-6;
pub const MAX_TRACE_STEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: Point3,
        radius: f64,
        #[serde(default)]
        invert: bool,
    },
    Box {
        center: Point3,
        half_extents: Point3,
        /// Box-to-world rotation.
        #[serde(default = "identity")]
        rotation: Mat3,
        #[serde(default)]
        invert: bool,
    },
    /// Solid half-space `n·p < offset`.
    Plane {
        normal: Point3,
        offset: f64,
        #[serde(default)]
        invert: bool,
    },
}

fn identity() -> Mat3 {
    Mat3::IDENTITY
}

fn box_sdf(q: Point3, h: Point3) -> f64 {
    let d = q.abs() - h;
    let outside = d.max(Point3::ZERO).norm();
    let inside = d.x.max(d.y).max(d.z).min(0.0);
    outside + inside
}

impl Primitive {
    pub fn sdf(&self, p: Point3) -> f64 {
        let (d, invert) = match self {
            Primitive::Sphere { center, radius, invert } => ((p - *center).norm() - radius, *invert),
            Primitive::Box {
                center,
                half_extents,
                rotation,
                invert,
            } => (box_sdf(rotation.transpose().mul_vec(p - *center), *half_extents), *invert),
            Primitive::Plane { normal, offset, invert } => (normal.dot(p) - offset, *invert),
        };
        if invert {
            -d
        } else {
            d
        }
    }

    pub fn transformed(&self, pose: &Pose) -> Primitive {
        match self {
            Primitive::Sphere { center, radius, invert } => Primitive::Sphere {
                center: pose.transform_point(*center),
                radius: *radius,
                invert: *invert,
            },
            Primitive::Box {
                center,
                half_extents,
                rotation,
                invert,
            } => Primitive::Box {
                center: pose.transform_point(*center),
                half_extents: *half_extents,
                rotation: pose.rotation().mul_mat(rotation),
                invert: *invert,
            },
            Primitive::Plane { normal, offset, invert } => {
                let n = pose.transform_vector(*normal);
                Primitive::Plane {
                    normal: n,
                    offset: offset + n.dot(pose.translation()),
                    invert: *invert,
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { center, radius, .. } => center.is_finite() && *radius > 0.0,
            Primitive::Box {
                center,
                half_extents,
                rotation,
                ..
            } => {
                center.is_finite()
                    && half_extents.x > 0.0
                    && half_extents.y > 0.0
                    && half_extents.z > 0.0
                    && rotation.orthonormality_error() < 1e-9
            }
            Primitive::Plane { normal, offset, .. } => {
                offset.is_finite() && (normal.norm() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(MifError::Config(format!("invalid primitive {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdfScene {
    pub primitives: Vec<Primitive>,
    /// Polynomial smooth-min radius; `None` or 0 gives the exact union.
    #[serde(default)]
    pub smooth_k: Option<f64>,
}

impl SdfScene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(MifError::EmptyInput("scene primitives"));
        }
        if let Some(k) = self.smooth_k {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(MifError::Config(format!("smooth_k must be >= 0, got {k}")));
            }
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn transformed(&self, pose: &Pose) -> SdfScene {
        SdfScene {
            primitives: self.primitives.iter().map(|p| p.transformed(pose)).collect(),
            smooth_k: self.smooth_k,
        }
    }
}

fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    b + (a - b) * h - k * h * (1.0 - h)
}

pub fn scene_sdf(scene: &SdfScene, p: Point3) -> f64 {
    let k = scene.smooth_k.unwrap_or(0.0);
    let mut it = scene.primitives.iter().map(|q| q.sdf(p));
    let first = it.next().unwrap_or(f64::INFINITY);
    it.fold(first, |acc, d| if k > 0.0 { smooth_min(acc, d, k) } else { acc.min(d) })
}

/// Sphere-traced hit depth along a unit `direction`, or `None` on a miss.
pub fn cast_ray(scene: &SdfScene, origin: Point3, direction: Point3, max_range: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..MAX_TRACE_STEPS {
        let d = scene_sdf(scene, origin + direction * t);
        if d.abs() < HIT_EPSILON {
            // converge the remaining residual so the depth does not depend on
            // where the march happened to cross the threshold
            for _ in 0..64 {
                let r = scene_sdf(scene, origin + direction * t);
                if r.abs() < 1e-13 {
                    break;
                }
                t += r;
            }
            return Some(t);
        }
        t += d.abs();
        if t > max_range {
            return None;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerSpec {
    pub azimuth_count: usize,
    pub elevations_deg: Vec<f64>,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScannerSpec {
    /// 64 beams spread evenly over ±60°, 1° azimuth steps.
    fn default() -> Self {
        ScannerSpec {
            azimuth_count: 360,
            elevations_deg: (0..64).map(|i| -60.0 + 120.0 * i as f64 / 63.0).collect(),
            max_range: 50.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl ScannerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_count == 0 || self.elevations_deg.is_empty() {
            return Err(MifError::Config("scanner needs at least one azimuth and elevation".into()));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(MifError::Config(format!("max_range must be > 0, got {}", self.max_range)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MifError::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.elevations_deg.iter().any(|e| !e.is_finite()) {
            return Err(MifError::Config("non-finite elevation".into()));
        }
        Ok(())
    }

    pub fn lattice_size(&self) -> usize {
        self.azimuth_count * self.elevations_deg.len()
    }

    /// Sensor-frame unit directions, elevation-major.
    pub fn directions(&self) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.lattice_size());
        for e in &self.elevations_deg {
            let (se, ce) = e.to_radians().sin_cos();
            for a in 0..self.azimuth_count {
                let az = std::f64::consts::TAU * a as f64 / self.azimuth_count as f64;
                let (sa, ca) = az.sin_cos();
                out.push(Point3::new(ce * ca, ce * sa, se));
            }
        }
        out
    }
}

/// Casts the scanner lattice from `pose`; hits become sensor-frame points.
/// `scan_index` selects an independent noise stream.
pub fn simulate_scan(scene: &SdfScene, pose: &Pose, spec: &ScannerSpec, scan_index: u64) -> Result<Scan> {
    scene.validate()?;
    spec.validate()?;
    let origin = pose.translation();
    let dirs = spec.directions();
    let scan_seed = stream_seed(spec.seed, scan_index);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let hits = par::map_range(dirs.len(), |i| {
        let d = dirs[i];
        let depth = cast_ray(scene, origin, pose.transform_vector(d), spec.max_range)?;
        let depth = if spec.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scan_seed, i as u64));
            depth + noise.sample(&mut rng)
        } else {
            depth
        };
        (depth > 0.0).then(|| d * depth)
    });
    Ok(Scan {
        points: hits.into_iter().flatten().collect(),
        sensor_origin: origin,
        pose: *pose,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
}

impl PoseSpec {
    /// `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn to_pose(&self) -> Result<Pose> {
        let r = Mat3::rotation_z(self.yaw_deg.to_radians())
            .mul_mat(&Mat3::rotation_y(self.pitch_deg.to_radians()))
            .mul_mat(&Mat3::rotation_x(self.roll_deg.to_radians()));
        Pose::new(r, Point3::from_array(self.translation))
    }
}

/// Scene file: geometry, sensor poses, scanner and reference-mesh settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDoc {
    pub scene: SdfScene,
    pub poses: Vec<PoseSpec>,
    /// Extra viewpoints kept out of training, for held-out checks.
    #[serde(default)]
    pub holdout_poses: Vec<PoseSpec>,
    #[serde(default)]
    pub scanner: ScannerSpec,
    /// Region meshed for the reference surface.
    pub bounds: Aabb,
    #[serde(default = "default_reference_spacing")]
    pub reference_spacing: f64,
}

fn default_reference_spacing() -> f64 {
    0.02
}

impl SceneDoc {
    pub fn load(path: &Path) -> Result<SceneDoc> {
        let text = fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
        let doc: SceneDoc = serde_json::from_str(&text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        fs::write(path, s + "\n").map_err(|e| MifError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.scanner.validate()?;
        if self.poses.is_empty() {
            return Err(MifError::EmptyInput("scene poses"));
        }
        for p in self.poses.iter().chain(&self.holdout_poses) {
            p.to_pose()?;
        }
        if self.bounds.is_empty() {
            return Err(MifError::Config("scene bounds are empty".into()));
        }
        if !(self.reference_spacing > 0.0) {
            return Err(MifError::Config("reference_spacing must be > 0".into()));
        }
        Ok(())
    }

    pub fn sensor_poses(&self) -> Result<Vec<Pose>> {
        self.poses.iter().map(PoseSpec::to_pose).collect()
    }

    pub fn simulate(&self) -> Result<Vec<Scan>> {
        self.validate()?;
        self.sensor_poses()?
            .iter()
            .enumerate()
            .map(|(i, pose)| simulate_scan(&self.scene, pose, &self.scanner, i as u64))
            .collect()
    }

    /// Held-out scans; noise streams continue after the training scans.
    pub fn simulate_holdout(&self) -> Result<Vec<Scan>> {
        self.validate()?;
        let base = self.poses.len() as u64;
        self.holdout_poses
            .iter()
            .enumerate()
            .map(|(i, p)| simulate_scan(&self.scene, &p.to_pose()?, &self.scanner, base + i as u64))
            .collect()
    }

    pub fn reference_mesh(&self) -> Result<Mesh> {
        reference_mesh(&self.scene, &self.bounds, self.reference_spacing)
    }
}

/// Marching cubes on the exact SDF over `bounds` padded by two cells.
pub fn reference_mesh(scene: &SdfScene, bounds: &Aabb, spacing: f64) -> Result<Mesh> {
    let grid = sample_grid(&bounds.expanded(2.0 * spacing), spacing, DEFAULT_CELL_BUDGET, |p| {
        scene_sdf(scene, p)
    })?;
    let mesh = marching_cubes(&grid, 0.0);
    if mesh.is_empty() {
        return Err(MifError::EmptyMesh);
    }
    Ok(mesh)
}

/// Box room with half-extents (3, 3, 2) around a 0.5 m-radius sphere, seen by
/// eight sensors on a 2.1 m ring at mid-height.
pub fn sphere_room() -> SceneDoc {
    let half = Point3::new(3.0, 3.0, 2.0);
    let poses = (0..8)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / 8.0 + 0.3;
            PoseSpec {
                translation: [2.1 * a.cos(), 2.1 * a.sin(), 0.0],
                yaw_deg: (45.0 * i as f64 + 10.0) % 360.0,
                pitch_deg: 0.0,
                roll_deg: 0.0,
            }
        })
        .collect();
    SceneDoc {
        scene: SdfScene {
            primitives: vec![
                Primitive::Box {
                    center: Point3::ZERO,
                    half_extents: half,
                    rotation: Mat3::IDENTITY,
                    invert: true,
                },
                Primitive::Sphere {
                    center: Point3::ZERO,
                    radius: 0.5,
                    invert: false,
                },
            ],
            smooth_k: None,
        },
        poses,
        holdout_poses: vec![
            PoseSpec {
                translation: [0.0, -2.2, 0.4],
                yaw_deg: 30.0,
                pitch_deg: 0.0,
                roll_deg: 0.0,
            },
            PoseSpec {
                translation: [-1.6, 1.5, -0.3],
                yaw_deg: 200.0,
                pitch_deg: 0.0,
                roll_deg: 0.0,
            },
        ],
        scanner: ScannerSpec::default(),
        bounds: Aabb {
            min: half * -1.0,
            max: half,
        },
        reference_spacing: 0.02,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_sphere() -> SdfScene {
        SdfScene {
            primitives: vec![Primitive::Sphere {
                center: Point3::ZERO,
                radius: 1.0,
                invert: false,
            }],
            smooth_k: None,
        }
    }

    #[test]
    fn sdf_examples() {
        let s = unit_sphere();
        assert_eq!(scene_sdf(&s, Point3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(scene_sdf(&s, Point3::ZERO), -1.0);
        let b = SdfScene {
            primitives: vec![Primitive::Box {
                center: Point3::ZERO,
                half_extents: Point3::new(1.0, 1.0, 1.0),
                rotation: Mat3::IDENTITY,
                invert: false,
            }],
            smooth_k: None,
        };
        assert!((scene_sdf(&b, Point3::new(2.0, 2.0, 0.0)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(scene_sdf(&b, Point3::new(0.5, 0.0, 0.0)), -0.5);
        let plane = Primitive::Plane {
            normal: Point3::new(0.0, 0.0, 1.0),
            offset: 1.0,
            invert: false,
        };
        assert_eq!(plane.sdf(Point3::new(5.0, 5.0, 3.0)), 2.0);
    }

    #[test]
    fn smooth_union_bounds_plain_union() {
        let mut s = sphere_room().scene;
        s.smooth_k = Some(0.2);
        let plain = sphere_room().scene;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
            let a = scene_sdf(&s, p);
            let b = scene_sdf(&plain, p);
            assert!(a <= b + 1e-12 && a >= b - 0.05);
        }
    }

    #[test]
    fn cast_examples() {
        let s = unit_sphere();
        let d = cast_ray(&s, Point3::new(3.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0), 50.0).unwrap();
        assert!((d - 2.0).abs() < 2e-5);
        assert_eq!(cast_ray(&s, Point3::new(3.0, 0.0, 0.0), Point3::new(0.0, 0.0, 1.0), 50.0), None);
    }

    fn sphere_hit(c: Point3, r: f64, o: Point3, d: Point3) -> Option<f64> {
        let oc = o - c;
        let b = oc.dot(d);
        let disc = b * b - (oc.norm_squared() - r * r);
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        (t >= 0.0).then_some(t)
    }

    #[test]
    fn random_rays_match_quadratic_oracle() {
        let c = Point3::new(0.3, -0.2, 0.1);
        let scene = SdfScene {
            primitives: vec![Primitive::Sphere {
                center: c,
                radius: 1.0,
                invert: false,
            }],
            smooth_k: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        let mut hits = 0;
        for _ in 0..1000 {
            let o = Point3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            if scene_sdf(&scene, o) < 0.1 {
                continue;
            }
            // aim near the sphere so most rays hit
            let target = c + Point3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2));
            let d = (target - o).normalized();
            let oracle = sphere_hit(c, 1.0, o, d);
            let traced = cast_ray(&scene, o, d, 50.0);
            match (oracle, traced) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    hits += 1;
                }
                (None, None) => {}
                // grazing rays may disagree within the hit tolerance
                (Some(a), None) | (None, Some(a)) => {
                    let p = o + d * a;
                    let t = oc_perp(c, o, d);
                    assert!((t - 1.0).abs() < 1e-3, "mismatch at {p:?}, closest approach {t}");
                }
            }
        }
        assert!(hits > 300);
        assert!(worst < 1e-4, "worst {worst}");
    }

    fn oc_perp(c: Point3, o: Point3, d: Point3) -> f64 {
        let oc = c - o;
        (oc - d * oc.dot(d)).norm()
    }

    fn small_spec(noise: f64, seed: u64) -> ScannerSpec {
        ScannerSpec {
            azimuth_count: 36,
            elevations_deg: vec![-30.0, -10.0, 0.0, 10.0, 30.0],
            max_range: 50.0,
            noise_sigma: noise,
            seed,
        }
    }

    #[test]
    fn enclosed_sensor_hits_every_ray() {
        let doc = sphere_room();
        let spec = small_spec(0.0, 0);
        let pose = doc.poses[0].to_pose().unwrap();
        let scan = simulate_scan(&doc.scene, &pose, &spec, 0).unwrap();
        assert_eq!(scan.points.len(), spec.lattice_size());
        for p in scan.world_points() {
            assert!(scene_sdf(&doc.scene, p).abs() < 1e-4);
        }
    }

    #[test]
    fn noiseless_sphere_points_on_surface_and_seeded() {
        let s = unit_sphere();
        let pose = Pose::new(Mat3::rotation_z(0.4), Point3::new(-3.0, 0.5, 0.2)).unwrap();
        let scan = simulate_scan(&s, &pose, &small_spec(0.0, 0), 0).unwrap();
        assert!(!scan.points.is_empty());
        for p in scan.world_points() {
            assert!(scene_sdf(&s, p).abs() < 1e-4);
        }
        let a = simulate_scan(&s, &pose, &small_spec(0.01, 3), 2).unwrap();
        let b = simulate_scan(&s, &pose, &small_spec(0.01, 3), 2).unwrap();
        assert_eq!(a, b);
        let c = simulate_scan(&s, &pose, &small_spec(0.01, 3), 5).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn reference_mesh_of_sphere() {
        let s = unit_sphere();
        let b = Aabb {
            min: Point3::new(-1.2, -1.2, -1.2),
            max: Point3::new(1.2, 1.2, 1.2),
        };
        let m = reference_mesh(&s, &b, 0.05).unwrap();
        let area = m.area();
        assert!((area - 4.0 * std::f64::consts::PI).abs() / (4.0 * std::f64::consts::PI) < 0.02, "{area}");
        for v in &m.vertices {
            assert!((v.norm() - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn scene_doc_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        let doc = sphere_room();
        doc.save(&p).unwrap();
        assert_eq!(SceneDoc::load(&p).unwrap(), doc);
        assert_eq!(doc.sensor_poses().unwrap().len(), 8);
        let bad = r#"{"scene":{"primitives":[]},"poses":[],"bounds":{"min":{"x":0,"y":0,"z":0},"max":{"x":1,"y":1,"z":1}}}"#;
        fs::write(&p, bad).unwrap();
        assert!(SceneDoc::load(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn depths_invariant_under_rigid_motion(
            yaw in -3.0f64..3.0, pitch in -1.5f64..1.5,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            az in 0.0f64..6.28, el in -0.4f64..0.4,
        ) {
            let scene = SdfScene {
                primitives: vec![Primitive::Sphere { center: Point3::new(0.2, 0.1, -0.1), radius: 1.0, invert: false }],
                smooth_k: None,
            };
            let sensor = Pose::new(Mat3::rotation_z(az), Point3::new(-3.0, 0.0, 0.0)).unwrap();
            let g = Pose::new(Mat3::rotation_z(yaw).mul_mat(&Mat3::rotation_y(pitch)), Point3::new(tx, ty, tz)).unwrap();
            let d = Point3::new(el.cos(), 0.0, el.sin());
            let a = cast_ray(&scene, sensor.translation(), sensor.transform_vector(d), 50.0);
            let moved = g.compose(&sensor);
            let b = cast_ray(&scene.transformed(&g), moved.translation(), moved.transform_vector(d), 50.0);
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b),
                (None, None) => {}
                _ => {
                    let c = Point3::new(0.2, 0.1, -0.1);
                    let dw = sensor.transform_vector(d);
                    prop_assert!((oc_perp(c, sensor.translation(), dw) - 1.0).abs() < 1e-3);
                }
            }
        }
    }
}
