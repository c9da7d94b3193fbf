//! Per-ray training samples: free-space, near-surface and occluded segments
//! around each reading, with signed along-ray residuals `r = τ - t`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{MifError, Result};
use crate::geometry::{Point3, Ray};
use crate::ingest::ScanSet;
use crate::par;

/// Minimum gap enforced between consecutive samples on a ray.
pub const TIE_BREAK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub m_free: usize,
    pub m_surf: usize,
    pub m_occ: usize,
    pub eps: f64,
    pub gamma: f64,
    pub theta: f64,
    pub rng_seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            m_free: 4,
            m_surf: 3,
            m_occ: 2,
            eps: 0.05,
            gamma: 1.0,
            theta: 0.3,
            rng_seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray() == 0 {
            return Err(MifError::Config("at least one sample count must be positive".into()));
        }
        for (name, v) in [("eps", self.eps), ("gamma", self.gamma), ("theta", self.theta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MifError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.m_free + self.m_surf + self.m_occ
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Free,
    Near,
    Occluded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuerySample {
    pub point: Point3,
    pub t: f64,
    pub residual: f64,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    /// Strictly increasing in `t`.
    pub samples: Vec<QuerySample>,
    pub surface_point: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub rays: Vec<RaySamples>,
    pub surface_points: Vec<Point3>,
}

/// Draws the three segments for one ray and returns the samples sorted by `t`.
///
/// Rays shorter than `γ + ε` get their free-space segment clamped to start at
/// the sensor.
pub fn sample_ray<R: Rng>(ray: &Ray, cfg: &SampleConfig, rng: &mut R) -> RaySamples {
    let tau = ray.depth;
    let mut free_lo = tau - cfg.gamma - cfg.eps;
    if free_lo < 0.0 {
        log::warn!("ray of depth {tau:.3} m shorter than gamma + eps; clamping free segment at the sensor");
        free_lo = 0.0;
    }
    let free_hi = (tau - cfg.eps).max(free_lo);
    let segments = [
        (Segment::Free, cfg.m_free, free_lo, free_hi),
        (Segment::Near, cfg.m_surf, tau - cfg.eps, tau + cfg.eps),
        (Segment::Occluded, cfg.m_occ, tau + cfg.eps, tau + cfg.eps + cfg.theta),
    ];
    let mut ts: Vec<(f64, Segment)> = Vec::with_capacity(cfg.samples_per_ray());
    for (seg, count, lo, hi) in segments {
        for _ in 0..count {
            let u: f64 = rng.random();
            ts.push((lo + u * (hi - lo), seg));
        }
    }
    ts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for i in 1..ts.len() {
        if ts[i].0 <= ts[i - 1].0 {
            ts[i].0 = ts[i - 1].0 + TIE_BREAK;
        }
    }
    RaySamples {
        ray: *ray,
        samples: ts
            .into_iter()
            .map(|(t, segment)| QuerySample {
                point: ray.at(t),
                t,
                residual: tau - t,
                segment,
            })
            .collect(),
        surface_point: ray.reading(),
    }
}

pub(crate) fn stream_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_training_set(scanset: &ScanSet, cfg: &SampleConfig) -> Result<TrainingSet> {
    cfg.validate()?;
    let mut rays = Vec::with_capacity(scanset.num_points());
    for scan in &scanset.scans {
        for w in scan.world_points() {
            if let Some(r) = Ray::through(scan.sensor_origin, w) {
                rays.push(r);
            }
        }
    }
    if rays.is_empty() {
        return Err(MifError::EmptyScanSet);
    }
    let sampled = par::map_range(rays.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.rng_seed, i as u64));
        sample_ray(&rays[i], cfg, &mut rng)
    });
    let surface_points = sampled.iter().map(|r| r.surface_point).collect();
    Ok(TrainingSet {
        rays: sampled,
        surface_points,
    })
}

impl TrainingSet {
    pub fn num_samples(&self) -> usize {
        self.rays.iter().map(|r| r.samples.len()).sum()
    }

    /// Readings plus near-surface samples: the points the latent octree is built on.
    pub fn near_surface_points(&self) -> Vec<Point3> {
        let mut pts = self.surface_points.clone();
        for r in &self.rays {
            pts.extend(
                r.samples
                    .iter()
                    .filter(|s| s.segment == Segment::Near)
                    .map(|s| s.point),
            );
        }
        pts
    }

    const MAGIC: &'static [u8] = b"MIFTS1\0";

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| MifError::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        w.tag(Self::MAGIC)?;
        w.u64(self.rays.len() as u64)?;
        for r in &self.rays {
            w.f64s(&r.ray.origin.to_array())?;
            w.f64s(&r.ray.direction.to_array())?;
            w.f64(r.ray.depth)?;
            w.u32(r.samples.len() as u32)?;
            for s in &r.samples {
                w.f64(s.t)?;
                w.u8(match s.segment {
                    Segment::Free => 0,
                    Segment::Near => 1,
                    Segment::Occluded => 2,
                })?;
            }
        }
        drop(w.into_inner());
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainingSet> {
        let bytes = fs::read(path).map_err(|e| MifError::io(path, e))?;
        let mut r = Reader::new(bytes.as_slice());
        r.expect_tag(Self::MAGIC)?;
        let n = r.len(1 << 40)?;
        let mut rays = Vec::with_capacity(n);
        for _ in 0..n {
            let o = r.f64s(3)?;
            let d = r.f64s(3)?;
            let ray = Ray {
                origin: Point3::new(o[0], o[1], o[2]),
                direction: Point3::new(d[0], d[1], d[2]),
                depth: r.f64()?,
            };
            let m = r.u32()? as usize;
            let mut samples = Vec::with_capacity(m);
            for _ in 0..m {
                let t = r.f64()?;
                let segment = match r.u8()? {
                    0 => Segment::Free,
                    1 => Segment::Near,
                    2 => Segment::Occluded,
                    s => return Err(MifError::Checkpoint(format!("bad segment tag {s}"))),
                };
                samples.push(QuerySample {
                    point: ray.at(t),
                    t,
                    residual: ray.depth - t,
                    segment,
                });
            }
            rays.push(RaySamples {
                ray,
                samples,
                surface_point: ray.reading(),
            });
        }
        let surface_points = rays.iter().map(|r| r.surface_point).collect();
        Ok(TrainingSet {
            rays,
            surface_points,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::ingest::Scan;

    fn check_invariants(rs: &RaySamples, cfg: &SampleConfig) {
        let tau = rs.ray.depth;
        let tol = 1e-9 * (1 + rs.samples.len()) as f64;
        for w in rs.samples.windows(2) {
            assert!(w[1].t > w[0].t, "not strictly sorted");
            assert!(w[1].residual < w[0].residual);
        }
        for s in &rs.samples {
            assert!((s.residual - (tau - s.t)).abs() < 1e-12);
            assert!((s.point - rs.ray.at(s.t)).norm() < 1e-9);
            match s.segment {
                Segment::Free => {
                    assert!(s.residual >= cfg.eps - tol && s.residual <= cfg.gamma + cfg.eps + tol)
                }
                Segment::Near => assert!(s.residual.abs() <= cfg.eps + tol),
                Segment::Occluded => {
                    assert!(s.residual <= -cfg.eps + tol && s.residual >= -(cfg.eps + cfg.theta) - tol)
                }
            }
        }
        assert!((rs.surface_point - rs.ray.at(tau)).norm() < 1e-9);
    }

    #[test]
    fn segment_supports_for_reference_ray() {
        let cfg = SampleConfig {
            m_free: 200,
            m_surf: 200,
            m_occ: 200,
            eps: 0.1,
            gamma: 1.0,
            theta: 0.5,
            rng_seed: 1,
        };
        let ray = Ray::new(Point3::ZERO, Point3::new(0.0, 0.0, 1.0), 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rs = sample_ray(&ray, &cfg, &mut rng);
        let span = |seg: Segment| {
            let ts: Vec<f64> = rs.samples.iter().filter(|s| s.segment == seg).map(|s| s.t).collect();
            (ts.iter().cloned().fold(f64::INFINITY, f64::min), ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        let (lo, hi) = span(Segment::Free);
        assert!(lo >= 8.9 - 1e-9 && hi <= 9.9 + 1e-6);
        let (lo, hi) = span(Segment::Near);
        assert!(lo >= 9.9 - 1e-6 && hi <= 10.1 + 1e-6);
        let (lo, hi) = span(Segment::Occluded);
        assert!(lo >= 10.1 - 1e-6 && hi <= 10.6 + 1e-6);
        check_invariants(&rs, &cfg);
    }

    #[test]
    fn invariants_over_random_rays() {
        let cfg = SampleConfig {
            m_free: 4,
            m_surf: 4,
            m_occ: 4,
            rng_seed: 42,
            ..SampleConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let d = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if d.norm() < 1e-3 {
                continue;
            }
            let o = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let ray = Ray::new(o, d.normalized(), rng.random_range(1.5..30.0)).unwrap();
            check_invariants(&sample_ray(&ray, &cfg, &mut rng), &cfg);
        }
    }

    #[test]
    fn short_ray_is_clamped() {
        let cfg = SampleConfig::default();
        let ray = Ray::new(Point3::ZERO, Point3::new(1.0, 0.0, 0.0), 0.5).unwrap();
        let rs = sample_ray(&ray, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(rs.samples.iter().all(|s| s.t >= 0.0));
        assert_eq!(rs.samples.len(), cfg.samples_per_ray());
    }

    #[test]
    fn residual_zero_at_reading() {
        let ray = Ray::new(Point3::ZERO, Point3::new(1.0, 0.0, 0.0), 4.0).unwrap();
        let s = QuerySample {
            point: ray.at(4.0),
            t: 4.0,
            residual: ray.depth - 4.0,
            segment: Segment::Near,
        };
        assert_eq!(s.residual, 0.0);
    }

    fn one_scan(n: usize) -> ScanSet {
        let points = (0..n)
            .map(|i| {
                let a = i as f64 * 0.05;
                Point3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.2)
            })
            .collect();
        let pose = Pose::from_translation(Point3::new(0.5, 0.0, 0.0));
        ScanSet::from_scans(vec![Scan {
            points,
            sensor_origin: pose.translation(),
            pose,
        }])
        .unwrap()
    }

    #[test]
    fn counts_and_determinism() {
        let set = one_scan(100);
        let cfg = SampleConfig::default();
        let a = build_training_set(&set, &cfg).unwrap();
        assert_eq!(a.rays.len(), 100);
        assert_eq!(a.surface_points.len(), 100);
        assert_eq!(a.num_samples(), 100 * cfg.samples_per_ray());
        let b = crate::par::sequential(|| build_training_set(&set, &cfg).unwrap());
        assert_eq!(a, b);
        for r in &a.rays {
            check_invariants(r, &cfg);
        }
        let c = build_training_set(&set, &SampleConfig { rng_seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cache_round_trip() {
        let set = one_scan(20);
        let ts = build_training_set(&set, &SampleConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ts.bin");
        ts.save(&p).unwrap();
        assert_eq!(TrainingSet::load(&p).unwrap(), ts);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = SampleConfig {
            m_free: 0,
            m_surf: 0,
            m_occ: 0,
            ..SampleConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(SampleConfig { eps: 0.0, ..SampleConfig::default() }.validate().is_err());
    }
}
