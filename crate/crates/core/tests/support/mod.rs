//! Randomised micro-problems and a central-difference checker for the full
//! training loss. Shared with the CLI acceptance suite.

#![allow(dead_code)]

use mif_core::decoder::{forward_batch, DecoderConfig, FieldModel, PosEncConfig};
use mif_core::octree::LatentOctree;
use mif_core::sampler::{sample_ray, RaySamples, SampleConfig, Segment};
use mif_core::training::{batch_loss, param_grads, LossWeights};
use mif_core::{Aabb, Point3, Ray};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct MicroProblem {
    pub model: FieldModel,
    pub rays: Vec<RaySamples>,
}

impl MicroProblem {
    pub fn ray_refs(&self) -> Vec<&RaySamples> {
        self.rays.iter().collect()
    }
}

/// Rays ending inside the unit cube, an octree over their near-surface
/// samples with random features, and a randomised decoder.
pub fn micro_problem(seed: u64, n_rays: usize, hidden: usize, freqs: usize, dim: usize, alpha: f64) -> MicroProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SampleConfig {
        gamma: 0.3,
        eps: 0.05,
        theta: 0.1,
        ..SampleConfig::default()
    };
    let mut rays = Vec::with_capacity(n_rays);
    while rays.len() < n_rays {
        let reading = Point3::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
        let dir = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if dir.norm() < 0.2 {
            continue;
        }
        let origin = reading - dir.normalized() * rng.random_range(0.5..0.8);
        let ray: Ray = Ray::through(origin, reading).expect("distinct points");
        rays.push(sample_ray(&ray, &cfg, &mut rng));
    }
    let mut near: Vec<Point3> = rays.iter().map(|r| r.surface_point).collect();
    for r in &rays {
        near.extend(r.samples.iter().filter(|s| s.segment == Segment::Near).map(|s| s.point));
    }
    // the octree origin sits on the lowest point; an off-lattice anchor keeps
    // every sample off the voxel faces
    let lo = near.iter().fold(near[0], |a, p| a.min(*p));
    near.push(lo - Point3::new(0.0371, 0.0413, 0.0293));
    let mut tree = LatentOctree::build(&near, 0.15, 2, dim).expect("non-empty");
    for v in tree.features_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    let bounds = Aabb::new(Point3::new(-0.5, -0.5, -0.5), Point3::new(1.5, 1.5, 1.5)).unwrap();
    let dcfg = DecoderConfig {
        hidden,
        num_layers: 4,
        posenc: PosEncConfig {
            num_frequencies: freqs,
            include_raw: true,
        },
        alpha,
        output_bias: 0.1,
    };
    let mut model = FieldModel::new(tree, &bounds, &dcfg, &mut rng).unwrap();
    for l in &mut model.decoder.layers {
        for b in l.b.iter_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
        for g in l.g.iter_mut() {
            *g *= rng.random_range(0.5..2.0);
        }
    }
    MicroProblem { model, rays }
}

/// Smallest distance of any hidden pre-activation, surface value or
/// trilinear fraction to a kink, over every point the loss touches.
pub fn kink_margin(p: &MicroProblem) -> f64 {
    let m = &p.model;
    let eff = m.decoder.effective();
    let mut pts: Vec<Point3> = p.rays.iter().flat_map(|r| r.samples.iter().map(|s| s.point)).collect();
    let surf: Vec<Point3> = p.rays.iter().map(|r| r.surface_point).collect();
    pts.extend(&surf);
    let tape = forward_batch(m, &eff, &pts);
    let mut margin = f64::INFINITY;
    for l in 0..eff.w.len() - 1 {
        let mut z = tape.acts[l].dot(&eff.w[l].t());
        z += &eff.b[l];
        margin = margin.min(z.iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
    }
    let stape = forward_batch(m, &eff, &surf);
    margin = margin.min(stape.values.iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
    for q in &pts {
        for lv in m.tree.locate(*q).levels {
            for f in lv.frac {
                margin = margin.min(f.min(1.0 - f) * 10.0);
            }
        }
    }
    margin
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub checked: usize,
    pub failures: usize,
    pub worst_excess: f64,
}

impl CheckStats {
    fn record(&mut self, analytic: f64, numeric: f64, rel: f64, abs_floor: f64) {
        self.checked += 1;
        let tol = (rel * analytic.abs().max(numeric.abs())).max(abs_floor);
        let err = (analytic - numeric).abs();
        if err > tol {
            self.failures += 1;
        }
        self.worst_excess = self.worst_excess.max(err / tol);
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub params: CheckStats,
    pub latents: CheckStats,
    pub points: CheckStats,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.params.failures + self.latents.failures + self.points.failures == 0
    }
}

/// Central differences of the total loss against the analytic gradients for
/// every decoder parameter, every latent entry and every sample coordinate.
pub fn grad_check(p: &mut MicroProblem, weights: &LossWeights, h: f64, rel: f64, abs_floor: f64) -> GradCheck {
    let total = |m: &FieldModel, rays: &[RaySamples]| {
        let refs: Vec<&RaySamples> = rays.iter().collect();
        batch_loss(m, &refs, weights, 1, false, false).unwrap().total
    };
    let res = batch_loss(&p.model, &p.ray_refs(), weights, 1, true, true).unwrap();
    let grads = res.grads.unwrap();
    let pg = param_grads(&p.model, &grads).flat();
    let mut out = GradCheck::default();

    let base = p.model.decoder.flat();
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        p.model.decoder.set_flat(&x);
        let up = total(&p.model, &p.rays);
        x[i] = base[i] - h;
        p.model.decoder.set_flat(&x);
        let down = total(&p.model, &p.rays);
        out.params.record(pg[i], (up - down) / (2.0 * h), rel, abs_floor);
    }
    p.model.decoder.set_flat(&base);

    for i in 0..p.model.tree.features().len() {
        let v = p.model.tree.features()[i];
        p.model.tree.features_mut()[i] = v + h;
        let up = total(&p.model, &p.rays);
        p.model.tree.features_mut()[i] = v - h;
        let down = total(&p.model, &p.rays);
        p.model.tree.features_mut()[i] = v;
        out.latents.record(grads.latent.values[i], (up - down) / (2.0 * h), rel, abs_floor);
    }

    let point_grads = res.sample_point_grads.unwrap();
    let mut k = 0;
    for r in 0..p.rays.len() {
        for s in 0..p.rays[r].samples.len() {
            for axis in 0..3 {
                let orig = p.rays[r].samples[s].point;
                let mut e = [0.0; 3];
                e[axis] = h;
                let e = Point3::from_array(e);
                p.rays[r].samples[s].point = orig + e;
                let up = total(&p.model, &p.rays);
                p.rays[r].samples[s].point = orig - e;
                let down = total(&p.model, &p.rays);
                p.rays[r].samples[s].point = orig;
                out.points.record(point_grads[k][axis], (up - down) / (2.0 * h), rel, abs_floor);
            }
            k += 1;
        }
    }
    out
}
