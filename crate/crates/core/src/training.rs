//! Loss terms, the AdamW optimizer and the ray-batched training loop.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::decoder::{
    backward_batch, forward_batch, sigmoid_alpha, sigmoid_alpha_derivative, tangent_backward, tangent_forward,
    FieldModel, GradAccum, ParamGrads,
};
use crate::error::{MifError, Result};
use crate::geometry::Point3;
use crate::par;
use crate::sampler::{stream_seed, RaySamples, TrainingSet};

/// Mean `|f|` over surface points.
pub fn loss_surface(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MifError::EmptyInput("surface values"));
    }
    Ok(values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64)
}

/// `∂L_surf/∂f_i = sign(f_i)/n`, zero at an exact zero.
pub fn loss_surface_grad(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    values.iter().map(|v| sign0(*v) / n).collect()
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean of `1 − σ_α(f)·σ_α(r)`.
pub fn loss_sign(values: &[f64], residuals: &[f64], alpha: f64) -> Result<f64> {
    if values.len() != residuals.len() {
        return Err(MifError::LengthMismatch {
            left: values.len(),
            right: residuals.len(),
        });
    }
    if values.is_empty() {
        return Err(MifError::EmptyInput("sign values"));
    }
    let s: f64 = values
        .iter()
        .zip(residuals)
        .map(|(f, r)| 1.0 - sigmoid_alpha(*f, alpha) * sigmoid_alpha(*r, alpha))
        .sum();
    Ok(s / values.len() as f64)
}

pub fn loss_sign_grad(values: &[f64], residuals: &[f64], alpha: f64) -> Vec<f64> {
    let n = values.len() as f64;
    values
        .iter()
        .zip(residuals)
        .map(|(f, r)| -sigmoid_alpha(*r, alpha) * sigmoid_alpha_derivative(*f, alpha) / n)
        .collect()
}

/// Two-level mean of `1 − σ_α(f_m − f_{m+1})`: over consecutive pairs of a
/// ray, then over rays. Rays with fewer than two samples are skipped.
pub fn loss_mono<S: AsRef<[f64]>>(ray_values: &[S], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut rays = 0usize;
    for r in ray_values {
        let v = r.as_ref();
        if v.len() < 2 {
            continue;
        }
        let pairs: f64 = v.windows(2).map(|w| 1.0 - sigmoid_alpha(w[0] - w[1], alpha)).sum();
        total += pairs / (v.len() - 1) as f64;
        rays += 1;
    }
    if rays == 0 {
        return Err(MifError::RayTooShort);
    }
    Ok(total / rays as f64)
}

pub fn loss_mono_grad<S: AsRef<[f64]>>(ray_values: &[S], alpha: f64) -> Vec<Vec<f64>> {
    let rays = ray_values.iter().filter(|r| r.as_ref().len() >= 2).count().max(1) as f64;
    ray_values
        .iter()
        .map(|r| {
            let v = r.as_ref();
            let mut g = vec![0.0; v.len()];
            if v.len() >= 2 {
                let scale = 1.0 / ((v.len() - 1) as f64 * rays);
                for m in 0..v.len() - 1 {
                    let d = -sigmoid_alpha_derivative(v[m] - v[m + 1], alpha) * scale;
                    g[m] += d;
                    g[m + 1] -= d;
                }
            }
            g
        })
        .collect()
}

/// Mean `(‖∇f‖ − 1)²`.
pub fn loss_eikonal(gradients: &[Point3]) -> Result<f64> {
    if gradients.is_empty() {
        return Err(MifError::EmptyInput("eikonal gradients"));
    }
    Ok(gradients.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / gradients.len() as f64)
}

pub fn loss_eikonal_grad(gradients: &[Point3]) -> Vec<Point3> {
    let n = gradients.len() as f64;
    gradients
        .iter()
        .map(|g| {
            let norm = g.norm();
            if norm == 0.0 {
                Point3::ZERO
            } else {
                *g * (2.0 * (norm - 1.0) / (norm * n))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_eik: f64,
    pub lambda_sign: f64,
    pub lambda_mono: f64,
    /// Weight of the surface term; 1 except in ablations.
    pub lambda_surf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_eik: 0.1,
            lambda_sign: 1.0,
            lambda_mono: 1.0,
            lambda_surf: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_eik, self.lambda_sign, self.lambda_mono, self.lambda_surf];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(MifError::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub surf: f64,
    pub sign: f64,
    pub mono: f64,
    pub eik: f64,
}

/// `λ_surf·L_surf + λ_eik·L_eik + λ_sign·L_sign + λ_mono·L_mono`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    let t = w.lambda_surf * parts.surf + w.lambda_eik * parts.eik + w.lambda_sign * parts.sign + w.lambda_mono * parts.mono;
    if !t.is_finite() {
        return Err(MifError::NonFiniteLoss {
            iteration: 0,
            detail: format!("{parts:?}"),
        });
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub milestones: [u64; 2],
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            weight_decay: 1e-7,
            milestones: [10_000, 50_000],
            decay: 0.1,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect at `iteration` (1-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let passed = self.milestones.iter().filter(|m| iteration > **m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// First and second moments for one flat tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub tensors: Vec<Moments>,
    pub latent: Moments,
}

impl OptState {
    pub fn new(cfg: AdamConfig, model: &FieldModel) -> Self {
        OptState {
            cfg,
            step: 0,
            tensors: model.decoder.tensors().iter().map(|t| Moments::zeros(t.len())).collect(),
            latent: Moments::zeros(model.tree.features().len()),
        }
    }

    const MAGIC: &'static [u8] = b"MIFOPT1";

    pub(crate) fn write_section<W: Write>(&self, w: &mut Writer<W>) -> Result<()> {
        w.tag(Self::MAGIC)?;
        let c = &self.cfg;
        w.f64s(&[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.decay])?;
        w.u64(c.milestones[0])?;
        w.u64(c.milestones[1])?;
        w.u64(self.step)?;
        w.u32(self.tensors.len() as u32)?;
        for t in self.tensors.iter().chain(std::iter::once(&self.latent)) {
            w.u64(t.m.len() as u64)?;
            w.f64s(&t.m)?;
            w.f64s(&t.v)?;
        }
        Ok(())
    }

    pub(crate) fn read_section<R: Read>(r: &mut Reader<R>) -> Result<Self> {
        r.expect_tag(Self::MAGIC)?;
        let h = r.f64s(6)?;
        let milestones = [r.u64()?, r.u64()?];
        let cfg = AdamConfig {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            weight_decay: h[4],
            decay: h[5],
            milestones,
        };
        let step = r.u64()?;
        let n = r.u32()? as usize;
        if n > 1024 {
            return Err(MifError::Checkpoint("bad optimizer tensor count".into()));
        }
        let mut all = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let len = r.len(1 << 32)?;
            all.push(Moments {
                m: r.f64s(len)?,
                v: r.f64s(len)?,
            });
        }
        let latent = all.pop().expect("n + 1 entries");
        Ok(OptState {
            cfg,
            step,
            tensors: all,
            latent,
        })
    }
}

/// One AdamW update of `params` in place, with decoupled weight decay and
/// bias correction for step `t`.
pub fn adamw_update(params: &mut [f64], grads: &[f64], mom: &mut Moments, cfg: &AdamConfig, lr: f64, t: u64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
        *p *= shrink;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// AdamW step over a list of tensors; `iteration` is 1-based.
pub fn adamw_step(state: &mut OptState, params: &mut [&mut [f64]], grads: &[&[f64]], iteration: u64) -> Result<()> {
    if iteration == 0 {
        return Err(MifError::Config("optimizer iteration must be >= 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.tensors.len() {
        return Err(MifError::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MifError::NonFiniteGradient(format!("tensor {i}")));
        }
    }
    let lr = state.cfg.lr_at(iteration);
    for ((p, g), mom) in params.iter_mut().zip(grads).zip(state.tensors.iter_mut()) {
        adamw_update(p, g, mom, &state.cfg, lr, iteration);
    }
    state.step = iteration;
    Ok(())
}

/// Applies one step to the decoder and every touched latent row.
pub fn optimizer_step(model: &mut FieldModel, state: &mut OptState, grads: &GradAccum, iteration: u64) -> Result<()> {
    let pg = model.decoder.weightnorm_grads(&grads.dw, &grads.db);
    let gt = pg.tensors();
    {
        let mut params = model.decoder.tensors_mut();
        adamw_step(state, &mut params, &gt, iteration)?;
    }
    if grads.latent.values.iter().any(|v| !v.is_finite()) {
        return Err(MifError::NonFiniteGradient("latent features".into()));
    }
    let lr = state.cfg.lr_at(iteration);
    let d = model.tree.dim();
    let feats = model.tree.features_mut();
    for row in grads.latent.touched_rows() {
        let span = row * d..(row + 1) * d;
        let mut mom = Moments {
            m: state.latent.m[span.clone()].to_vec(),
            v: state.latent.v[span.clone()].to_vec(),
        };
        adamw_update(&mut feats[span.clone()], &grads.latent.values[span.clone()], &mut mom, &state.cfg, lr, iteration);
        state.latent.m[span.clone()].copy_from_slice(&mom.m);
        state.latent.v[span].copy_from_slice(&mom.v);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub iterations: u64,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    /// Rays per gradient shard; fixes the floating-point reduction order.
    pub shard_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_rays: 128,
            iterations: 5000,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            shard_rays: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(MifError::Config("iterations ≥ 1 required".into()));
        }
        if self.batch_rays == 0 || self.shard_rays == 0 {
            return Err(MifError::Config("batch_rays and shard_rays must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Loss parts, total and (optionally) gradients for a batch of rays.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Option<GradAccum>,
    /// `∂total/∂p` for every sample point (in ray order), eikonal term excluded.
    pub sample_point_grads: Option<Vec<Point3>>,
}

struct ShardOut {
    sums: LossParts,
    grads: Option<GradAccum>,
    point_grads: Option<Vec<Point3>>,
}

/// Evaluates the geometric loss on `rays`. Sign and monotonicity use the
/// sampled points; surface and eikonal terms use each ray's reading.
pub fn batch_loss(
    model: &FieldModel,
    rays: &[&RaySamples],
    weights: &LossWeights,
    shard_rays: usize,
    want_grads: bool,
    want_point_grads: bool,
) -> Result<BatchResult> {
    if rays.is_empty() {
        return Err(MifError::EmptyInput("ray batch"));
    }
    let eff = model.decoder.effective();
    let alpha = model.alpha;
    let n_samples: usize = rays.iter().map(|r| r.samples.len()).sum();
    let n_mono = rays.iter().filter(|r| r.samples.len() >= 2).count();
    let n_surf = rays.len();
    if n_samples == 0 {
        return Err(MifError::EmptyInput("ray samples"));
    }
    if n_mono == 0 {
        return Err(MifError::RayTooShort);
    }
    let use_eik = weights.lambda_eik > 0.0;
    let outs = par::map_chunks(rays, shard_rays, |_, chunk| {
        let pts: Vec<Point3> = chunk.iter().flat_map(|r| r.samples.iter().map(|s| s.point)).collect();
        let surf: Vec<Point3> = chunk.iter().map(|r| r.surface_point).collect();
        let tape = forward_batch(model, &eff, &pts);
        let stape = forward_batch(model, &eff, &surf);
        let tt = use_eik.then(|| tangent_forward(model, &eff, &stape));
        let mut sums = LossParts::default();
        let mut up = vec![0.0; pts.len()];
        let mut off = 0;
        for r in chunk {
            let m = r.samples.len();
            let vals = &tape.values.as_slice().expect("contiguous")[off..off + m];
            for (k, s) in r.samples.iter().enumerate() {
                let sp = sigmoid_alpha(vals[k], alpha);
                let lr = sigmoid_alpha(s.residual, alpha);
                sums.sign += 1.0 - sp * lr;
                up[off + k] += weights.lambda_sign * -lr * sigmoid_alpha_derivative(vals[k], alpha) / n_samples as f64;
            }
            if m >= 2 {
                let scale = 1.0 / ((m - 1) as f64 * n_mono as f64);
                let mut ray_sum = 0.0;
                for k in 0..m - 1 {
                    let delta = vals[k] - vals[k + 1];
                    ray_sum += 1.0 - sigmoid_alpha(delta, alpha);
                    let d = weights.lambda_mono * -sigmoid_alpha_derivative(delta, alpha) * scale;
                    up[off + k] += d;
                    up[off + k + 1] -= d;
                }
                sums.mono += ray_sum / (m - 1) as f64;
            }
            off += m;
        }
        let mut sup = vec![0.0; surf.len()];
        for (i, v) in stape.values.iter().enumerate() {
            sums.surf += v.abs();
            sup[i] = weights.lambda_surf * sign0(*v) / n_surf as f64;
        }
        let mut eik_up = Vec::new();
        if let Some(tt) = &tt {
            for g in &tt.gradients {
                let norm = g.norm();
                sums.eik += (norm - 1.0).powi(2);
                eik_up.push(if norm == 0.0 {
                    Point3::ZERO
                } else {
                    *g * (weights.lambda_eik * 2.0 * (norm - 1.0) / (norm * n_surf as f64))
                });
            }
        }
        let mut grads = None;
        let mut point_grads = None;
        if want_grads || want_point_grads {
            let mut acc = GradAccum::zeros(model);
            point_grads = backward_batch(model, &eff, &tape, &up, &mut acc, want_point_grads);
            backward_batch(model, &eff, &stape, &sup, &mut acc, false);
            if let Some(tt) = &tt {
                tangent_backward(model, &eff, &stape, tt, &eik_up, &mut acc);
            }
            grads = want_grads.then_some(acc);
        }
        ShardOut {
            sums,
            grads,
            point_grads,
        }
    });
    let mut sums = LossParts::default();
    let mut grads: Option<GradAccum> = None;
    let mut point_grads = want_point_grads.then(Vec::new);
    for o in outs {
        sums.surf += o.sums.surf;
        sums.sign += o.sums.sign;
        sums.mono += o.sums.mono;
        sums.eik += o.sums.eik;
        if let Some(g) = o.grads {
            match grads.as_mut() {
                Some(acc) => acc.add(&g),
                None => grads = Some(g),
            }
        }
        if let (Some(all), Some(pg)) = (point_grads.as_mut(), o.point_grads) {
            all.extend(pg);
        }
    }
    let parts = LossParts {
        surf: sums.surf / n_surf as f64,
        sign: sums.sign / n_samples as f64,
        mono: sums.mono / n_mono as f64,
        eik: if use_eik { sums.eik / n_surf as f64 } else { 0.0 },
    };
    let total = total_loss(&parts, weights)?;
    Ok(BatchResult {
        parts,
        total,
        grads,
        sample_point_grads: point_grads,
    })
}

/// Decoder-parameter gradients of a batch in (V, g, b) form.
pub fn param_grads(model: &FieldModel, grads: &GradAccum) -> ParamGrads {
    model.decoder.weightnorm_grads(&grads.dw, &grads.db)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub surf: f64,
    pub sign: f64,
    pub mono: f64,
    pub eik: f64,
    pub total: f64,
    pub lr: f64,
}

/// Ray indices for `iteration`, drawn with replacement.
pub fn batch_indices(num_rays: usize, batch: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, iteration));
    (0..batch).map(|_| rng.random_range(0..num_rays)).collect()
}

/// Runs `cfg.iterations` optimizer steps after `state.step`, calling
/// `checkpoint` every `cfg.checkpoint_every` iterations.
pub fn train<F>(
    model: &mut FieldModel,
    tset: &TrainingSet,
    cfg: &TrainConfig,
    state: &mut OptState,
    mut checkpoint: F,
) -> Result<Vec<HistoryRow>>
where
    F: FnMut(u64, &FieldModel, &OptState) -> Result<()>,
{
    cfg.validate()?;
    model.check()?;
    if tset.rays.is_empty() {
        return Err(MifError::EmptyScanSet);
    }
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    let start = state.step + 1;
    for it in start..start + cfg.iterations {
        let idx = batch_indices(tset.rays.len(), cfg.batch_rays, cfg.seed, it);
        let rays: Vec<&RaySamples> = idx.iter().map(|i| &tset.rays[*i]).collect();
        let res = batch_loss(model, &rays, &cfg.weights, cfg.shard_rays, true, false).map_err(|e| match e {
            MifError::NonFiniteLoss { detail, .. } => MifError::NonFiniteLoss { iteration: it, detail },
            other => other,
        })?;
        let grads = res.grads.expect("gradients requested");
        optimizer_step(model, state, &grads, it).map_err(|e| match e {
            MifError::NonFiniteGradient(d) => MifError::NonFiniteGradient(format!("iteration {it}: {d}")),
            other => other,
        })?;
        history.push(HistoryRow {
            iteration: it,
            surf: res.parts.surf,
            sign: res.parts.sign,
            mono: res.parts.mono,
            eik: res.parts.eik,
            total: res.total,
            lr: state.cfg.lr_at(it),
        });
        if it % 500 == 0 || it == start {
            log::info!(
                "iter {it}: total {:.5} surf {:.5} sign {:.5} mono {:.5} eik {:.5}",
                res.total,
                res.parts.surf,
                res.parts.sign,
                res.parts.mono,
                res.parts.eik
            );
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            checkpoint(it, model, state)?;
        }
    }
    Ok(history)
}

/// Fraction of rays whose field values never increase along the ray samples.
pub fn monotone_chain_fraction(model: &FieldModel, rays: &[RaySamples]) -> Result<f64> {
    if rays.is_empty() {
        return Err(MifError::EmptyInput("rays"));
    }
    let points: Vec<Point3> = rays.iter().flat_map(|r| r.samples.iter().map(|s| s.point)).collect();
    let values = model.eval_points(&points);
    let mut offset = 0;
    let mut good = 0usize;
    for r in rays {
        let v = &values[offset..offset + r.samples.len()];
        offset += r.samples.len();
        if v.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    Ok(good as f64 / rays.len() as f64)
}

/// CSV columns: iteration, L_surf, L_sign, L_mono, L_eik, total, lr.
pub fn write_history_csv(path: &Path, rows: &[HistoryRow], header_comment: Option<&str>) -> Result<()> {
    let mut s = String::new();
    if let Some(c) = header_comment {
        s.push_str(&format!("# {c}\n"));
    }
    s.push_str("iteration,l_surf,l_sign,l_mono,l_eik,total,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.iteration, r.surf, r.sign, r.mono, r.eik, r.total, r.lr
        ));
    }
    fs::write(path, s).map_err(|e| MifError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_examples() {
        assert_eq!(loss_surface(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(loss_surface(&[1.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(loss_surface(&[]), Err(MifError::EmptyInput(_))));
        let v = [0.3, -0.2, 0.7, 0.0];
        let g = loss_surface_grad(&v);
        for i in 0..3 {
            let h = 1e-6;
            let mut a = v;
            a[i] += h;
            let mut b = v;
            b[i] -= h;
            let fd = (loss_surface(&a).unwrap() - loss_surface(&b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-9);
        }
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn sign_examples() {
        let t5 = 5f64.tanh();
        let v = loss_sign(&[0.05], &[0.05], 100.0).unwrap();
        assert!((v - (1.0 - t5 * t5)).abs() < 1e-15);
        assert!((v - 1.815e-4).abs() < 1e-7);
        assert_eq!(loss_sign(&[0.0, 0.0], &[0.3, -2.0], 100.0).unwrap(), 1.0);
        let m = loss_sign(&[0.05], &[-0.05], 100.0).unwrap();
        assert!((m - (1.0 + t5 * t5)).abs() < 1e-15);
        assert!((m - (2.0 - 1.815e-4)).abs() < 1e-7);
        assert!(matches!(loss_sign(&[1.0], &[], 1.0), Err(MifError::LengthMismatch { .. })));
        assert!(matches!(loss_sign(&[], &[], 1.0), Err(MifError::EmptyInput(_))));
        // joint negation symmetry
        let a = loss_sign(&[0.3, -0.01], &[0.02, 0.4], 10.0).unwrap();
        let b = loss_sign(&[-0.3, 0.01], &[-0.02, -0.4], 10.0).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn mono_examples() {
        let v = loss_mono(&[vec![1.0, 0.0, -1.0]], 100.0).unwrap();
        assert!((v - (1.0 - 100f64.tanh())).abs() < 1e-12);
        assert!(v.abs() < 1e-12);
        assert_eq!(loss_mono(&[vec![0.0, 0.0]], 3.0).unwrap(), 1.0);
        let up = loss_mono(&[vec![-1.0, 1.0]], 100.0).unwrap();
        assert!((up - 2.0).abs() < 1e-12);
        assert!(matches!(loss_mono(&[vec![1.0]], 1.0), Err(MifError::RayTooShort)));
        // short rays contribute nothing
        assert_eq!(loss_mono(&[vec![0.0, 0.0], vec![5.0]], 3.0).unwrap(), 1.0);
        // shift invariance
        let a = loss_mono(&[vec![0.3, 0.1, 0.2], vec![0.0, -0.5]], 5.0).unwrap();
        let b = loss_mono(&[vec![1.3, 1.1, 1.2], vec![1.0, 0.5]], 5.0).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn mono_and_sign_grads_match_fd() {
        let rays = vec![vec![0.3, 0.1, 0.2, -0.1], vec![0.0, -0.05]];
        let g = loss_mono_grad(&rays, 5.0);
        for r in 0..rays.len() {
            for k in 0..rays[r].len() {
                let h = 1e-6;
                let mut a = rays.clone();
                a[r][k] += h;
                let mut b = rays.clone();
                b[r][k] -= h;
                let fd = (loss_mono(&a, 5.0).unwrap() - loss_mono(&b, 5.0).unwrap()) / (2.0 * h);
                assert!((fd - g[r][k]).abs() < 1e-8);
            }
        }
        let f = [0.01, -0.02, 0.005];
        let r = [0.03, -0.01, -0.02];
        let g = loss_sign_grad(&f, &r, 50.0);
        for k in 0..3 {
            let h = 1e-7;
            let mut a = f;
            a[k] += h;
            let mut b = f;
            b[k] -= h;
            let fd = (loss_sign(&a, &r, 50.0).unwrap() - loss_sign(&b, &r, 50.0).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn eikonal_examples() {
        let units = [Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 0.6, 0.8)];
        assert!(loss_eikonal(&units).unwrap().abs() < 1e-15);
        assert_eq!(loss_eikonal(&[Point3::ZERO]).unwrap(), 1.0);
        assert_eq!(loss_eikonal(&[Point3::new(2.0, 0.0, 0.0)]).unwrap(), 1.0);
        assert!(matches!(loss_eikonal(&[]), Err(MifError::EmptyInput(_))));
        let gs = [Point3::new(0.3, -1.2, 0.4)];
        let g = loss_eikonal_grad(&gs)[0];
        for axis in 0..3 {
            let mut e = [0.0; 3];
            e[axis] = 1e-7;
            let e = Point3::from_array(e);
            let fd = (loss_eikonal(&[gs[0] + e]).unwrap() - loss_eikonal(&[gs[0] - e]).unwrap()) / 2e-7;
            assert!((fd - g[axis]).abs() < 1e-6);
        }
    }

    #[test]
    fn total_examples() {
        let parts = LossParts {
            surf: 1.0,
            sign: 1.0,
            mono: 1.0,
            eik: 1.0,
        };
        let w = LossWeights {
            lambda_eik: 0.1,
            lambda_sign: 1.0,
            lambda_mono: 1.0,
            lambda_surf: 1.0,
        };
        assert!((total_loss(&parts, &w).unwrap() - 3.1).abs() < 1e-15);
        let zero = LossWeights {
            lambda_eik: 0.0,
            lambda_sign: 0.0,
            lambda_mono: 0.0,
            lambda_surf: 1.0,
        };
        let p = LossParts {
            surf: 0.25,
            sign: 7.0,
            mono: 3.0,
            eik: 2.0,
        };
        assert_eq!(total_loss(&p, &zero).unwrap(), 0.25);
        let bad = LossParts {
            surf: f64::NAN,
            ..p
        };
        assert!(matches!(total_loss(&bad, &w), Err(MifError::NonFiniteLoss { .. })));
    }

    fn scalar_state(cfg: AdamConfig) -> OptState {
        OptState {
            cfg,
            step: 0,
            tensors: vec![Moments::zeros(1)],
            latent: Moments::zeros(0),
        }
    }

    #[test]
    fn adamw_examples() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = scalar_state(cfg);
        let mut p = [1.0];
        adamw_step(&mut st, &mut [&mut p[..]], &[&[0.0][..]], 1).unwrap();
        assert_eq!(p[0], 1.0);

        let mut st = scalar_state(cfg);
        let mut p = [1.0];
        adamw_step(&mut st, &mut [&mut p[..]], &[&[1.0][..]], 1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 1.0 - 0.01 * 1.0 / (1.0 + 1e-15);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.99).abs() < 1e-12);

        let wd = AdamConfig {
            weight_decay: 1e-7,
            ..AdamConfig::default()
        };
        let mut st = scalar_state(wd);
        let mut p = [1.0];
        adamw_step(&mut st, &mut [&mut p[..]], &[&[1.0][..]], 1).unwrap();
        assert!((p[0] - (1.0 * (1.0 - 0.01 * 1e-7) - 0.01 / (1.0 + 1e-15))).abs() < 1e-15);

        let mut st = scalar_state(wd);
        let mut p = [2.0];
        for t in 1..=3 {
            adamw_step(&mut st, &mut [&mut p[..]], &[&[0.0][..]], t).unwrap();
        }
        assert!((p[0] - 2.0 * (1.0 - 0.01 * 1e-7f64).powi(3)).abs() < 1e-15);

        let mut st = scalar_state(wd);
        assert!(matches!(
            adamw_step(&mut st, &mut [&mut [0.0f64][..]], &[&[f64::NAN][..]], 1),
            Err(MifError::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn lr_schedule() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(1), 0.01);
        assert_eq!(c.lr_at(10_000), 0.01);
        assert!((c.lr_at(10_001) - 0.001).abs() < 1e-18);
        assert!((c.lr_at(50_001) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("iterations ≥ 1"));
    }
}
