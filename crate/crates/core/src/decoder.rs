//! Positional encoding and the weight-normalized MLP decoder.
//!
//! The decoder is evaluated in batches: rows of the input matrix are
//! `posenc(p) ⊕ latent(p)`. Reverse mode gives parameter, latent and point
//! gradients; a forward-mode tangent pass gives `∇_p f` for the eikonal term
//! together with its exact (almost-everywhere) parameter gradient.

use std::f64::consts::PI;
use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{MifError, Result};
use crate::geometry::{Aabb, Point3};
use crate::octree::{GradStore, InterpRecord, LatentOctree};
use crate::par;

/// Rows of V with a smaller norm act as zero rows.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosEncConfig {
    pub num_frequencies: usize,
    pub include_raw: bool,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        PosEncConfig {
            num_frequencies: 10,
            include_raw: true,
        }
    }
}

impl PosEncConfig {
    pub fn width(&self) -> usize {
        3 * (self.include_raw as usize + 2 * self.num_frequencies)
    }

    fn axis_width(&self) -> usize {
        self.include_raw as usize + 2 * self.num_frequencies
    }
}

/// Encodes an already normalized coordinate: per axis the raw value (if
/// enabled) followed by `sin(2^k π x̂), cos(2^k π x̂)` for `k < L`.
pub fn positional_encode(x_hat: Point3, cfg: &PosEncConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.width()];
    encode_into(x_hat, cfg, &mut out);
    out
}

fn encode_into(x_hat: Point3, cfg: &PosEncConfig, out: &mut [f64]) {
    let aw = cfg.axis_width();
    for axis in 0..3 {
        let x = x_hat[axis];
        let block = &mut out[axis * aw..(axis + 1) * aw];
        let mut o = 0;
        if cfg.include_raw {
            block[0] = x;
            o = 1;
        }
        let mut freq = PI;
        for k in 0..cfg.num_frequencies {
            let (s, c) = (freq * x).sin_cos();
            block[o + 2 * k] = s;
            block[o + 2 * k + 1] = c;
            freq *= 2.0;
        }
    }
}

/// Derivative of every encoding component with respect to `x̂[axis]`.
fn encode_derivative_into(x_hat: Point3, cfg: &PosEncConfig, axis: usize, out: &mut [f64]) {
    let aw = cfg.axis_width();
    out.iter_mut().for_each(|v| *v = 0.0);
    let x = x_hat[axis];
    let block = &mut out[axis * aw..(axis + 1) * aw];
    let mut o = 0;
    if cfg.include_raw {
        block[0] = 1.0;
        o = 1;
    }
    let mut freq = PI;
    for k in 0..cfg.num_frequencies {
        let (s, c) = (freq * x).sin_cos();
        block[o + 2 * k] = freq * c;
        block[o + 2 * k + 1] = -freq * s;
        freq *= 2.0;
    }
}

/// Positional encoding with isotropic normalization of world coordinates:
/// `x̂ = (p − center) / half_extent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosEncoder {
    pub cfg: PosEncConfig,
    pub center: Point3,
    pub half_extent: f64,
}

impl PosEncoder {
    pub fn for_bounds(cfg: PosEncConfig, bounds: &Aabb) -> Self {
        let ext = bounds.extent();
        let half = 0.5 * ext.x.max(ext.y).max(ext.z);
        PosEncoder {
            cfg,
            center: bounds.center(),
            half_extent: if half > 0.0 { half } else { 1.0 },
        }
    }

    pub fn width(&self) -> usize {
        self.cfg.width()
    }

    pub fn normalize(&self, p: Point3) -> Point3 {
        (p - self.center) / self.half_extent
    }

    pub fn encode_into(&self, p: Point3, out: &mut [f64]) {
        encode_into(self.normalize(p), &self.cfg, out);
    }

    /// `∂enc/∂p[axis]` in world units.
    pub fn derivative_into(&self, p: Point3, axis: usize, out: &mut [f64]) {
        encode_derivative_into(self.normalize(p), &self.cfg, axis, out);
        let s = 1.0 / self.half_extent;
        out.iter_mut().for_each(|v| *v *= s);
    }
}

/// `tanh(α·x)`, the soft sign used by every loss term.
pub fn sigmoid_alpha(x: f64, alpha: f64) -> f64 {
    (alpha * x).tanh()
}

pub fn sigmoid_alpha_derivative(x: f64, alpha: f64) -> f64 {
    let t = (alpha * x).tanh();
    alpha * (1.0 - t * t)
}

/// One weight-normalized affine layer, `W = diag(g / ‖V_i‖) V`.
#[derive(Debug, Clone, PartialEq)]
pub struct WnLayer {
    pub v: Array2<f64>,
    pub g: Array1<f64>,
    pub b: Array1<f64>,
}

impl WnLayer {
    pub fn fan_in(&self) -> usize {
        self.v.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.v.nrows()
    }

    fn row_norms(&self) -> Array1<f64> {
        self.v.map_axis(Axis(1), |r| r.dot(&r).sqrt())
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        let norms = self.row_norms();
        let mut w = self.v.clone();
        for ((mut row, n), g) in w.rows_mut().into_iter().zip(&norms).zip(&self.g) {
            let s = if *n < NORM_FLOOR { 0.0 } else { g / n };
            row.mapv_inplace(|x| x * s);
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Weight layers including the scalar output layer.
    pub num_layers: usize,
    pub posenc: PosEncConfig,
    pub alpha: f64,
    pub output_bias: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 256,
            num_layers: 4,
            posenc: PosEncConfig::default(),
            alpha: 100.0,
            output_bias: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_layers < 2 || self.posenc.num_frequencies == 0 {
            return Err(MifError::Config(
                "decoder needs hidden >= 1, num_layers >= 2, num_frequencies >= 1".into(),
            ));
        }
        if !(self.alpha > 0.0) || !self.output_bias.is_finite() {
            return Err(MifError::Config("decoder alpha must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<WnLayer>,
}

impl DecoderParams {
    /// `V ~ U(−1/√fan_in, 1/√fan_in)`, `g = ‖V_i‖`, zero biases except the
    /// output bias.
    pub fn init<R: Rng>(input: usize, hidden: usize, num_layers: usize, output_bias: f64, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let fan_in = if l == 0 { input } else { hidden };
            let fan_out = if l + 1 == num_layers { 1 } else { hidden };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let v = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            let layer = WnLayer {
                g: v.map_axis(Axis(1), |r| r.dot(&r).sqrt()),
                b: Array1::zeros(fan_out),
                v,
            };
            layers.push(layer);
        }
        layers.last_mut().unwrap().b[0] = output_bias;
        DecoderParams { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.v.len() + l.g.len() + l.b.len()).sum()
    }

    /// Mutable views over every parameter tensor in a fixed order
    /// (per layer: V, g, b).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.v.as_slice_mut().expect("standard layout"));
            out.push(l.g.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for l in &self.layers {
            out.push(l.v.as_slice().expect("standard layout"));
            out.push(l.g.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    pub fn effective(&self) -> EffectiveWeights {
        EffectiveWeights {
            w: self.layers.iter().map(WnLayer::effective_weight).collect(),
            b: self.layers.iter().map(|l| l.b.clone()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Converts gradients on effective weights into gradients on (V, g, b).
    pub fn weightnorm_grads(&self, dw: &[Array2<f64>], db: &[Array1<f64>]) -> ParamGrads {
        let mut layers = Vec::with_capacity(self.layers.len());
        for ((layer, dw), db) in self.layers.iter().zip(dw).zip(db) {
            let norms = layer.row_norms();
            let mut dv = Array2::zeros(layer.v.raw_dim());
            let mut dg = Array1::zeros(layer.g.len());
            for i in 0..layer.fan_out() {
                let n = norms[i];
                if n < NORM_FLOOR {
                    continue;
                }
                let v = layer.v.row(i);
                let dwi = dw.row(i);
                let gi = dwi.dot(&v) / n;
                dg[i] = gi;
                let s = layer.g[i] / n;
                let mut dvi = dv.row_mut(i);
                for j in 0..layer.fan_in() {
                    dvi[j] = s * (dwi[j] - gi * v[j] / n);
                }
            }
            layers.push(LayerGrads {
                v: dv,
                g: dg,
                b: db.clone(),
            });
        }
        ParamGrads { layers }
    }

    const MAGIC: &'static [u8] = b"MIFDEC1";

    pub(crate) fn write_section<W: Write>(
        &self,
        w: &mut Writer<W>,
        posenc: &PosEncoder,
        alpha: f64,
    ) -> Result<()> {
        w.tag(Self::MAGIC)?;
        w.u32(self.layers.len() as u32)?;
        for l in &self.layers {
            w.u32(l.fan_out() as u32)?;
            w.u32(l.fan_in() as u32)?;
            w.f64s(l.v.as_slice().expect("standard layout"))?;
            w.f64s(l.g.as_slice().expect("standard layout"))?;
            w.f64s(l.b.as_slice().expect("standard layout"))?;
        }
        w.u32(posenc.cfg.num_frequencies as u32)?;
        w.u8(posenc.cfg.include_raw as u8)?;
        w.f64s(&posenc.center.to_array())?;
        w.f64(posenc.half_extent)?;
        w.f64(alpha)?;
        Ok(())
    }

    pub(crate) fn read_section<R: Read>(r: &mut Reader<R>) -> Result<(Self, PosEncoder, f64)> {
        r.expect_tag(Self::MAGIC)?;
        let n = r.u32()? as usize;
        if n == 0 || n > 64 {
            return Err(MifError::Checkpoint("bad decoder layer count".into()));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            if out == 0 || inp == 0 || out * inp > 1 << 28 {
                return Err(MifError::Checkpoint("bad decoder layer shape".into()));
            }
            let v = Array2::from_shape_vec((out, inp), r.f64s(out * inp)?)
                .map_err(|e| MifError::Checkpoint(e.to_string()))?;
            let g = Array1::from(r.f64s(out)?);
            let b = Array1::from(r.f64s(out)?);
            layers.push(WnLayer { v, g, b });
        }
        let cfg = PosEncConfig {
            num_frequencies: r.u32()? as usize,
            include_raw: r.u8()? != 0,
        };
        let c = r.f64s(3)?;
        let posenc = PosEncoder {
            cfg,
            center: Point3::new(c[0], c[1], c[2]),
            half_extent: r.f64()?,
        };
        let alpha = r.f64()?;
        Ok((DecoderParams { layers }, posenc, alpha))
    }
}

/// Effective weights of one parameter snapshot, shared by all batches of a step.
#[derive(Debug, Clone)]
pub struct EffectiveWeights {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub v: Array2<f64>,
    pub g: Array1<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for l in &self.layers {
            out.push(l.v.as_slice().expect("standard layout"));
            out.push(l.g.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

/// Gradient accumulator for one shard: effective-weight gradients plus the
/// latent gradient store.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum {
    pub dw: Vec<Array2<f64>>,
    pub db: Vec<Array1<f64>>,
    pub latent: GradStore,
}

impl GradAccum {
    pub fn zeros(model: &FieldModel) -> Self {
        GradAccum {
            dw: model.decoder.layers.iter().map(|l| Array2::zeros(l.v.raw_dim())).collect(),
            db: model.decoder.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
            latent: model.tree.new_grad_store(),
        }
    }

    pub fn add(&mut self, o: &GradAccum) {
        for (a, b) in self.dw.iter_mut().zip(&o.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&o.db) {
            *a += b;
        }
        self.latent.add(&o.latent);
    }
}

/// Decoder, latent octree, encoder and the soft-sign flatness `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub decoder: DecoderParams,
    pub tree: LatentOctree,
    pub posenc: PosEncoder,
    pub alpha: f64,
}

impl FieldModel {
    pub fn new<R: Rng>(tree: LatentOctree, bounds: &Aabb, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let posenc = PosEncoder::for_bounds(cfg.posenc, bounds);
        let input = posenc.width() + tree.dim();
        let decoder = DecoderParams::init(input, cfg.hidden, cfg.num_layers, cfg.output_bias, rng);
        Ok(FieldModel {
            decoder,
            tree,
            posenc,
            alpha: cfg.alpha,
        })
    }

    pub fn input_width(&self) -> usize {
        self.posenc.width() + self.tree.dim()
    }

    pub fn check(&self) -> Result<()> {
        if self.decoder.input_width() != self.input_width() {
            return Err(MifError::Config(format!(
                "decoder input width {} != encoding {} + latent {}",
                self.decoder.input_width(),
                self.posenc.width(),
                self.tree.dim()
            )));
        }
        Ok(())
    }

    /// Field values at `points`, evaluated in fixed-size chunks.
    pub fn eval_points(&self, points: &[Point3]) -> Vec<f64> {
        const CHUNK: usize = 512;
        let eff = self.decoder.effective();
        par::map_chunks(points, CHUNK, |_, chunk| forward_batch(self, &eff, chunk).values.to_vec())
            .concat()
    }

    pub fn eval(&self, p: Point3) -> f64 {
        let eff = self.decoder.effective();
        forward_batch(self, &eff, &[p]).values[0]
    }
}

/// Cached forward state of a batch.
#[derive(Debug, Clone)]
pub struct BatchTape {
    pub points: Vec<Point3>,
    pub recs: Vec<InterpRecord>,
    /// Layer inputs: `acts[0]` is the encoded input, `acts[l]` the ReLU output
    /// of hidden layer `l`.
    pub acts: Vec<Array2<f64>>,
    pub values: Array1<f64>,
}

pub fn forward_batch(model: &FieldModel, eff: &EffectiveWeights, points: &[Point3]) -> BatchTape {
    let n = points.len();
    let pw = model.posenc.width();
    let d = model.tree.dim();
    let mut x = Array2::zeros((n, pw + d));
    let mut recs = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        let mut row = x.row_mut(i);
        let row = row.as_slice_mut().expect("standard layout");
        model.posenc.encode_into(*p, &mut row[..pw]);
        let rec = model.tree.locate(*p);
        model.tree.gather(&rec, &mut row[pw..]);
        recs.push(rec);
    }
    let num = eff.w.len();
    let mut acts = Vec::with_capacity(num);
    acts.push(x);
    for l in 0..num {
        let a = acts.last().unwrap();
        let mut z = a.dot(&eff.w[l].t());
        z += &eff.b[l];
        if l + 1 == num {
            let values = z.column(0).to_owned();
            return BatchTape {
                points: points.to_vec(),
                recs,
                acts,
                values,
            };
        }
        z.mapv_inplace(|v| v.max(0.0));
        acts.push(z);
    }
    unreachable!("decoder has at least one layer")
}

/// Reverse pass for upstream `∂L/∂f` per row. Accumulates into `grads` and
/// returns `∂L/∂p` per row when `want_point_grads`.
pub fn backward_batch(
    model: &FieldModel,
    eff: &EffectiveWeights,
    tape: &BatchTape,
    upstream: &[f64],
    grads: &mut GradAccum,
    want_point_grads: bool,
) -> Option<Vec<Point3>> {
    backward_core(model, eff, tape, upstream, grads, want_point_grads).1
}

/// Also returns the gradient with respect to the decoder input rows.
fn backward_core(
    model: &FieldModel,
    eff: &EffectiveWeights,
    tape: &BatchTape,
    upstream: &[f64],
    grads: &mut GradAccum,
    want_point_grads: bool,
) -> (Array2<f64>, Option<Vec<Point3>>) {
    let n = tape.points.len();
    let num = eff.w.len();
    let mut delta = Array2::from_shape_vec((n, 1), upstream.to_vec()).expect("upstream length");
    for l in (0..num).rev() {
        let a = &tape.acts[l];
        general_mat_mul(1.0, &delta.t(), a, 1.0, &mut grads.dw[l]);
        grads.db[l] += &delta.sum_axis(Axis(0));
        let mut da = delta.dot(&eff.w[l]);
        if l > 0 {
            ndarray::Zip::from(&mut da).and(a).for_each(|g, &act| {
                if act <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        delta = da;
    }
    let pw = model.posenc.width();
    let d = model.tree.dim();
    let mut point_grads = want_point_grads.then(|| Vec::with_capacity(n));
    let mut enc_d = vec![0.0; pw];
    let mut jac = vec![0.0; 3 * d];
    for i in 0..n {
        let row = delta.row(i);
        let row = row.as_slice().expect("standard layout");
        let (d_enc, d_lat) = row.split_at(pw);
        model.tree.accumulate_latent_grads(&tape.recs[i], d_lat, &mut grads.latent);
        if let Some(pg) = point_grads.as_mut() {
            let p = tape.points[i];
            model.tree.spatial_jacobian_into(&tape.recs[i], &mut jac);
            let mut g = [0.0; 3];
            for (axis, ga) in g.iter_mut().enumerate() {
                model.posenc.derivative_into(p, axis, &mut enc_d);
                *ga = dot(&enc_d, d_enc) + dot(&jac[axis * d..(axis + 1) * d], d_lat);
            }
            pg.push(Point3::from_array(g));
        }
    }
    (delta, point_grads)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward-mode state for `∇_p f`: three tangent rows per point.
#[derive(Debug, Clone)]
pub struct TangentTape {
    /// `tangents[l]` has `3n` rows: masked tangents entering layer `l`.
    pub tangents: Vec<Array2<f64>>,
    pub gradients: Vec<Point3>,
}

/// `∇_p f` at the points of `tape`, reusing its ReLU masks.
pub fn tangent_forward(model: &FieldModel, eff: &EffectiveWeights, tape: &BatchTape) -> TangentTape {
    let n = tape.points.len();
    let pw = model.posenc.width();
    let d = model.tree.dim();
    let mut t0 = Array2::zeros((3 * n, pw + d));
    let mut jac = vec![0.0; 3 * d];
    for i in 0..n {
        model.tree.spatial_jacobian_into(&tape.recs[i], &mut jac);
        for axis in 0..3 {
            let mut row = t0.row_mut(3 * i + axis);
            let row = row.as_slice_mut().expect("standard layout");
            model.posenc.derivative_into(tape.points[i], axis, &mut row[..pw]);
            row[pw..].copy_from_slice(&jac[axis * d..(axis + 1) * d]);
        }
    }
    let num = eff.w.len();
    let mut tangents = Vec::with_capacity(num);
    tangents.push(t0);
    for l in 0..num - 1 {
        let mut t = tangents[l].dot(&eff.w[l].t());
        let act = &tape.acts[l + 1];
        for (r, mut row) in t.rows_mut().into_iter().enumerate() {
            let mask = act.row(r / 3);
            ndarray::Zip::from(&mut row).and(&mask).for_each(|v, &m| {
                if m <= 0.0 {
                    *v = 0.0;
                }
            });
        }
        tangents.push(t);
    }
    let out = tangents[num - 1].dot(&eff.w[num - 1].t());
    let gradients = (0..n)
        .map(|i| Point3::new(out[[3 * i, 0]], out[[3 * i + 1, 0]], out[[3 * i + 2, 0]]))
        .collect();
    TangentTape {
        tangents,
        gradients,
    }
}

/// Backpropagates `∂L/∂(∇_p f)` per point into weights and latent features.
pub fn tangent_backward(
    model: &FieldModel,
    eff: &EffectiveWeights,
    tape: &BatchTape,
    tt: &TangentTape,
    upstream: &[Point3],
    grads: &mut GradAccum,
) {
    let n = tape.points.len();
    let num = eff.w.len();
    let mut delta = Array2::zeros((3 * n, 1));
    for (i, u) in upstream.iter().enumerate() {
        for axis in 0..3 {
            delta[[3 * i + axis, 0]] = u[axis];
        }
    }
    for l in (0..num).rev() {
        let t = &tt.tangents[l];
        general_mat_mul(1.0, &delta.t(), t, 1.0, &mut grads.dw[l]);
        let mut dt = delta.dot(&eff.w[l]);
        if l > 0 {
            let act = &tape.acts[l];
            for (r, mut row) in dt.rows_mut().into_iter().enumerate() {
                let mask = act.row(r / 3);
                ndarray::Zip::from(&mut row).and(&mask).for_each(|v, &m| {
                    if m <= 0.0 {
                        *v = 0.0;
                    }
                });
            }
        }
        delta = dt;
    }
    let pw = model.posenc.width();
    let d = model.tree.dim();
    let mut up = vec![0.0; 3 * d];
    for i in 0..n {
        for axis in 0..3 {
            let row = delta.row(3 * i + axis);
            let row = row.as_slice().expect("standard layout");
            up[axis * d..(axis + 1) * d].copy_from_slice(&row[pw..]);
        }
        model.tree.accumulate_jacobian_grads(&tape.recs[i], &up, &mut grads.latent);
    }
}

/// Single-point forward state.
#[derive(Debug, Clone)]
pub struct EvalTape {
    pub batch: BatchTape,
}

pub fn decode_forward(model: &FieldModel, p: Point3) -> (f64, EvalTape) {
    let eff = model.decoder.effective();
    let batch = forward_batch(model, &eff, &[p]);
    (batch.values[0], EvalTape { batch })
}

/// Returns `(∂/∂θ, ∂/∂latent, ∂/∂p)` of `upstream · f(p)`.
pub fn decode_backward(model: &FieldModel, tape: &EvalTape, upstream: f64) -> (ParamGrads, Vec<f64>, Point3) {
    let eff = model.decoder.effective();
    let mut grads = GradAccum::zeros(model);
    let (dx, pg) = backward_core(model, &eff, &tape.batch, &[upstream], &mut grads, true);
    let latent = dx.row(0).as_slice().expect("standard layout")[model.posenc.width()..].to_vec();
    (model.decoder.weightnorm_grads(&grads.dw, &grads.db), latent, pg.unwrap()[0])
}
