//! Sparse multi-level latent feature grid.
//!
//! Each of the `H` finest octree levels stores optimizable feature vectors on
//! the corners of its allocated voxels, addressed by `(level, Morton code)` in
//! an exact hash table. A query trilinearly interpolates the eight corners of
//! the containing voxel at every level and sums the per-level results.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use crate::binio::{Reader, Writer};
use crate::error::{MifError, Result};
use crate::geometry::Point3;

pub const MORTON_AXIS_BITS: u32 = 21;
const AXIS_LIMIT: u64 = 1 << MORTON_AXIS_BITS;

/// Feature index of a corner that is not allocated.
pub const MISSING: u32 = u32::MAX;

fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

fn compact_bits(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x1f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x1f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

/// Interleaves `i` (bits 0,3,6,…), `j` (1,4,7,…) and `k` (2,5,8,…).
pub fn morton_encode(i: u64, j: u64, k: u64) -> Result<u64> {
    if i >= AXIS_LIMIT || j >= AXIS_LIMIT || k >= AXIS_LIMIT {
        return Err(MifError::IndexOverflow { i, j, k });
    }
    Ok(spread_bits(i) | (spread_bits(j) << 1) | (spread_bits(k) << 2))
}

pub fn morton_decode(code: u64) -> (u64, u64, u64) {
    (compact_bits(code), compact_bits(code >> 1), compact_bits(code >> 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MortonKey {
    pub level: u8,
    pub code: u64,
}

/// Interpolation state of one level of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelInterp {
    pub corners: [u32; 8],
    pub weights: [f64; 8],
    pub frac: [f64; 3],
    pub voxel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpRecord {
    pub levels: Vec<LevelInterp>,
    /// Hash-table lookups performed by the query.
    pub lookups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentOctree {
    origin: Point3,
    leaf_voxel: f64,
    num_levels: usize,
    dim: usize,
    tables: Vec<HashMap<u64, u32>>,
    /// Row-major `num_features × dim`.
    features: Vec<f64>,
    leaf_cells: HashSet<u64>,
}

/// Dense gradient buffer matching the feature matrix, with a touched-row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    pub dim: usize,
    pub values: Vec<f64>,
    pub touched: Vec<bool>,
}

impl GradStore {
    pub fn new(num_features: usize, dim: usize) -> Self {
        GradStore {
            dim,
            values: vec![0.0; num_features * dim],
            touched: vec![false; num_features],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn add(&mut self, other: &GradStore) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        for (a, b) in self.touched.iter_mut().zip(&other.touched) {
            *a |= *b;
        }
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
        self.touched.iter_mut().for_each(|v| *v = false);
    }

    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.touched
            .iter()
            .enumerate()
            .filter(|(_, t)| **t)
            .map(|(i, _)| i)
    }
}

fn corner_weights(frac: [f64; 3]) -> [f64; 8] {
    let [u, v, w] = frac;
    let mut out = [0.0; 8];
    for (c, o) in out.iter_mut().enumerate() {
        let wx = if c & 1 != 0 { u } else { 1.0 - u };
        let wy = if c & 2 != 0 { v } else { 1.0 - v };
        let wz = if c & 4 != 0 { w } else { 1.0 - w };
        *o = wx * wy * wz;
    }
    out
}

/// `∂w_c/∂p` for every corner, already divided by the voxel size.
fn corner_weight_gradients(frac: [f64; 3], voxel: f64) -> [[f64; 3]; 8] {
    let [u, v, w] = frac;
    let mut out = [[0.0; 3]; 8];
    for (c, g) in out.iter_mut().enumerate() {
        let (sx, sy, sz) = (
            if c & 1 != 0 { 1.0 } else { -1.0 },
            if c & 2 != 0 { 1.0 } else { -1.0 },
            if c & 4 != 0 { 1.0 } else { -1.0 },
        );
        let wx = if c & 1 != 0 { u } else { 1.0 - u };
        let wy = if c & 2 != 0 { v } else { 1.0 - v };
        let wz = if c & 4 != 0 { w } else { 1.0 - w };
        *g = [sx * wy * wz / voxel, wx * sy * wz / voxel, wx * wy * sz / voxel];
    }
    out
}

impl LatentOctree {
    /// Allocates the eight corner features of every voxel containing one of
    /// `points`, at each of `num_levels` levels. Features start at zero.
    pub fn build(points: &[Point3], leaf_voxel: f64, num_levels: usize, dim: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(MifError::EmptyInput("octree points"));
        }
        if num_levels == 0 || dim == 0 || !(leaf_voxel > 0.0) {
            return Err(MifError::Config(format!(
                "octree needs levels >= 1, dim >= 1, leaf > 0 (got {num_levels}, {dim}, {leaf_voxel})"
            )));
        }
        if num_levels > 16 {
            return Err(MifError::Config("at most 16 octree levels".into()));
        }
        let coarse = leaf_voxel * (1u64 << (num_levels - 1)) as f64;
        let lo = points
            .iter()
            .fold(points[0], |acc, p| acc.min(*p));
        let origin = lo - Point3::new(coarse, coarse, coarse);
        let mut tree = LatentOctree {
            origin,
            leaf_voxel,
            num_levels,
            dim,
            tables: vec![HashMap::new(); num_levels],
            features: Vec::new(),
            leaf_cells: HashSet::new(),
        };
        let mut keys: Vec<Vec<u64>> = vec![Vec::new(); num_levels];
        let mut seen: Vec<HashSet<u64>> = vec![HashSet::new(); num_levels];
        for p in points {
            if !p.is_finite() {
                return Err(MifError::Config("non-finite octree point".into()));
            }
            for (level, (seen, keys)) in seen.iter_mut().zip(keys.iter_mut()).enumerate() {
                let (base, _) = tree.cell(*p, level);
                let base = base.ok_or(MifError::IndexOverflow {
                    i: u64::MAX,
                    j: u64::MAX,
                    k: u64::MAX,
                })?;
                if level == 0 {
                    tree.leaf_cells
                        .insert(morton_encode(base[0], base[1], base[2])?);
                }
                for c in 0..8u64 {
                    let code = morton_encode(base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1))?;
                    if seen.insert(code) {
                        keys.push(code);
                    }
                }
            }
        }
        let mut next = 0u32;
        for (level, mut ks) in keys.into_iter().enumerate() {
            ks.sort_unstable();
            for k in ks {
                tree.tables[level].insert(k, next);
                next += 1;
            }
        }
        tree.features = vec![0.0; next as usize * dim];
        Ok(tree)
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn leaf_voxel(&self) -> f64 {
        self.leaf_voxel
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_features(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.tables[level].len()
    }

    pub fn voxel_size(&self, level: usize) -> f64 {
        self.leaf_voxel * (1u64 << level) as f64
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn feature(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    pub fn feature_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.features[index * self.dim..(index + 1) * self.dim]
    }

    /// Feature index of the lattice node `(i, j, k)` at `level`.
    pub fn node_index(&self, level: usize, i: u64, j: u64, k: u64) -> Option<usize> {
        let code = morton_encode(i, j, k).ok()?;
        self.tables[level].get(&code).map(|v| *v as usize)
    }

    pub fn node_position(&self, level: usize, i: u64, j: u64, k: u64) -> Point3 {
        self.origin + Point3::new(i as f64, j as f64, k as f64) * self.voxel_size(level)
    }

    /// Base voxel index at `level` (None outside the addressable lattice) and
    /// fractional position within it.
    fn cell(&self, p: Point3, level: usize) -> (Option<[u64; 3]>, [f64; 3]) {
        let s = self.voxel_size(level);
        let g = (p - self.origin) / s;
        let fl = [g.x.floor(), g.y.floor(), g.z.floor()];
        let frac = [g.x - fl[0], g.y - fl[1], g.z - fl[2]];
        let in_range = fl.iter().all(|v| *v >= 0.0 && *v + 1.0 < AXIS_LIMIT as f64);
        let base = in_range.then(|| [fl[0] as u64, fl[1] as u64, fl[2] as u64]);
        (base, frac)
    }

    /// Interpolation record for `p` without touching feature values.
    pub fn locate(&self, p: Point3) -> InterpRecord {
        let mut levels = Vec::with_capacity(self.num_levels);
        let mut lookups = 0;
        for level in 0..self.num_levels {
            let (base, frac) = self.cell(p, level);
            let mut corners = [MISSING; 8];
            if let Some(b) = base {
                for (c, slot) in corners.iter_mut().enumerate() {
                    let c = c as u64;
                    let code = spread_bits(b[0] + (c & 1))
                        | (spread_bits(b[1] + ((c >> 1) & 1)) << 1)
                        | (spread_bits(b[2] + ((c >> 2) & 1)) << 2);
                    lookups += 1;
                    if let Some(ix) = self.tables[level].get(&code) {
                        *slot = *ix;
                    }
                }
            }
            levels.push(LevelInterp {
                corners,
                weights: corner_weights(frac),
                frac,
                voxel: self.voxel_size(level),
            });
        }
        InterpRecord { levels, lookups }
    }

    /// Writes the interpolated latent of `rec` into `out` (length `dim`).
    pub fn gather(&self, rec: &InterpRecord, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for lv in &rec.levels {
            for (c, w) in lv.corners.iter().zip(lv.weights) {
                if *c == MISSING {
                    continue;
                }
                let f = self.feature(*c as usize);
                for (o, x) in out.iter_mut().zip(f) {
                    *o += w * x;
                }
            }
        }
    }

    pub fn query(&self, p: Point3) -> (Vec<f64>, InterpRecord) {
        let rec = self.locate(p);
        let mut z = vec![0.0; self.dim];
        self.gather(&rec, &mut z);
        (z, rec)
    }

    /// `∂latent/∂p` as a row-major `3 × dim` matrix.
    pub fn spatial_jacobian(&self, rec: &InterpRecord) -> Vec<f64> {
        let mut jac = vec![0.0; 3 * self.dim];
        self.spatial_jacobian_into(rec, &mut jac);
        jac
    }

    pub fn spatial_jacobian_into(&self, rec: &InterpRecord, jac: &mut [f64]) {
        let d = self.dim;
        jac.iter_mut().for_each(|v| *v = 0.0);
        for lv in &rec.levels {
            let grads = corner_weight_gradients(lv.frac, lv.voxel);
            for (c, g) in lv.corners.iter().zip(grads) {
                if *c == MISSING {
                    continue;
                }
                let f = self.feature(*c as usize);
                for axis in 0..3 {
                    let row = &mut jac[axis * d..(axis + 1) * d];
                    for (o, x) in row.iter_mut().zip(f) {
                        *o += g[axis] * x;
                    }
                }
            }
        }
    }

    /// `grads[corner] += w_corner · upstream` for every allocated corner.
    pub fn accumulate_latent_grads(&self, rec: &InterpRecord, upstream: &[f64], grads: &mut GradStore) {
        if upstream.iter().all(|v| *v == 0.0) {
            return;
        }
        let d = self.dim;
        for lv in &rec.levels {
            for (c, w) in lv.corners.iter().zip(lv.weights) {
                if *c == MISSING || w == 0.0 {
                    continue;
                }
                let c = *c as usize;
                grads.touched[c] = true;
                for (g, u) in grads.values[c * d..(c + 1) * d].iter_mut().zip(upstream) {
                    *g += w * u;
                }
            }
        }
    }

    /// Backpropagates an upstream gradient on the spatial Jacobian (`3 × dim`,
    /// row-major) into the corner features.
    pub fn accumulate_jacobian_grads(&self, rec: &InterpRecord, upstream: &[f64], grads: &mut GradStore) {
        let d = self.dim;
        for lv in &rec.levels {
            let wg = corner_weight_gradients(lv.frac, lv.voxel);
            for (c, g) in lv.corners.iter().zip(wg) {
                if *c == MISSING {
                    continue;
                }
                let c = *c as usize;
                grads.touched[c] = true;
                let row = &mut grads.values[c * d..(c + 1) * d];
                for axis in 0..3 {
                    let up = &upstream[axis * d..(axis + 1) * d];
                    for (o, u) in row.iter_mut().zip(up) {
                        *o += g[axis] * u;
                    }
                }
            }
        }
    }

    pub fn new_grad_store(&self) -> GradStore {
        GradStore::new(self.num_features(), self.dim)
    }

    /// True if the leaf voxel containing `p`, or one of its 26 neighbours, was
    /// allocated at build time.
    pub fn near_allocated_leaf(&self, p: Point3) -> bool {
        let g = (p - self.origin) / self.leaf_voxel;
        let base = [g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64];
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (i, j, k) = (base[0] + dx, base[1] + dy, base[2] + dz);
                    if i < 0 || j < 0 || k < 0 {
                        continue;
                    }
                    if let Ok(code) = morton_encode(i as u64, j as u64, k as u64) {
                        if self.leaf_cells.contains(&code) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    pub fn num_leaf_cells(&self) -> usize {
        self.leaf_cells.len()
    }

    const MAGIC: &'static [u8] = b"MIFOCT1";

    pub(crate) fn write_section<W: Write>(&self, w: &mut Writer<W>) -> Result<()> {
        w.tag(Self::MAGIC)?;
        w.f64s(&self.origin.to_array())?;
        w.f64(self.leaf_voxel)?;
        w.u32(self.num_levels as u32)?;
        w.u32(self.dim as u32)?;
        for table in &self.tables {
            let mut entries: Vec<(u64, u32)> = table.iter().map(|(k, v)| (*k, *v)).collect();
            entries.sort_unstable();
            w.u64(entries.len() as u64)?;
            for (k, _) in &entries {
                w.u64(*k)?;
            }
            for (_, ix) in &entries {
                w.f64s(self.feature(*ix as usize))?;
            }
        }
        let mut leaves: Vec<u64> = self.leaf_cells.iter().copied().collect();
        leaves.sort_unstable();
        w.u64(leaves.len() as u64)?;
        for c in leaves {
            w.u64(c)?;
        }
        Ok(())
    }

    pub(crate) fn read_section<R: Read>(r: &mut Reader<R>) -> Result<Self> {
        r.expect_tag(Self::MAGIC)?;
        let o = r.f64s(3)?;
        let leaf_voxel = r.f64()?;
        let num_levels = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if num_levels == 0 || num_levels > 16 || dim == 0 || dim > 4096 {
            return Err(MifError::Checkpoint("bad octree header".into()));
        }
        let mut tables = Vec::with_capacity(num_levels);
        let mut features = Vec::new();
        let mut next = 0u32;
        for _ in 0..num_levels {
            let n = r.len(1 << 32)?;
            let mut table = HashMap::with_capacity(n);
            for _ in 0..n {
                table.insert(r.u64()?, next);
                next += 1;
            }
            features.extend(r.f64s(n * dim)?);
            tables.push(table);
        }
        let nl = r.len(1 << 40)?;
        let mut leaf_cells = HashSet::with_capacity(nl);
        for _ in 0..nl {
            leaf_cells.insert(r.u64()?);
        }
        Ok(LatentOctree {
            origin: Point3::new(o[0], o[1], o[2]),
            leaf_voxel,
            num_levels,
            dim,
            tables,
            features,
            leaf_cells,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bit-by-bit reference interleave.
    fn interleave_loop(i: u64, j: u64, k: u64) -> u64 {
        let mut code = 0u64;
        for b in 0..21 {
            code |= ((i >> b) & 1) << (3 * b);
            code |= ((j >> b) & 1) << (3 * b + 1);
            code |= ((k >> b) & 1) << (3 * b + 2);
        }
        code
    }

    #[test]
    fn morton_examples() {
        assert_eq!(morton_encode(0, 0, 0).unwrap(), 0);
        assert_eq!(morton_encode(1, 1, 1).unwrap(), 7);
        assert_eq!(morton_encode(5, 3, 9).unwrap(), interleave_loop(5, 3, 9));
        assert_eq!(interleave_loop(5, 3, 9), 2135);
        assert_eq!(morton_decode(0), (0, 0, 0));
        assert_eq!(morton_decode(7), (1, 1, 1));
        assert!(matches!(morton_encode(1 << 21, 0, 0), Err(MifError::IndexOverflow { .. })));
        let max = (1 << 21) - 1;
        assert!(morton_encode(max, max, max).unwrap() < 1 << 63);
    }

    proptest! {
        #[test]
        fn morton_matches_loop_and_round_trips(i in 0u64..(1 << 21), j in 0u64..(1 << 21), k in 0u64..(1 << 21)) {
            let c = morton_encode(i, j, k).unwrap();
            prop_assert_eq!(c, interleave_loop(i, j, k));
            prop_assert_eq!(morton_decode(c), (i, j, k));
        }
    }

    fn random_tree(rng: &mut ChaCha8Rng, levels: usize, dim: usize, n: usize) -> LatentOctree {
        let pts: Vec<Point3> = (0..n)
            .map(|_| Point3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        let mut t = LatentOctree::build(&pts, 0.2, levels, dim).unwrap();
        for v in t.features_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn allocation_counts() {
        let p = [Point3::new(0.31, 0.47, 0.52)];
        let t1 = LatentOctree::build(&p, 0.2, 1, 4).unwrap();
        assert_eq!(t1.num_features(), 8);
        let t3 = LatentOctree::build(&p, 0.2, 3, 4).unwrap();
        assert!(t3.num_features() <= 24);
        assert_eq!(t3.num_features(), 24);
        let same_leaf = [Point3::new(0.31, 0.47, 0.52), Point3::new(0.32, 0.48, 0.53)];
        assert_eq!(LatentOctree::build(&same_leaf, 0.2, 3, 4).unwrap(), t3);
        assert!(matches!(LatentOctree::build(&[], 0.2, 3, 4), Err(MifError::EmptyInput(_))));
        // neighbouring voxels share a face of four corners
        let two = [Point3::new(0.31, 0.47, 0.52), Point3::new(0.51, 0.47, 0.52)];
        let t = LatentOctree::build(&two, 0.2, 1, 4).unwrap();
        let shared = t.num_features();
        assert!(shared == 12 || shared == 8, "{shared}");
    }

    #[test]
    fn corner_and_center_identities() {
        let p = [Point3::new(0.31, 0.47, 0.52)];
        let mut t = LatentOctree::build(&p, 0.2, 1, 3).unwrap();
        for (i, v) in t.features_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let rec = t.locate(p[0]);
        let base = rec.levels[0].corners;
        // the lattice node of corner 0
        let (i, j, k) = {
            let g = (p[0] - t.origin()) / 0.2;
            (g.x.floor() as u64, g.y.floor() as u64, g.z.floor() as u64)
        };
        let node = t.node_position(0, i, j, k);
        let (z, rec) = t.query(node);
        let idx = t.node_index(0, i, j, k).unwrap();
        assert_eq!(base[0] as usize, idx);
        let hot = rec.levels[0].weights.iter().filter(|w| **w == 1.0).count();
        assert_eq!(hot, 1);
        for (a, b) in z.iter().zip(t.feature(idx)) {
            assert!((a - b).abs() < 1e-12);
        }
        let center = node + Point3::new(0.1, 0.1, 0.1);
        let rec = t.locate(center);
        for w in rec.levels[0].weights {
            assert!((w - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_give_zero_latent_and_missing_corners_read_zero() {
        let t = LatentOctree::build(&[Point3::new(0.5, 0.5, 0.5)], 0.2, 3, 8).unwrap();
        let (z, _) = t.query(Point3::new(0.55, 0.41, 0.6));
        assert!(z.iter().all(|v| *v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tree(&mut rng, 2, 4, 5);
        let (z, rec) = t.query(Point3::new(50.0, 50.0, 50.0));
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(rec.levels.iter().all(|l| l.corners.iter().all(|c| *c == MISSING)));
        let (z, _) = t.query(Point3::new(-50.0, 0.0, 0.0));
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weights_sum_to_one_and_lookup_count_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tree(&mut rng, 3, 4, 50);
        for _ in 0..200 {
            let p = Point3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let rec = t.locate(p);
            assert_eq!(rec.lookups, 3 * 8);
            for lv in &rec.levels {
                assert!(lv.weights.iter().all(|w| *w >= 0.0));
                assert!((lv.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_features_give_zero_jacobian() {
        let p = Point3::new(0.6, 0.55, 0.7);
        let mut t = LatentOctree::build(&[p], 0.25, 1, 2).unwrap();
        t.features_mut().iter_mut().for_each(|v| *v = 0.7);
        let jac = t.spatial_jacobian(&t.locate(p));
        assert!(jac.iter().all(|v| v.abs() < 1e-12));
    }

    fn fd_jacobian(t: &LatentOctree, p: Point3, h: f64) -> Vec<f64> {
        let d = t.dim();
        let mut out = vec![0.0; 3 * d];
        for axis in 0..3 {
            let mut e = [0.0; 3];
            e[axis] = h;
            let e = Point3::from_array(e);
            let (zp, _) = t.query(p + e);
            let (zm, _) = t.query(p - e);
            for c in 0..d {
                out[axis * d + c] = (zp[c] - zm[c]) / (2.0 * h);
            }
        }
        out
    }

    fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs)
    }

    #[test]
    fn jacobian_single_hot_corner_matches_fd() {
        let p = Point3::new(0.5, 0.5, 0.5);
        let mut t = LatentOctree::build(&[p], 0.2, 1, 1).unwrap();
        let rec = t.locate(p);
        let c = rec.levels[0].corners[5] as usize;
        t.feature_mut(c)[0] = 1.3;
        let q = Point3::new(0.47, 0.53, 0.51);
        let analytic = t.spatial_jacobian(&t.locate(q));
        let fd = fd_jacobian(&t, q, 1e-6);
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(rel_close(*a, *b, 1e-6, 1e-9), "{a} vs {b}");
        }
    }

    #[test]
    fn jacobian_varies_linearly_along_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tree(&mut rng, 1, 3, 1);
        let rec0 = t.locate(Point3::new(0.5, 0.5, 0.5));
        let lv = rec0.levels[0];
        // three collinear points inside one voxel along y
        let corner = Point3::new(0.5, 0.5, 0.5) - Point3::from_array(lv.frac) * lv.voxel;
        let at = |s: f64| t.spatial_jacobian(&t.locate(corner + Point3::new(0.3, s, 0.6) * lv.voxel));
        let (a, b, c) = (at(0.2), at(0.5), at(0.8));
        for i in 0..a.len() {
            assert!((b[i] - 0.5 * (a[i] + c[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn random_jacobians_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = random_tree(&mut rng, 3, 4, 20);
            let q = Point3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let analytic = t.spatial_jacobian(&t.locate(q));
            let fd = fd_jacobian(&t, q, 1e-7);
            for (a, b) in analytic.iter().zip(&fd) {
                assert!(rel_close(*a, *b, 1e-6, 1e-7), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn latent_grads_match_linearity_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_tree(&mut rng, 3, 4, 30);
        let q = Point3::new(0.4, 0.6, 0.5);
        let rec = t.locate(q);
        let upstream: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = t.new_grad_store();
        t.accumulate_latent_grads(&rec, &upstream, &mut g);
        let h = 1e-3;
        for c in g.touched_rows().collect::<Vec<_>>() {
            for k in 0..4 {
                let mut tp = t.clone();
                tp.feature_mut(c)[k] += h;
                let (zp, _) = tp.query(q);
                let (z0, _) = t.query(q);
                let dl: f64 = zp.iter().zip(&z0).zip(&upstream).map(|((a, b), u)| (a - b) * u).sum::<f64>() / h;
                assert!((dl - g.row(c)[k]).abs() < 1e-9, "{dl} vs {}", g.row(c)[k]);
            }
        }
        let mut g0 = t.new_grad_store();
        t.accumulate_latent_grads(&rec, &[0.0; 4], &mut g0);
        assert_eq!(g0, t.new_grad_store());
    }

    #[test]
    fn corner_exact_query_sends_full_upstream_to_one_feature_per_level() {
        // leaf 0.25 and two levels put the origin exactly at zero
        let t = LatentOctree::build(&[Point3::new(0.5, 0.5, 0.5)], 0.25, 2, 2).unwrap();
        assert_eq!(t.origin(), Point3::ZERO);
        let node = t.node_position(1, 1, 1, 1);
        assert!(t.node_index(1, 1, 1, 1).is_some());
        let rec = t.locate(node);
        let mut g = t.new_grad_store();
        t.accumulate_latent_grads(&rec, &[1.0, -2.0], &mut g);
        // level 1 node is also a level 0 node (lattice nesting), so one hit per level
        assert_eq!(g.touched_rows().count(), 2);
        for r in g.touched_rows() {
            assert_eq!(g.row(r), &[1.0, -2.0]);
        }
    }

    #[test]
    fn jacobian_grads_match_fd_of_contracted_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tree(&mut rng, 2, 3, 10);
        let q = Point3::new(0.45, 0.55, 0.35);
        let rec = t.locate(q);
        let up: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = t.new_grad_store();
        t.accumulate_jacobian_grads(&rec, &up, &mut g);
        let contract = |tree: &LatentOctree| -> f64 {
            tree.spatial_jacobian(&rec).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let base = contract(&t);
        for c in g.touched_rows().collect::<Vec<_>>() {
            let mut tp = t.clone();
            tp.feature_mut(c)[1] += 1e-3;
            let fd = (contract(&tp) - base) / 1e-3;
            assert!((fd - g.row(c)[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn continuous_across_voxel_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_tree(&mut rng, 3, 4, 200);
        for level in 0..1 {
            let s = t.voxel_size(level);
            for _ in 0..50 {
                let p = Point3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
                // snap x onto a level-0 face
                let gx = ((p.x - t.origin().x) / s).round();
                let x = t.origin().x + gx * s;
                let (a, _) = t.query(Point3::new(x - 1e-9, p.y, p.z));
                let (b, _) = t.query(Point3::new(x + 1e-9, p.y, p.z));
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn section_round_trip_and_near_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_tree(&mut rng, 3, 8, 40);
        let mut w = Writer::new(Vec::new());
        t.write_section(&mut w).unwrap();
        let bytes = w.into_inner();
        let back = LatentOctree::read_section(&mut Reader::new(bytes.as_slice())).unwrap();
        assert_eq!(back, t);
        assert!(t.near_allocated_leaf(Point3::new(0.5, 0.5, 0.5)));
        assert!(!t.near_allocated_leaf(Point3::new(5.0, 5.0, 5.0)));
    }
}
