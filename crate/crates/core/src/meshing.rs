//! Dense grid evaluation and marching-cubes extraction of the zero level-set.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::decoder::FieldModel;
use crate::error::{MifError, Result};
use crate::geometry::{Aabb, Point3};
use crate::mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::par;

pub const DEFAULT_CELL_BUDGET: usize = 1 << 27;

/// Value stored at grid nodes that were skipped by the occupancy mask.
const MASKED_VALUE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub origin: Point3,
    pub spacing: f64,
    pub dims: [usize; 3],
    /// x fastest, then y, then z.
    pub values: Vec<f64>,
    /// Per-cell activity, `(nx−1)(ny−1)(nz−1)` entries; `None` means all active.
    pub active: Option<Vec<bool>>,
}

impl ScalarGrid {
    pub fn node(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> usize {
        i + (self.dims[0] - 1) * (j + (self.dims[1] - 1) * k)
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Point3 {
        self.origin + Point3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().map(|d| d.saturating_sub(1)).product()
    }

    pub fn cell_active(&self, c: usize) -> bool {
        self.active.as_ref().is_none_or(|a| a[c])
    }

    /// Multiplies every value by `s`, leaving the mask untouched.
    pub fn scaled(&self, s: f64) -> ScalarGrid {
        ScalarGrid {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// Node counts per axis covering `bounds` at `spacing` (at least 2).
pub fn grid_dims(bounds: &Aabb, spacing: f64) -> [usize; 3] {
    let e = bounds.extent();
    [e.x, e.y, e.z].map(|x| ((x / spacing - 1e-9).ceil().max(1.0) as usize) + 1)
}

fn check_grid(bounds: &Aabb, spacing: f64, budget: usize) -> Result<[usize; 3]> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(MifError::Config(format!("grid spacing must be > 0, got {spacing}")));
    }
    if bounds.is_empty() {
        return Err(MifError::EmptyInput("grid bounds"));
    }
    let dims = grid_dims(bounds, spacing);
    let cells = dims.iter().map(|d| (*d - 1) as u128).product::<u128>();
    if cells > budget as u128 {
        return Err(MifError::GridTooLarge {
            cells: cells.min(u64::MAX as u128) as u64,
            budget: budget as u64,
        });
    }
    Ok(dims)
}

/// Samples `f` at every node of the grid over `bounds`.
pub fn sample_grid<F>(bounds: &Aabb, spacing: f64, budget: usize, f: F) -> Result<ScalarGrid>
where
    F: Fn(Point3) -> f64 + Sync + Send,
{
    let dims = check_grid(bounds, spacing, budget)?;
    let mut grid = ScalarGrid {
        origin: bounds.min,
        spacing,
        dims,
        values: vec![0.0; dims[0] * dims[1] * dims[2]],
        active: None,
    };
    let plane = dims[0] * dims[1];
    let origin = grid.origin;
    par::for_each_chunk_mut(&mut grid.values, plane, |k, slab| {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = origin + Point3::new(i as f64, j as f64, k as f64) * spacing;
                slab[i + dims[0] * j] = f(p);
            }
        }
    });
    Ok(grid)
}

/// Evaluates the field on the grid. With `masked`, only cells with an
/// allocated octree leaf within one leaf voxel are evaluated and extracted.
pub fn evaluate_grid(model: &FieldModel, bounds: &Aabb, spacing: f64, masked: bool) -> Result<ScalarGrid> {
    evaluate_grid_with_budget(model, bounds, spacing, masked, DEFAULT_CELL_BUDGET)
}

pub fn evaluate_grid_with_budget(
    model: &FieldModel,
    bounds: &Aabb,
    spacing: f64,
    masked: bool,
    budget: usize,
) -> Result<ScalarGrid> {
    if !masked {
        let eff = model.decoder.effective();
        let dims = check_grid(bounds, spacing, budget)?;
        let origin = bounds.min;
        let plane = dims[0] * dims[1];
        let mut values = vec![0.0; plane * dims[2]];
        par::for_each_chunk_mut(&mut values, plane, |k, slab| {
            let pts: Vec<Point3> = (0..plane)
                .map(|n| origin + Point3::new((n % dims[0]) as f64, (n / dims[0]) as f64, k as f64) * spacing)
                .collect();
            for (chunk_pts, chunk_out) in pts.chunks(512).zip(slab.chunks_mut(512)) {
                let tape = crate::decoder::forward_batch(model, &eff, chunk_pts);
                chunk_out.copy_from_slice(tape.values.as_slice().expect("contiguous"));
            }
        });
        return Ok(ScalarGrid {
            origin,
            spacing,
            dims,
            values,
            active: None,
        });
    }
    let dims = check_grid(bounds, spacing, budget)?;
    let origin = bounds.min;
    let (cx, cy, cz) = (dims[0] - 1, dims[1] - 1, dims[2] - 1);
    let half = spacing * 0.5;
    let active: Vec<bool> = par::map_range(cz, |k| {
        let mut row = Vec::with_capacity(cx * cy);
        for j in 0..cy {
            for i in 0..cx {
                let c = origin + Point3::new(i as f64, j as f64, k as f64) * spacing + Point3::new(half, half, half);
                row.push(model.tree.near_allocated_leaf(c));
            }
        }
        row
    })
    .concat();
    let mut needed = vec![false; dims[0] * dims[1] * dims[2]];
    for k in 0..cz {
        for j in 0..cy {
            for i in 0..cx {
                if active[i + cx * (j + cy * k)] {
                    for o in CORNER_OFFSETS {
                        needed[(i + o[0]) + dims[0] * ((j + o[1]) + dims[1] * (k + o[2]))] = true;
                    }
                }
            }
        }
    }
    let nodes: Vec<usize> = needed.iter().enumerate().filter(|(_, n)| **n).map(|(i, _)| i).collect();
    let pts: Vec<Point3> = nodes
        .iter()
        .map(|n| {
            let i = n % dims[0];
            let j = (n / dims[0]) % dims[1];
            let k = n / (dims[0] * dims[1]);
            origin + Point3::new(i as f64, j as f64, k as f64) * spacing
        })
        .collect();
    let evaluated = model.eval_points(&pts);
    let mut values = vec![MASKED_VALUE; needed.len()];
    for (n, v) in nodes.iter().zip(evaluated) {
        values[*n] = v;
    }
    Ok(ScalarGrid {
        origin,
        spacing,
        dims,
        values,
        active: Some(active),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|v| *v >= n) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(MifError::Config(format!("invalid triangle {i}: {t:?}")));
            }
        }
        if self.vertices.iter().any(|v| !v.is_finite()) {
            return Err(MifError::Config("non-finite mesh vertex".into()));
        }
        Ok(())
    }

    /// Writes OBJ or binary PLY depending on the extension; `comments` go
    /// into the file header.
    pub fn save(&self, path: &Path, comments: &[String]) -> Result<()> {
        match extension(path).as_deref() {
            Some("obj") => self.write_obj(path, comments),
            Some("ply") => crate::ply::write_binary(path, &self.vertices, &self.triangles, comments),
            _ => Err(MifError::Config(format!("unknown mesh extension: {}", path.display()))),
        }
    }

    pub fn load(path: &Path) -> Result<Mesh> {
        let mesh = match extension(path).as_deref() {
            Some("obj") => Mesh::read_obj(path)?,
            Some("ply") => {
                let data = crate::ply::read(path)?;
                let mut triangles = Vec::new();
                for f in data.faces {
                    fan(&f, &mut triangles);
                }
                Mesh {
                    vertices: data.vertices,
                    triangles,
                }
            }
            _ => return Err(MifError::Config(format!("unknown mesh extension: {}", path.display()))),
        };
        mesh.validate().map_err(|e| MifError::format(path, 0, &e.to_string()))?;
        Ok(mesh)
    }

    fn write_obj(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut s = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()) + 64);
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        fs::write(path, s).map_err(|e| MifError::io(path, e))
    }

    fn read_obj(path: &Path) -> Result<Mesh> {
        let text = fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
        let mut mesh = Mesh::default();
        for (lineno, line) in text.lines().enumerate() {
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("v") => {
                    let xyz: Vec<f64> = tok
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| MifError::format(path, lineno, "malformed vertex"))?;
                    if xyz.len() != 3 {
                        return Err(MifError::format(path, lineno, "vertex needs 3 coordinates"));
                    }
                    mesh.vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for t in tok {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|_| MifError::format(path, lineno, "malformed face index"))?;
                        let n = mesh.vertices.len() as i64;
                        let i = if i < 0 { n + i } else { i - 1 };
                        if i < 0 {
                            return Err(MifError::format(path, lineno, "face index out of range"));
                        }
                        idx.push(i as u32);
                    }
                    fan(&idx, &mut mesh.triangles);
                }
                _ => {}
            }
        }
        Ok(mesh)
    }
}

fn fan(poly: &[u32], out: &mut Vec<[u32; 3]>) {
    for k in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[k], poly[k + 1]]);
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

/// Edge `e` of the cell at base node `(i, j, k)` as `(lower node, axis)`.
fn edge_key(grid: &ScalarGrid, i: usize, j: usize, k: usize, e: usize) -> (usize, usize) {
    let [a, b] = EDGE_CORNERS[e];
    let (oa, ob) = (CORNER_OFFSETS[a], CORNER_OFFSETS[b]);
    let axis = (0..3).find(|x| oa[*x] != ob[*x]).expect("edge spans one axis");
    let lo = if oa[axis] < ob[axis] { oa } else { ob };
    (grid.node(i + lo[0], j + lo[1], k + lo[2]), axis)
}

/// Classic lookup-table marching cubes. Vertices are shared across cells by
/// grid edge; inactive cells emit nothing.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Mesh {
    let [nx, ny, nz] = grid.dims;
    let mut mesh = Mesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let stride = [1, nx, nx * ny];
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                if !grid.cell_active(grid.cell(i, j, k)) {
                    continue;
                }
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                for (c, o) in CORNER_OFFSETS.iter().enumerate() {
                    vals[c] = grid.values[grid.node(i + o[0], j + o[1], k + o[2])];
                    if vals[c] < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let row = &TRIANGLE_TABLE[case];
                let mut tri = [0u32; 3];
                for (n, e) in row.iter().take_while(|e| **e >= 0).enumerate() {
                    let (node, axis) = edge_key(grid, i, j, k, *e as usize);
                    let id = node * 3 + axis;
                    let v = *edge_vertex.entry(id).or_insert_with(|| {
                        let va = grid.values[node];
                        let vb = grid.values[node + stride[axis]];
                        let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                        let ni = node % nx;
                        let nj = (node / nx) % ny;
                        let nk = node / (nx * ny);
                        let pa = grid.position(ni, nj, nk);
                        let mut pb = pa;
                        match axis {
                            0 => pb.x += grid.spacing,
                            1 => pb.y += grid.spacing,
                            _ => pb.z += grid.spacing,
                        }
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    });
                    tri[n % 3] = v;
                    if n % 3 == 2 {
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }
    mesh
}
