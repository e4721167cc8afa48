//! Baking trained fields into a layered triangle mesh plus RGBA atlases.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::hash::Hasher;
use std::path::Path;

use fnv::{FnvHashMap, FnvHasher};
use nalgebra::{Matrix3, Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{Appearance, AppearanceError, FrameSelector, TextureQuery};
use crate::autodiff::Matrix;
use crate::geometry::{hemisphere_rays_within, lattice, Aabb, UvMapper, Vec3};
use crate::imaging::{Image, ImageError};
use crate::manifold::{intersect_many, ManifoldError, ScalarField, TraceConfig};
use crate::volren::Layers;

pub const ASSET_FORMAT: &str = "facefolds-asset";
pub const ASSET_VERSION: u32 = 1;
pub const MESH_MAGIC: &[u8; 8] = b"FFMESH01";
/// Bake samples must sit this close to their level set.
pub const LEVEL_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("invalid export configuration: {0}")]
    Config(String),
    #[error("layer {layer}: only {valid} valid bake samples (need at least 3)")]
    SparseLayer { layer: usize, valid: usize },
    #[error("layer {layer}: no fully valid grid quad to triangulate")]
    NoQuads { layer: usize },
    #[error("cannot decimate to {budget} triangles: {reason}")]
    Decimation { budget: usize, reason: String },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("asset: {0}")]
    Format(String),
    #[error("{file}: checksum mismatch")]
    Checksum { file: String },
    #[error("asset manifest and payload disagree: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Bake resolution R (R×R rays per layer).
    pub bake_resolution: usize,
    /// Target mesh resolution R_m; the budget is 2·(R_m − 1)² triangles.
    pub mesh_resolution: usize,
    /// Texture tile resolution R_t.
    pub texture_resolution: usize,
    /// Frames to bake; `None` bakes all of them.
    pub frames: Option<usize>,
    /// Samples per bake ray.
    pub samples: usize,
    /// The bake grid is scaled to this chart magnitude so the poles and the
    /// x' = 0 rim stay inside the chart; `None` means 1 − 1/R.
    pub chart_limit: Option<f64>,
    pub frame_rate: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            bake_resolution: 128,
            mesh_resolution: 128,
            texture_resolution: 128,
            frames: None,
            samples: 256,
            chart_limit: None,
            frame_rate: 30.0,
        }
    }
}

impl ExportConfig {
    pub fn validate(&self) -> Result<(), ExportError> {
        let bad = |m: &str| Err(ExportError::Config(m.to_string()));
        if !(self.bake_resolution >= self.mesh_resolution && self.mesh_resolution >= 2) {
            return bad("need R >= R_m >= 2");
        }
        if self.texture_resolution < 16 {
            return bad("texture resolution must be at least 16");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if self.chart_limit.is_some_and(|l| !(l > 0.0 && l < 1.0)) {
            return bad("chart_limit must lie in (0, 1)");
        }
        if self.frames == Some(0) {
            return bad("frames must be positive");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive");
        }
        Ok(())
    }

    pub fn triangle_budget(&self) -> usize {
        let r = self.mesh_resolution - 1;
        2 * r * r
    }
}

/// R×R bake samples of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrid {
    pub layer: usize,
    pub resolution: usize,
    pub points: Vec<Option<Vec3>>,
    pub uvs: Vec<[f64; 2]>,
}

impl LayerGrid {
    pub fn valid_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }
}

/// Traces the hemisphere grid and keeps each layer's first crossing per ray,
/// refined until the field is within [`LEVEL_TOL`] of the level.
pub fn bake_geometry<F: ScalarField + Sync>(
    layers: &Layers<F>,
    resolution: usize,
    samples: usize,
    chart_limit: Option<f64>,
    bounds: Option<Aabb>,
) -> Result<Vec<LayerGrid>, ExportError> {
    if resolution < 2 {
        return Err(ExportError::Config("bake resolution must be at least 2".into()));
    }
    let limit = chart_limit.unwrap_or(1.0 - 1.0 / resolution as f64);
    let grid = hemisphere_rays_within(resolution, layers.mapper, limit);
    let trace = TraceConfig {
        samples,
        t_near: 0.0,
        t_far: 1.0,
        max_crossings_per_manifold: 1,
        bounds,
    };
    let hits: Vec<_> = grid
        .rays
        .par_chunks(512)
        .map(|chunk| intersect_many(layers.field, layers.s_values, layers.mapper, chunk, &trace))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    let n = layers.s_values.len();
    let mut out: Vec<LayerGrid> = (0..n)
        .map(|layer| LayerGrid {
            layer,
            resolution,
            points: vec![None; grid.rays.len()],
            uvs: grid.uvs.clone(),
        })
        .collect();

    // Batched Illinois refinement of every bracket.
    struct Job {
        ray: usize,
        layer: usize,
        a: (f64, f64),
        b: (f64, f64),
        side: i8,
    }
    let mut jobs = Vec::new();
    for (r, samples) in hits.iter().enumerate() {
        for s in samples {
            if s.uv.is_none() {
                continue;
            }
            let sv = layers.s_values[s.layer];
            let br = s.bracket;
            jobs.push(Job {
                ray: r,
                layer: s.layer,
                a: (br.t_a, br.g_a - sv),
                b: (br.t_b, br.g_b - sv),
                side: 0,
            });
        }
    }
    let t_of = |j: &Job| {
        let (ta, fa) = j.a;
        let (tb, fb) = j.b;
        if fb == fa {
            0.5 * (ta + tb)
        } else {
            ta - fa * (tb - ta) / (fb - fa)
        }
    };
    for _ in 0..40 {
        let ts: Vec<f64> = jobs.iter().map(t_of).collect();
        let pts: Vec<Vec3> = jobs.iter().zip(&ts).map(|(j, &t)| grid.rays[j.ray].at(t)).collect();
        let g = layers.field.eval_points(&points_matrix(&pts));
        let mut converged = true;
        for ((j, &t), gv) in jobs.iter_mut().zip(&ts).zip(g) {
            let f = gv - layers.s_values[j.layer];
            if f.abs() < 1e-9 || (j.b.0 - j.a.0).abs() < 1e-12 {
                j.a = (t, f);
                j.b = (t, f);
                continue;
            }
            converged = false;
            if (f < 0.0) == (j.a.1 < 0.0) {
                j.a = (t, f);
                if j.side == -1 {
                    j.b.1 *= 0.5;
                }
                j.side = -1;
            } else {
                j.b = (t, f);
                if j.side == 1 {
                    j.a.1 *= 0.5;
                }
                j.side = 1;
            }
        }
        if converged {
            break;
        }
    }
    let ts: Vec<f64> = jobs.iter().map(t_of).collect();
    let pts: Vec<Vec3> = jobs.iter().zip(&ts).map(|(j, &t)| grid.rays[j.ray].at(t)).collect();
    let g = layers.field.eval_points(&points_matrix(&pts));
    for ((j, p), gv) in jobs.iter().zip(pts).zip(g) {
        if (gv - layers.s_values[j.layer]).abs() < LEVEL_TOL && layers.mapper.project(&p).is_ok() {
            out[j.layer].points[j.ray] = Some(p);
        }
    }
    for g in &out {
        let valid = g.valid_count();
        if valid < 3 {
            return Err(ExportError::SparseLayer { layer: g.layer, valid });
        }
    }
    Ok(out)
}

fn points_matrix(pts: &[Vec3]) -> Matrix {
    Matrix::from_shape_fn((pts.len(), 3), |(i, k)| pts[i][k])
}

/// Triangle mesh in double precision, used while exporting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangles[f].map(|i| self.positions[i as usize]);
        (b - a).cross(&(c - a))
    }
}

/// Two triangles per fully valid grid quad, wound so normals face away
/// from `center`.
pub fn triangulate(grid: &LayerGrid, center: Vec3) -> Result<Mesh, ExportError> {
    let r = grid.resolution;
    let mut index = vec![u32::MAX; r * r];
    let mut mesh = Mesh::default();
    for (k, p) in grid.points.iter().enumerate() {
        if let Some(p) = p {
            index[k] = mesh.positions.len() as u32;
            mesh.positions.push(*p);
            mesh.uvs.push(grid.uvs[k]);
        }
    }
    for i in 0..r - 1 {
        for j in 0..r - 1 {
            let q = [i * r + j, i * r + j + 1, (i + 1) * r + j, (i + 1) * r + j + 1].map(|k| index[k]);
            if q.contains(&u32::MAX) {
                continue;
            }
            for mut t in [[q[0], q[2], q[3]], [q[0], q[3], q[1]]] {
                let [a, b, c] = t.map(|v| mesh.positions[v as usize]);
                let n = (b - a).cross(&(c - a));
                if n.dot(&((a + b + c) / 3.0 - center)) < 0.0 {
                    t.swap(1, 2);
                }
                mesh.triangles.push(t);
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(ExportError::NoQuads { layer: grid.layer });
    }
    Ok(mesh)
}

type Quadric = Matrix4<f64>;

fn plane_quadric(n: Vec3, p: Vec3, weight: f64) -> Quadric {
    let v = Vector4::new(n.x, n.y, n.z, -n.dot(&p));
    v * v.transpose() * weight
}

fn quadric_cost(q: &Quadric, p: &Vec3) -> f64 {
    let v = Vector4::new(p.x, p.y, p.z, 1.0);
    (v.transpose() * q * v)[0].max(0.0)
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
    stamps: (u32, u32),
    target: Vec3,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Min-heap on cost, then on vertex ids for determinism.
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost
            .total_cmp(&self.cost)
            .then_with(|| (o.a, o.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

struct Decimator {
    pos: Vec<Vec3>,
    uv: Vec<[f64; 2]>,
    quad: Vec<Quadric>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vfaces: Vec<Vec<usize>>,
    alive: Vec<bool>,
    stamp: Vec<u32>,
    live_faces: usize,
}

const BOUNDARY_WEIGHT: f64 = 1e3;

impl Decimator {
    fn new(mesh: &Mesh) -> Self {
        let nv = mesh.positions.len();
        let faces: Vec<[usize; 3]> = mesh.triangles.iter().map(|t| t.map(|i| i as usize)).collect();
        let mut vfaces = vec![Vec::new(); nv];
        for (f, t) in faces.iter().enumerate() {
            for &v in t {
                vfaces[v].push(f);
            }
        }
        let mut quad = vec![Quadric::zeros(); nv];
        let mut edge_faces: FnvHashMap<(usize, usize), Vec<usize>> = FnvHashMap::default();
        for (f, t) in faces.iter().enumerate() {
            let n = mesh.face_normal(f);
            let area = 0.5 * n.norm();
            if area > 0.0 {
                let k = plane_quadric(n.normalize(), mesh.positions[t[0]], area);
                for &v in t {
                    quad[v] += k;
                }
            }
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                edge_faces.entry((a.min(b), a.max(b))).or_default().push(f);
            }
        }
        // Boundary edges get a perpendicular constraint plane.
        let mut boundary: Vec<_> = edge_faces.iter().filter(|(_, fs)| fs.len() == 1).collect();
        boundary.sort_by_key(|(e, _)| **e);
        for (&(a, b), fs) in boundary {
            let n = mesh.face_normal(fs[0]);
            let e = mesh.positions[b] - mesh.positions[a];
            let m = e.cross(&n);
            if m.norm() > 0.0 {
                let k = plane_quadric(m.normalize(), mesh.positions[a], BOUNDARY_WEIGHT * e.norm_squared());
                quad[a] += k;
                quad[b] += k;
            }
        }
        Self {
            pos: mesh.positions.clone(),
            uv: mesh.uvs.clone(),
            quad,
            live_faces: faces.len(),
            face_alive: vec![true; faces.len()],
            faces,
            vfaces,
            alive: vec![true; nv],
            stamp: vec![0; nv],
        }
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.vfaces[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&u| u != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn edge_face_count(&self, a: usize, b: usize) -> usize {
        self.vfaces[a].iter().filter(|&&f| self.faces[f].contains(&b)).count()
    }

    fn is_boundary_vertex(&self, v: usize) -> bool {
        self.neighbors(v).into_iter().any(|u| self.edge_face_count(v, u) == 1)
    }

    /// Target positions worth trying for collapsing `a`–`b`, with their costs.
    fn targets(&self, a: usize, b: usize) -> Vec<(f64, Vec3)> {
        let q = self.quad[a] + self.quad[b];
        let (pa, pb) = (self.pos[a], self.pos[b]);
        let mid = 0.5 * (pa + pb);
        let mut options = Vec::with_capacity(4);
        let m3: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into();
        let rhs = -q.fixed_view::<3, 1>(0, 3).into_owned();
        let scale = m3.norm().max(f64::MIN_POSITIVE);
        if m3.determinant().abs() > 1e-12 * scale * scale * scale {
            if let Some(inv) = m3.try_inverse() {
                let x = inv * rhs;
                if (x - mid).norm() <= 2.0 * (pb - pa).norm() {
                    options.push(x);
                }
            }
        }
        options.extend([pa, pb, mid]);
        options.into_iter().map(|p| (quadric_cost(&q, &p), p)).collect()
    }

    fn make(&self, a: usize, b: usize, (cost, target): (f64, Vec3)) -> Candidate {
        Candidate {
            cost,
            a,
            b,
            stamps: (self.stamp[a], self.stamp[b]),
            target,
        }
    }

    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let best = self
            .targets(a, b)
            .into_iter()
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .expect("non-empty");
        self.make(a, b, best)
    }

    /// The cheapest target that passes [`Self::collapse_ok`] right now.
    fn legal_candidate(&self, a: usize, b: usize) -> Option<Candidate> {
        self.targets(a, b)
            .into_iter()
            .filter(|(_, p)| self.collapse_ok(a, b, p))
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .map(|t| self.make(a, b, t))
    }

    fn collapse_ok(&self, a: usize, b: usize, target: &Vec3) -> bool {
        let shared = self.edge_face_count(a, b);
        if shared == 0 {
            return false;
        }
        // Link condition keeps the surface manifold.
        let na = self.neighbors(a);
        let nb = self.neighbors(b);
        let common = na.iter().filter(|u| nb.binary_search(u).is_ok()).count();
        if common != shared {
            return false;
        }
        if shared == 2 && self.is_boundary_vertex(a) && self.is_boundary_vertex(b) {
            return false;
        }
        // No face may flip or degenerate.
        for &v in &[a, b] {
            for &f in &self.vfaces[v] {
                let t = self.faces[f];
                if t.contains(&a) && t.contains(&b) {
                    continue;
                }
                let p = t.map(|u| self.pos[u]);
                let mut q = p;
                for k in 0..3 {
                    if t[k] == v {
                        q[k] = *target;
                    }
                }
                let n0 = (p[1] - p[0]).cross(&(p[2] - p[0]));
                let n1 = (q[1] - q[0]).cross(&(q[2] - q[0]));
                if n1.norm() <= 1e-12 * n0.norm() || n0.dot(&n1) <= 0.0 {
                    return false;
                }
            }
        }
        true
    }

    fn collapse(&mut self, a: usize, b: usize, target: Vec3) {
        self.pos[a] = target;
        let qb = self.quad[b];
        self.quad[a] += qb;
        let fb = std::mem::take(&mut self.vfaces[b]);
        for f in fb {
            if self.faces[f].contains(&a) {
                self.face_alive[f] = false;
                self.live_faces -= 1;
                for u in self.faces[f] {
                    if u != b {
                        self.vfaces[u].retain(|&g| g != f);
                    }
                }
            } else {
                for u in self.faces[f].iter_mut() {
                    if *u == b {
                        *u = a;
                    }
                }
                self.vfaces[a].push(f);
            }
        }
        self.alive[b] = false;
        self.stamp[a] += 1;
        self.stamp[b] += 1;
    }

    fn into_mesh(self) -> Mesh {
        let mut remap = vec![u32::MAX; self.pos.len()];
        let mut out = Mesh::default();
        for v in 0..self.pos.len() {
            if self.alive[v] && !self.vfaces[v].is_empty() {
                remap[v] = out.positions.len() as u32;
                out.positions.push(self.pos[v]);
                out.uvs.push(self.uv[v]);
            }
        }
        for (f, t) in self.faces.iter().enumerate() {
            if self.face_alive[f] {
                out.triangles.push(t.map(|v| remap[v]));
            }
        }
        out
    }
}

/// Quadric-error edge collapse until at most `budget` triangles remain.
/// Collapses that would flip a face, break manifoldness or pinch a boundary
/// are skipped. UVs of the result are placeholders; see [`assign_uvs`].
pub fn decimate(mesh: &Mesh, budget: usize) -> Result<Mesh, ExportError> {
    if budget == 0 {
        return Err(ExportError::Decimation {
            budget,
            reason: "budget must be at least one triangle".into(),
        });
    }
    if mesh.triangles.len() <= budget {
        return Ok(mesh.clone());
    }
    let mut d = Decimator::new(mesh);
    let mut heap = BinaryHeap::new();
    // Faces alive at the last (re)build: a rejected edge may become legal once
    // its neighbourhood changes, so an exhausted heap is rebuilt while that
    // still makes progress.
    let mut built_at = usize::MAX;
    while d.live_faces > budget {
        let Some(c) = heap.pop() else {
            if built_at == d.live_faces {
                return Err(ExportError::Decimation {
                    budget,
                    reason: format!("stuck at {} triangles", d.live_faces),
                });
            }
            built_at = d.live_faces;
            for (f, t) in d.faces.iter().enumerate() {
                if !d.face_alive[f] {
                    continue;
                }
                for e in 0..3 {
                    let (a, b) = (t[e], t[(e + 1) % 3]);
                    // Each interior edge appears twice; keep one orientation.
                    if a < b || d.edge_face_count(a, b) == 1 {
                        heap.push(d.candidate(a.min(b), a.max(b)));
                    }
                }
            }
            continue;
        };
        if !d.alive[c.a] || !d.alive[c.b] || (d.stamp[c.a], d.stamp[c.b]) != c.stamps {
            continue;
        }
        if !d.collapse_ok(c.a, c.b, &c.target) {
            // Another target may still be legal; it costs at least as much,
            // so it goes back in the queue rather than jumping it.
            if let Some(alt) = d.legal_candidate(c.a, c.b) {
                heap.push(alt);
            }
            continue;
        }
        d.collapse(c.a, c.b, c.target);
        for u in d.neighbors(c.a) {
            heap.push(d.candidate(c.a.min(u), c.a.max(u)));
        }
        // Neighbour quadrics are unchanged, but their pending entries with
        // the survivor went stale; everything else stays valid.
    }
    Ok(d.into_mesh())
}

/// Nearest-neighbour lookup over the valid samples of a grid.
struct SampleIndex<'a> {
    grid: &'a LayerGrid,
    cell: f64,
    buckets: FnvHashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> SampleIndex<'a> {
    fn new(grid: &'a LayerGrid) -> Self {
        let pts: Vec<Vec3> = grid.points.iter().flatten().copied().collect();
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for p in &pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-9);
        let cell = extent / (pts.len() as f64).sqrt().max(1.0);
        let mut buckets: FnvHashMap<_, Vec<usize>> = FnvHashMap::default();
        for (k, p) in grid.points.iter().enumerate() {
            if let Some(p) = p {
                buckets.entry(Self::key(cell, p)).or_default().push(k);
            }
        }
        Self { grid, cell, buckets }
    }

    fn key(cell: f64, p: &Vec3) -> (i64, i64, i64) {
        let f = |x: f64| (x / cell).floor() as i64;
        (f(p.x), f(p.y), f(p.z))
    }

    /// Lowest grid index among the nearest samples.
    fn nearest(&self, q: &Vec3) -> usize {
        let (cx, cy, cz) = Self::key(self.cell, q);
        let mut best: Option<(f64, usize)> = None;
        for r in 0i64.. {
            // Every sample in ring r is at least (r − 1)·cell away.
            if let Some((d2, _)) = best {
                let reach = (r - 1).max(0) as f64 * self.cell;
                if reach * reach > d2 {
                    break;
                }
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ks) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &k in ks {
                                let d2 = (self.grid.points[k].unwrap() - q).norm_squared();
                                let better = match best {
                                    None => true,
                                    Some((bd, bk)) => d2 < bd || (d2 == bd && k < bk),
                                };
                                if better {
                                    best = Some((d2, k));
                                }
                            }
                        }
                    }
                }
            }
        }
        best.expect("grid has valid samples").1
    }
}

/// Gives every vertex the UV of its nearest valid bake sample.
pub fn assign_uvs(mesh: &Mesh, grid: &LayerGrid) -> Mesh {
    let index = SampleIndex::new(grid);
    let uvs = mesh
        .positions
        .par_iter()
        .map(|p| grid.uvs[index.nearest(p)])
        .collect();
    Mesh { uvs, ..mesh.clone() }
}

/// Tile placement of N layers in each atlas frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasLayout {
    pub columns: usize,
    pub rows: usize,
    pub tile: usize,
}

impl AtlasLayout {
    pub fn new(layers: usize, tile: usize) -> Self {
        let mut columns = ((layers as f64).sqrt().ceil() as usize).max(1);
        while columns * columns < layers {
            columns += 1;
        }
        Self {
            columns,
            rows: layers.div_ceil(columns).max(1),
            tile,
        }
    }

    pub fn width(&self) -> u32 {
        (self.columns * self.tile) as u32
    }

    pub fn height(&self) -> u32 {
        (self.rows * self.tile) as u32
    }

    /// Top-left pixel of a layer's tile.
    pub fn origin(&self, layer: usize) -> (usize, usize) {
        ((layer % self.columns) * self.tile, (layer / self.columns) * self.tile)
    }
}

/// Chart coordinates of texel (row, col) in an R_t tile: corner-aligned,
/// top row at u = 1.
pub fn texel_uv(row: usize, col: usize, tile: usize) -> [f64; 2] {
    [-lattice(row, tile), lattice(col, tile)]
}

/// Bilinear lookup in a layer's tile; UV outside [−1, 1]² clamps to the edge.
pub fn sample_tile(atlas: &Image, layout: &AtlasLayout, layer: usize, uv: [f64; 2]) -> [f64; 4] {
    let n = layout.tile;
    let (ox, oy) = layout.origin(layer);
    let scale = (n - 1) as f64;
    let fy = ((1.0 - uv[0]) * 0.5 * scale).clamp(0.0, scale);
    let fx = ((uv[1] + 1.0) * 0.5 * scale).clamp(0.0, scale);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
    let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
    let px = |x: usize, y: usize| atlas.pixel((ox + x) as u32, (oy + y) as u32);
    let mut out = [0.0; 4];
    for (c, o) in out.iter_mut().enumerate() {
        let top = px(x0, y0)[c] * (1.0 - wx) + px(x1, y0)[c] * wx;
        let bot = px(x0, y1)[c] * (1.0 - wx) + px(x1, y1)[c] * wx;
        *o = top * (1.0 - wy) + bot * wy;
    }
    out
}

/// One 8-bit RGBA atlas per frame, view branch bypassed.
pub fn bake_textures(
    app: &impl Appearance,
    s_values: &[f64],
    resolution: usize,
    frames: &[FrameSelector],
) -> Result<Vec<Image>, ExportError> {
    let layout = AtlasLayout::new(s_values.len(), resolution);
    let texels = resolution * resolution;
    let uv = Matrix::from_shape_fn((texels, 2), |(k, c)| texel_uv(k / resolution, k % resolution, resolution)[c]);
    frames
        .par_iter()
        .map(|frame| {
            let mut atlas = Image::new(layout.width(), layout.height(), 4);
            for (layer, &s) in s_values.iter().enumerate() {
                let layer_ids = vec![layer; texels];
                let svals = vec![s; texels];
                let rgba = app.rgba(&TextureQuery {
                    uv: &uv,
                    layers: &layer_ids,
                    s_values: &svals,
                    frame,
                    view: None,
                })?;
                let (ox, oy) = layout.origin(layer);
                for k in 0..texels {
                    let px = atlas.pixel_mut((ox + k % resolution) as u32, (oy + k / resolution) as u32);
                    for c in 0..4 {
                        px[c] = rgba[[k, c]];
                    }
                }
            }
            Ok(atlas.quantized())
        })
        .collect()
}

/// Bilinear resampling of every tile to a new resolution.
pub fn resample_atlas(atlas: &Image, layout: &AtlasLayout, layers: usize, resolution: usize) -> Image {
    let out_layout = AtlasLayout::new(layers, resolution);
    let mut out = Image::new(out_layout.width(), out_layout.height(), 4);
    for layer in 0..layers {
        let (ox, oy) = out_layout.origin(layer);
        for row in 0..resolution {
            for col in 0..resolution {
                let v = sample_tile(atlas, layout, layer, texel_uv(row, col, resolution));
                out.pixel_mut((ox + col) as u32, (oy + row) as u32).copy_from_slice(&v);
            }
        }
    }
    out.quantized()
}

/// Mesh of one layer as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerMesh {
    pub positions: Vec<[f32; 3]>,
    pub uvs: Vec<[f32; 2]>,
    pub indices: Vec<u32>,
}

impl LayerMesh {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        Self {
            positions: mesh.positions.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
            uvs: mesh.uvs.iter().map(|uv| [uv[0] as f32, uv[1] as f32]).collect(),
            indices: mesh.triangles.iter().flatten().copied().collect(),
        }
    }

    pub fn triangle_count(&self) -> usize {
        self.indices.len() / 3
    }

    /// Little-endian: magic, V, I, positions, UVs, indices, FNV-1a 64 of
    /// everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.positions.len() * 20 + self.indices.len() * 4);
        out.extend_from_slice(MESH_MAGIC);
        out.extend_from_slice(&(self.positions.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for p in &self.positions {
            p.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for uv in &self.uvs {
            uv.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self, ExportError> {
        let bad = |m: &str| ExportError::Format(format!("{file}: {m}"));
        if bytes.len() < 24 {
            return Err(ExportError::Checksum { file: file.into() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(ExportError::Checksum { file: file.into() });
        }
        if &body[..8] != MESH_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap());
        let (nv, ni) = (u32_at(8) as usize, u32_at(12) as usize);
        if body.len() != 16 + nv * 20 + ni * 4 {
            return Err(bad("length does not match counts"));
        }
        if ni % 3 != 0 {
            return Err(bad("index count is not a multiple of 3"));
        }
        let mut o = 16;
        let mut mesh = LayerMesh::default();
        for _ in 0..nv {
            mesh.positions.push([f32_at(o), f32_at(o + 4), f32_at(o + 8)]);
            o += 12;
        }
        for _ in 0..nv {
            mesh.uvs.push([f32_at(o), f32_at(o + 4)]);
            o += 8;
        }
        for _ in 0..ni {
            let i = u32_at(o);
            if i as usize >= nv {
                return Err(bad("index out of range"));
            }
            mesh.indices.push(i);
            o += 4;
        }
        if mesh.uvs.iter().flatten().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(bad("UV outside [-1, 1]"));
        }
        Ok(mesh)
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetManifest {
    pub format: String,
    pub version: u32,
    pub layers: usize,
    pub frames: usize,
    pub texture_resolution: usize,
    pub atlas: AtlasLayout,
    pub center: [f64; 3],
    pub s_values: Vec<f64>,
    pub frame_rate: f64,
}

/// N static layer meshes plus K RGBA atlases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredMeshAsset {
    pub manifest: AssetManifest,
    pub meshes: Vec<LayerMesh>,
    pub atlases: Vec<Image>,
}

impl LayeredMeshAsset {
    pub fn layout(&self) -> &AtlasLayout {
        &self.manifest.atlas
    }

    pub fn mapper(&self) -> UvMapper {
        UvMapper {
            center: self.manifest.center,
        }
    }

    pub fn triangle_count(&self) -> usize {
        self.meshes.iter().map(LayerMesh::triangle_count).sum()
    }

    /// The same asset with every atlas tile resampled to `resolution`.
    pub fn with_texture_resolution(&self, resolution: usize) -> Self {
        let n = self.manifest.layers;
        let atlases = self
            .atlases
            .par_iter()
            .map(|a| resample_atlas(a, &self.manifest.atlas, n, resolution))
            .collect();
        Self {
            manifest: AssetManifest {
                texture_resolution: resolution,
                atlas: AtlasLayout::new(n, resolution),
                ..self.manifest.clone()
            },
            meshes: self.meshes.clone(),
            atlases,
        }
    }

    pub fn check(&self) -> Result<(), ExportError> {
        let m = &self.manifest;
        let bad = |s: String| Err(ExportError::Inconsistent(s));
        if m.format != ASSET_FORMAT {
            return Err(ExportError::Format(format!("unknown format {:?}", m.format)));
        }
        if m.version != ASSET_VERSION {
            return Err(ExportError::Format(format!("unsupported version {}", m.version)));
        }
        if m.layers != self.meshes.len() {
            return bad(format!("manifest N={} but {} meshes", m.layers, self.meshes.len()));
        }
        if m.s_values.len() != m.layers {
            return bad(format!("manifest N={} but {} s-values", m.layers, m.s_values.len()));
        }
        if m.frames != self.atlases.len() {
            return bad(format!("manifest K={} but {} atlases", m.frames, self.atlases.len()));
        }
        if m.atlas != AtlasLayout::new(m.layers, m.texture_resolution) {
            return bad("atlas layout does not match N and R_t".into());
        }
        for (k, a) in self.atlases.iter().enumerate() {
            if (a.width, a.height, a.channels) != (m.atlas.width(), m.atlas.height(), 4) {
                return bad(format!("atlas {} has size {}x{}x{}", k + 1, a.width, a.height, a.channels));
            }
        }
        for (i, mesh) in self.meshes.iter().enumerate() {
            if mesh.uvs.len() != mesh.positions.len() {
                return bad(format!("mesh {i}: UV count differs from vertex count"));
            }
        }
        Ok(())
    }
}

pub fn mesh_file(layer: usize) -> String {
    format!("meshes/layer{layer:02}.bin")
}

pub fn frame_file(frame: usize) -> String {
    format!("frames/frame{frame:04}.png")
}

pub fn write_asset(asset: &LayeredMeshAsset, dir: &Path) -> Result<(), ExportError> {
    asset.check()?;
    for sub in ["meshes", "frames"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let p = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&asset.manifest).expect("serializable");
    std::fs::write(&p, text).map_err(io_err(&p))?;
    for (i, mesh) in asset.meshes.iter().enumerate() {
        let p = dir.join(mesh_file(i));
        std::fs::write(&p, mesh.to_bytes()).map_err(io_err(&p))?;
    }
    for (k, atlas) in asset.atlases.iter().enumerate() {
        atlas.save_png(&dir.join(frame_file(k + 1)))?;
    }
    Ok(())
}

pub fn read_asset(dir: &Path) -> Result<LayeredMeshAsset, ExportError> {
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    let manifest: AssetManifest =
        serde_json::from_str(&text).map_err(|e| ExportError::Format(format!("manifest.json: {e}")))?;
    if manifest.version != ASSET_VERSION {
        return Err(ExportError::Format(format!("unsupported version {}", manifest.version)));
    }
    let count = |sub: &str| std::fs::read_dir(dir.join(sub)).map(|d| d.count()).unwrap_or(0);
    if count("meshes") != manifest.layers {
        return Err(ExportError::Inconsistent(format!(
            "manifest N={} but {} mesh files",
            manifest.layers,
            count("meshes")
        )));
    }
    if count("frames") != manifest.frames {
        return Err(ExportError::Inconsistent(format!(
            "manifest K={} but {} frame files",
            manifest.frames,
            count("frames")
        )));
    }
    let meshes = (0..manifest.layers)
        .map(|i| {
            let name = mesh_file(i);
            let p = dir.join(&name);
            let bytes = std::fs::read(&p).map_err(io_err(&p))?;
            LayerMesh::from_bytes(&bytes, &name)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let atlases = (1..=manifest.frames)
        .map(|k| Image::load_png(&dir.join(frame_file(k)), 4))
        .collect::<Result<Vec<_>, _>>()?;
    let asset = LayeredMeshAsset {
        manifest,
        meshes,
        atlases,
    };
    asset.check()?;
    Ok(asset)
}

/// Triangulates each grid and decimates it to `budget` triangles.
pub fn build_meshes(grids: &[LayerGrid], center: Vec3, budget: usize) -> Result<Vec<Mesh>, ExportError> {
    grids
        .par_iter()
        .map(|g| {
            let mesh = triangulate(g, center)?;
            if mesh.triangles.len() <= budget {
                return Ok(mesh);
            }
            Ok(assign_uvs(&decimate(&mesh, budget)?, g))
        })
        .collect()
}

/// Geometry stage of the export: bake, triangulate, decimate, re-assign UVs.
pub fn export_meshes<F: ScalarField + Sync>(
    layers: &Layers<F>,
    cfg: &ExportConfig,
    bounds: Option<Aabb>,
) -> Result<Vec<Mesh>, ExportError> {
    cfg.validate()?;
    let grids = bake_geometry(layers, cfg.bake_resolution, cfg.samples, cfg.chart_limit, bounds)?;
    build_meshes(&grids, layers.mapper.center(), cfg.triangle_budget())
}

/// Packs baked meshes and atlases into an asset.
pub fn assemble(
    meshes: &[Mesh],
    atlases: Vec<Image>,
    mapper: &UvMapper,
    s_values: &[f64],
    cfg: &ExportConfig,
) -> LayeredMeshAsset {
    let n = s_values.len();
    LayeredMeshAsset {
        manifest: AssetManifest {
            format: ASSET_FORMAT.into(),
            version: ASSET_VERSION,
            layers: n,
            frames: atlases.len(),
            texture_resolution: cfg.texture_resolution,
            atlas: AtlasLayout::new(n, cfg.texture_resolution),
            center: mapper.center,
            s_values: s_values.to_vec(),
            frame_rate: cfg.frame_rate,
        },
        meshes: meshes.iter().map(LayerMesh::from_mesh).collect(),
        atlases,
    }
}

/// Full export: meshes from `layers`, atlases from `app` for frames 1..=K.
pub fn export_asset<F: ScalarField + Sync>(
    layers: &Layers<F>,
    app: &impl Appearance,
    frames: usize,
    cfg: &ExportConfig,
    bounds: Option<Aabb>,
) -> Result<LayeredMeshAsset, ExportError> {
    let k = cfg.frames.unwrap_or(frames);
    if k == 0 || k > frames {
        return Err(ExportError::Config(format!("cannot bake {k} of {frames} frames")));
    }
    let meshes = export_meshes(layers, cfg, bounds)?;
    let selectors: Vec<FrameSelector> = (1..=k).map(FrameSelector::Frame).collect();
    let atlases = bake_textures(app, layers.s_values, cfg.texture_resolution, &selectors)?;
    Ok(assemble(&meshes, atlases, layers.mapper, layers.s_values, cfg))
}

/// Unsigned distance from `p` to triangle `abc`.
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    // Ericson, closest point on triangle by Voronoi regions.
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    (p - (a + ab * v + ac * w)).norm()
}
