//! Nested tetrahedral meshes of the unit cube.
//!
//! The coarsest level is a Kuhn subdivision (six tetrahedra per lattice cube);
//! every further level is a red refinement of the previous one. Vertices of a
//! level are a prefix of the vertices of the next level, so coarse nodal
//! vectors embed into fine ones without renumbering.

mod decomposition;
mod skeleton;

pub use decomposition::{
    assign_subdomains, perturb_subdomain_boundary, DecompositionSpec, InterfaceClass,
    InterfaceGeometry, PerturbSpec, SubdomainDecomposition, DEFAULT_LIPSCHITZ_FACTOR,
};
pub use skeleton::{
    EdgeComponent, FaceComponent, FaceLabel, Side, Skeleton, SkeletonVertex,
};

use std::collections::HashMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub type Point = [f64; 3];

const GEOM_EPS: f64 = 1e-12;

/// One level of a nested mesh hierarchy.
#[derive(Clone, Debug)]
pub struct MeshLevel {
    vertices: Vec<Point>,
    tets: Vec<[usize; 4]>,
    boundary: Vec<bool>,
    /// For vertices created by refinement: the endpoints of the split edge.
    parents: Vec<Option<[usize; 2]>>,
    cells_per_axis: usize,
    level_index: usize,
    free_nodes: Vec<usize>,
    free_index: Vec<Option<usize>>,
}

fn signed_volume(p: &[Point; 4]) -> f64 {
    let a = sub(p[1], p[0]);
    let b = sub(p[2], p[0]);
    let c = sub(p[3], p[0]);
    dot3(a, cross(b, c)) / 6.0
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn on_unit_cube_boundary(p: Point) -> bool {
    p.iter().any(|&c| c.abs() < GEOM_EPS || (c - 1.0).abs() < GEOM_EPS)
}

impl MeshLevel {
    fn from_parts(
        vertices: Vec<Point>,
        mut tets: Vec<[usize; 4]>,
        parents: Vec<Option<[usize; 2]>>,
        cells_per_axis: usize,
        level_index: usize,
    ) -> Self {
        for t in tets.iter_mut() {
            let pts = t.map(|v| vertices[v]);
            if signed_volume(&pts) < 0.0 {
                t.swap(2, 3);
            }
        }
        let boundary: Vec<bool> = vertices.iter().map(|&p| on_unit_cube_boundary(p)).collect();
        let mut free_nodes = Vec::new();
        let mut free_index = vec![None; vertices.len()];
        for (v, &b) in boundary.iter().enumerate() {
            if !b {
                free_index[v] = Some(free_nodes.len());
                free_nodes.push(v);
            }
        }
        MeshLevel {
            vertices,
            tets,
            boundary,
            parents,
            cells_per_axis,
            level_index,
            free_nodes,
            free_index,
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.vertices.len()).filter(|&v| self.boundary[v])
    }

    /// `h` of this level: one over the number of lattice cells per axis.
    pub fn mesh_size(&self) -> f64 {
        1.0 / self.cells_per_axis as f64
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    pub fn level_index(&self) -> usize {
        self.level_index
    }

    pub fn parents(&self, v: usize) -> Option<[usize; 2]> {
        self.parents[v]
    }

    /// Interior vertices in ascending order; these index `FEFunction`s.
    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    pub fn free_index(&self, v: usize) -> Option<usize> {
        self.free_index[v]
    }

    pub fn num_free(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn tet_points(&self, t: usize) -> [Point; 4] {
        self.tets[t].map(|v| self.vertices[v])
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        signed_volume(&self.tet_points(t))
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    pub fn centroid(&self, t: usize) -> Point {
        let p = self.tet_points(t);
        let mut c = [0.0; 3];
        for q in p {
            for a in 0..3 {
                c[a] += 0.25 * q[a];
            }
        }
        c
    }

    /// Integer lattice coordinates of a vertex at this level's resolution.
    pub fn lattice(&self, v: usize) -> [i64; 3] {
        let n = self.cells_per_axis as f64;
        self.vertices[v].map(|c| (c * n).round() as i64)
    }

    /// Map lattice coordinates back to vertex indices.
    pub fn lattice_lookup(&self) -> HashMap<[i64; 3], usize> {
        (0..self.vertices.len()).map(|v| (self.lattice(v), v)).collect()
    }

    /// Gradients of the four barycentric coordinates on tet `t`.
    pub fn barycentric_gradients(&self, t: usize) -> [Point; 4] {
        let p = self.tet_points(t);
        let e1 = sub(p[1], p[0]);
        let e2 = sub(p[2], p[0]);
        let e3 = sub(p[3], p[0]);
        let det = dot3(e1, cross(e2, e3));
        let g1 = cross(e2, e3).map(|c| c / det);
        let g2 = cross(e3, e1).map(|c| c / det);
        let g3 = cross(e1, e2).map(|c| c / det);
        let g0 = [
            -(g1[0] + g2[0] + g3[0]),
            -(g1[1] + g2[1] + g3[1]),
            -(g1[2] + g2[2] + g3[2]),
        ];
        [g0, g1, g2, g3]
    }

    /// Barycentric coordinates of `x` with respect to tet `t`.
    pub fn barycentric(&self, t: usize, x: Point) -> [f64; 4] {
        let p = self.tet_points(t);
        let g = self.barycentric_gradients(t);
        let d = sub(x, p[0]);
        let l1 = dot3(g[1], d);
        let l2 = dot3(g[2], d);
        let l3 = dot3(g[3], d);
        [1.0 - l1 - l2 - l3, l1, l2, l3]
    }

    /// First tet containing `x` (linear scan).
    pub fn locate(&self, x: Point) -> Option<usize> {
        (0..self.tets.len()).find(|&t| self.barycentric(t, x).iter().all(|&l| l >= -1e-12))
    }

    /// Evaluate the P1 function with all-vertex nodal values `values` at `x`.
    pub fn evaluate(&self, values: &[f64], x: Point) -> Option<f64> {
        let t = self.locate(x)?;
        let l = self.barycentric(t, x);
        Some((0..4).map(|i| l[i] * values[self.tets[t][i]]).sum())
    }

    /// Expand a free-node vector to all vertices (boundary values zero).
    pub fn expand_free(&self, free_values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vertices.len()];
        for (i, &v) in self.free_nodes.iter().enumerate() {
            out[v] = free_values[i];
        }
        out
    }

    /// Plain-text node and tet tables for external viewers.
    pub fn write_tables<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# nodes {}", self.vertices.len())?;
        for (i, p) in self.vertices.iter().enumerate() {
            writeln!(w, "{i} {} {} {} {}", p[0], p[1], p[2], u8::from(self.boundary[i]))?;
        }
        writeln!(w, "# tets {}", self.tets.len())?;
        for (i, t) in self.tets.iter().enumerate() {
            writeln!(w, "{i} {} {} {} {}", t[0], t[1], t[2], t[3])?;
        }
        Ok(())
    }
}

/// Kuhn-subdivided uniform mesh of the unit cube with `cells_per_axis³`
/// lattice cubes of six tets each.
pub fn build_coarse_mesh(cells_per_axis: usize) -> Result<MeshLevel> {
    if cells_per_axis == 0 {
        return Err(Error::config("cells_per_axis must be at least 1"));
    }
    let n = cells_per_axis;
    let np = n + 1;
    let idx = |i: usize, j: usize, k: usize| i + np * (j + np * k);
    let mut vertices = Vec::with_capacity(np * np * np);
    for k in 0..np {
        for j in 0..np {
            for i in 0..np {
                vertices.push([i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64]);
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut t = [idx(c[0], c[1], c[2]), 0, 0, 0];
                    for (step, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        t[step + 1] = idx(c[0], c[1], c[2]);
                    }
                    tets.push(t);
                }
            }
        }
    }
    let parents = vec![None; vertices.len()];
    Ok(MeshLevel::from_parts(vertices, tets, parents, n, 0))
}

/// Red refinement: every tet splits into four corner tets and four tets
/// around one diagonal of the inner octahedron. The child tets of parent
/// `t` are stored at `8t..8t+8`.
pub fn refine(mesh: &MeshLevel) -> MeshLevel {
    let mut vertices = mesh.vertices.clone();
    let mut parents = mesh.parents.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point>, parents: &mut Vec<Option<[usize; 2]>>| {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let pa = vertices[key.0];
            let pb = vertices[key.1];
            vertices.push([
                0.5 * (pa[0] + pb[0]),
                0.5 * (pa[1] + pb[1]),
                0.5 * (pa[2] + pb[2]),
            ]);
            parents.push(Some([key.0, key.1]));
            vertices.len() - 1
        })
    };
    let mut tets = Vec::with_capacity(8 * mesh.tets.len());
    for t in &mesh.tets {
        let [v0, v1, v2, v3] = *t;
        let m01 = mid(v0, v1, &mut vertices, &mut parents);
        let m02 = mid(v0, v2, &mut vertices, &mut parents);
        let m03 = mid(v0, v3, &mut vertices, &mut parents);
        let m12 = mid(v1, v2, &mut vertices, &mut parents);
        let m13 = mid(v1, v3, &mut vertices, &mut parents);
        let m23 = mid(v2, v3, &mut vertices, &mut parents);
        tets.push([v0, m01, m02, m03]);
        tets.push([m01, v1, m12, m13]);
        tets.push([m02, m12, v2, m23]);
        tets.push([m03, m13, m23, v3]);
        // Opposite vertex pairs of the inner octahedron.
        let diagonals = [(m01, m23), (m02, m13), (m03, m12)];
        let choice = pick_diagonal(&vertices, &diagonals);
        let (a, b) = diagonals[choice];
        let (p, p2) = diagonals[(choice + 1) % 3];
        let (q, q2) = diagonals[(choice + 2) % 3];
        let ring = [p, q, p2, q2];
        for i in 0..4 {
            tets.push([a, b, ring[i], ring[(i + 1) % 4]]);
        }
    }
    MeshLevel::from_parts(
        vertices,
        tets,
        parents,
        2 * mesh.cells_per_axis,
        mesh.level_index + 1,
    )
}

/// Shortest octahedron diagonal; among equal lengths prefer one whose
/// direction has no mixed signs, which keeps Kuhn meshes Kuhn.
fn pick_diagonal(vertices: &[Point], diagonals: &[(usize, usize); 3]) -> usize {
    let key = |&(a, b): &(usize, usize)| {
        let d = sub(vertices[b], vertices[a]);
        let len2 = dot3(d, d);
        let pos = d.iter().all(|&c| c >= -GEOM_EPS);
        let neg = d.iter().all(|&c| c <= GEOM_EPS);
        (len2, !(pos || neg))
    };
    let keys: Vec<(f64, bool)> = diagonals.iter().map(key).collect();
    let shortest = keys.iter().map(|k| k.0).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * shortest.max(1e-300);
    (0..3)
        .filter(|&i| keys[i].0 <= shortest + tol)
        .min_by_key(|&i| (keys[i].1, i))
        .unwrap()
}

/// A coarse level plus `refine_levels` red refinements.
#[derive(Clone, Debug)]
pub struct MeshHierarchy {
    levels: Vec<MeshLevel>,
}

impl MeshHierarchy {
    pub fn build(coarse_n: usize, refine_levels: usize) -> Result<Self> {
        let mut levels = vec![build_coarse_mesh(coarse_n)?];
        for _ in 0..refine_levels {
            let next = refine(levels.last().unwrap());
            levels.push(next);
        }
        Ok(MeshHierarchy { levels })
    }

    pub fn levels(&self) -> &[MeshLevel] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &MeshLevel {
        &self.levels[k]
    }

    pub fn finest(&self) -> &MeshLevel {
        self.levels.last().unwrap()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn coarse_n(&self) -> usize {
        self.levels[0].cells_per_axis
    }
}

/// Nodal prolongation from `coarse` free nodes to `fine` free nodes. Rows of
/// fine nodes that are coarse vertices are unit rows.
pub fn prolongation(coarse: &MeshLevel, fine: &MeshLevel) -> Result<CsrMatrix> {
    let weights = prolongation_weights(coarse, fine)?;
    let mut triplets = Vec::new();
    for (row, &fv) in fine.free_nodes.iter().enumerate() {
        for &(cv, w) in &weights[fv] {
            if let Some(col) = coarse.free_index[cv] {
                triplets.push((row, col, w));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(
        fine.num_free(),
        coarse.num_free(),
        triplets,
    ))
}

/// Prolongation over all vertices (no boundary elimination).
pub fn prolongation_full(coarse: &MeshLevel, fine: &MeshLevel) -> Result<CsrMatrix> {
    let weights = prolongation_weights(coarse, fine)?;
    let triplets = weights
        .iter()
        .enumerate()
        .flat_map(|(r, ws)| ws.iter().map(move |&(c, w)| (r, c, w)))
        .collect();
    Ok(CsrMatrix::from_triplets(
        fine.num_vertices(),
        coarse.num_vertices(),
        triplets,
    ))
}

fn prolongation_weights(coarse: &MeshLevel, fine: &MeshLevel) -> Result<Vec<Vec<(usize, f64)>>> {
    check_nested(coarse, fine)?;
    let nc = coarse.num_vertices();
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::with_capacity(fine.num_vertices());
    for v in 0..fine.num_vertices() {
        if v < nc {
            weights.push(vec![(v, 1.0)]);
            continue;
        }
        let [a, b] = fine.parents[v].expect("checked by check_nested");
        let mut merged: Vec<(usize, f64)> = weights[a]
            .iter()
            .chain(weights[b].iter())
            .map(|&(c, w)| (c, 0.5 * w))
            .collect();
        merged.sort_by_key(|e| e.0);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
        for (c, w) in merged {
            match row.last_mut() {
                Some(last) if last.0 == c => last.1 += w,
                _ => row.push((c, w)),
            }
        }
        row.retain(|e| e.1 != 0.0);
        weights.push(row);
    }
    Ok(weights)
}

fn check_nested(coarse: &MeshLevel, fine: &MeshLevel) -> Result<()> {
    let nc = coarse.num_vertices();
    if fine.level_index < coarse.level_index || nc > fine.num_vertices() {
        return Err(Error::structure(format!(
            "level {} is not a refinement of level {}",
            fine.level_index, coarse.level_index
        )));
    }
    let steps = fine.level_index - coarse.level_index;
    if coarse.cells_per_axis << steps != fine.cells_per_axis {
        return Err(Error::structure(
            "mesh sizes of the pair are not related by halving",
        ));
    }
    if coarse.vertices[..] != fine.vertices[..nc] {
        return Err(Error::structure(
            "coarse vertices are not a prefix of the fine vertices",
        ));
    }
    for v in nc..fine.num_vertices() {
        match fine.parents[v] {
            Some([a, b]) if a < v && b < v => {}
            _ => {
                return Err(Error::structure(format!(
                    "fine vertex {v} has no refinement parents"
                )))
            }
        }
    }
    Ok(())
}
