//! Discrete H^{1/2} trace norms on a polyhedron `G` made of mesh elements,
//! nodal restriction to edges and faces of `∂G`, centroid slicing of the
//! elements along a face, and the numerical edge and face lemma studies.
//!
//! The trace norm is realized as
//! `‖g‖² = |Hg|²_{H¹(G)} + ‖g‖²_{L²(∂G)} / diam G`, with `H` the discrete
//! harmonic (energy-minimizing) extension.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::eigen::{generalized_power_iteration, PowerOptions};
use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, Numbering};
use crate::mesh::{
    build_coarse_mesh, cross, sub, MeshLevel, Point, Side, Skeleton,
};
use crate::sparse::{solve_spd, CsrMatrix, DEFAULT_REL_TOL};

/// Boundary values of a discrete function on `∂G`, one per boundary node.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceFunction {
    pub subdomain: usize,
    pub values: Vec<f64>,
}

/// A part of `∂G` that restriction can keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceSubset {
    Boundary,
    /// Skeleton edge component id.
    Edge(usize),
    /// Skeleton face component id.
    Face(usize),
}

/// The polyhedron `G`, its discrete trace space and the matrices that
/// realize the trace norm.
#[derive(Clone, Debug)]
pub struct TraceSpace {
    subdomain: usize,
    h: f64,
    points: Vec<Point>,
    tets: Vec<[usize; 4]>,
    tet_ids: Vec<usize>,
    /// Global ids of G's nodes, ascending; local index = position.
    nodes: Vec<usize>,
    local: HashMap<usize, usize>,
    /// Local indices of boundary nodes, in ascending global order.
    boundary: Vec<usize>,
    boundary_pos: Vec<Option<usize>>,
    interior: Vec<usize>,
    stiffness: CsrMatrix,
    stiffness_ii: CsrMatrix,
    stiffness_ib: CsrMatrix,
    surface_mass: CsrMatrix,
    norm_matrix: CsrMatrix,
    diam: f64,
    extent: f64,
    skeleton: Skeleton,
    rel_tol: f64,
}

fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    let n = cross(sub(b, a), sub(c, a));
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

impl TraceSpace {
    /// `G` = the tets of `mesh` with `tet_subdomain[t] == k`; faces and edges
    /// of `∂G` are named after the planes of `grid`.
    pub fn new(mesh: &MeshLevel, tet_subdomain: &[usize], grid: [usize; 3], k: usize) -> Result<Self> {
        if tet_subdomain.len() != mesh.num_tets() {
            return Err(Error::structure("subdomain map does not match the mesh"));
        }
        let tet_ids: Vec<usize> = (0..mesh.num_tets()).filter(|&t| tet_subdomain[t] == k).collect();
        if tet_ids.is_empty() {
            return Err(Error::config(format!("subdomain {k} has no elements")));
        }
        let skeleton = Skeleton::build(mesh, tet_subdomain, grid);
        let node_set: BTreeSet<usize> = tet_ids.iter().flat_map(|&t| mesh.tets()[t]).collect();
        let nodes: Vec<usize> = node_set.into_iter().collect();
        let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let points: Vec<Point> = nodes.iter().map(|&v| mesh.vertices()[v]).collect();
        let tets: Vec<[usize; 4]> = tet_ids
            .iter()
            .map(|&t| mesh.tets()[t].map(|v| local[&v]))
            .collect();

        let mut bset = BTreeSet::new();
        let mut surface = Vec::new();
        for f in skeleton.faces_of(k) {
            for t in &f.triangles {
                let l = t.map(|v| local[&v]);
                bset.extend(l);
                surface.push(l);
            }
        }
        let boundary: Vec<usize> = bset.into_iter().collect();
        let mut boundary_pos = vec![None; nodes.len()];
        for (i, &b) in boundary.iter().enumerate() {
            boundary_pos[b] = Some(i);
        }
        let interior: Vec<usize> = (0..nodes.len()).filter(|&v| boundary_pos[v].is_none()).collect();

        let mut weights = vec![0.0; mesh.num_tets()];
        for &t in &tet_ids {
            weights[t] = 1.0;
        }
        let stiffness = assemble_stiffness(mesh, &weights, Numbering::All).submatrix(&nodes, &nodes);
        let stiffness_ii = stiffness.submatrix(&interior, &interior);
        let stiffness_ib = stiffness.submatrix(&interior, &boundary);

        let mut trip = Vec::new();
        for t in &surface {
            let area = triangle_area(points[t[0]], points[t[1]], points[t[2]]);
            for i in 0..3 {
                for j in 0..3 {
                    let w = if i == j { area / 6.0 } else { area / 12.0 };
                    trip.push((boundary_pos[t[i]].unwrap(), boundary_pos[t[j]].unwrap(), w));
                }
            }
        }
        let surface_mass = CsrMatrix::from_triplets(boundary.len(), boundary.len(), trip);

        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let diam = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt();
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);

        let embedded: Vec<(usize, usize, f64)> = surface_mass
            .triplets()
            .into_iter()
            .map(|(i, j, v)| (boundary[i], boundary[j], v / diam))
            .collect();
        let norm_matrix = stiffness.add(&CsrMatrix::from_triplets(nodes.len(), nodes.len(), embedded));

        Ok(TraceSpace {
            subdomain: k,
            h: mesh.mesh_size(),
            points,
            tets,
            tet_ids,
            nodes,
            local,
            boundary,
            boundary_pos,
            interior,
            stiffness,
            stiffness_ii,
            stiffness_ib,
            surface_mass,
            norm_matrix,
            diam,
            extent,
            skeleton,
            rel_tol: DEFAULT_REL_TOL,
        })
    }

    /// The unit cube with `n` cells per axis as `G`.
    pub fn unit_cube(n: usize) -> Result<Self> {
        let mesh = build_coarse_mesh(n)?;
        Self::new(&mesh, &vec![0; mesh.num_tets()], [1, 1, 1], 0)
    }

    pub fn subdomain(&self) -> usize {
        self.subdomain
    }

    pub fn mesh_size(&self) -> f64 {
        self.h
    }

    pub fn diameter(&self) -> f64 {
        self.diam
    }

    /// Largest side of the bounding box; the `H` in `log(H/h)`.
    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn num_boundary_nodes(&self) -> usize {
        self.boundary.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Global node id of boundary position `i`.
    pub fn boundary_node(&self, i: usize) -> usize {
        self.nodes[self.boundary[i]]
    }

    pub fn boundary_point(&self, i: usize) -> Point {
        self.points[self.boundary[i]]
    }

    /// Boundary position of a global node id.
    pub fn boundary_position(&self, global: usize) -> Option<usize> {
        self.local.get(&global).and_then(|&l| self.boundary_pos[l])
    }

    pub fn node_point(&self, local: usize) -> Point {
        self.points[local]
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn trace(&self, values: Vec<f64>) -> Result<TraceFunction> {
        if values.len() != self.boundary.len() {
            return Err(Error::structure(format!(
                "{} values for {} boundary nodes",
                values.len(),
                self.boundary.len()
            )));
        }
        Ok(TraceFunction {
            subdomain: self.subdomain,
            values,
        })
    }

    /// Trace of a function given pointwise.
    pub fn trace_of<F: Fn(Point) -> f64>(&self, f: F) -> TraceFunction {
        TraceFunction {
            subdomain: self.subdomain,
            values: self.boundary.iter().map(|&b| f(self.points[b])).collect(),
        }
    }

    /// Face components of `∂G`.
    pub fn faces(&self) -> Vec<usize> {
        self.skeleton.faces_of(self.subdomain).map(|f| f.id).collect()
    }

    /// Edge components of `∂G`.
    pub fn edges(&self) -> Vec<usize> {
        self.skeleton.edges_of(self.subdomain).map(|e| e.id).collect()
    }

    /// Edge component joining the two given points, if any.
    pub fn find_edge(&self, a: Point, b: Point) -> Option<usize> {
        let pts = self.skeleton.points();
        let close = |p: Point, q: Point| (0..3).all(|i| (p[i] - q[i]).abs() < 1e-12);
        self.skeleton.edges_of(self.subdomain).find_map(|e| {
            let (x, y) = e.endpoints();
            ((close(pts[x], a) && close(pts[y], b)) || (close(pts[x], b) && close(pts[y], a)))
                .then_some(e.id)
        })
    }

    /// Face component of `∂G` on plane `axis = plane index` with the given neighbor.
    pub fn find_face(&self, other: Side, axis: usize, plane: usize) -> Option<usize> {
        self.skeleton
            .faces_of(self.subdomain)
            .find(|f| f.label.other == other && f.label.axis == axis && f.label.plane == plane)
            .map(|f| f.id)
    }

    /// Boundary positions kept by `I_K^0`.
    pub fn kept_positions(&self, subset: TraceSubset) -> Result<Vec<usize>> {
        let to_pos = |globals: &[usize]| -> Vec<usize> {
            globals.iter().filter_map(|&g| self.boundary_position(g)).collect()
        };
        match subset {
            TraceSubset::Boundary => Ok((0..self.boundary.len()).collect()),
            TraceSubset::Edge(id) => {
                let e = self
                    .skeleton
                    .edges
                    .get(id)
                    .filter(|e| e.subdomains.contains(&self.subdomain))
                    .ok_or_else(|| Error::config(format!("unknown edge component {id}")))?;
                Ok(to_pos(e.interior_nodes()))
            }
            TraceSubset::Face(id) => {
                let f = self
                    .skeleton
                    .faces
                    .get(id)
                    .filter(|f| f.owner == self.subdomain)
                    .ok_or_else(|| Error::config(format!("unknown face component {id}")))?;
                Ok(to_pos(&f.interior_nodes))
            }
        }
    }

    /// `I_K^0 g`: keep values on the nodes of `subset`, zero elsewhere.
    pub fn restrict_to(&self, subset: TraceSubset, g: &TraceFunction) -> Result<TraceFunction> {
        self.check(g)?;
        let mut values = vec![0.0; g.values.len()];
        for i in self.kept_positions(subset)? {
            values[i] = g.values[i];
        }
        Ok(TraceFunction {
            subdomain: g.subdomain,
            values,
        })
    }

    fn check(&self, g: &TraceFunction) -> Result<()> {
        if g.subdomain != self.subdomain || g.values.len() != self.boundary.len() {
            return Err(Error::structure("trace function does not belong to this polyhedron"));
        }
        Ok(())
    }

    /// Values at all nodes of `G` (local order) of the discrete harmonic
    /// extension of `g`.
    pub fn harmonic_extension(&self, g: &[f64]) -> Result<Vec<f64>> {
        let mut full = vec![0.0; self.nodes.len()];
        for (i, &b) in self.boundary.iter().enumerate() {
            full[b] = g[i];
        }
        if !self.interior.is_empty() {
            let rhs: Vec<f64> = self.stiffness_ib.mul_vec(g).iter().map(|v| -v).collect();
            let x = solve_spd(&self.stiffness_ii, &rhs, self.rel_tol)
                .map_err(|e| e.with_context("harmonic extension"))?;
            for (i, &v) in self.interior.iter().enumerate() {
                full[v] = x[i];
            }
        }
        Ok(full)
    }

    pub fn discrete_harmonic_extension(&self, g: &TraceFunction) -> Result<Vec<f64>> {
        self.check(g)?;
        self.harmonic_extension(&g.values)
    }

    /// `|v|²_{H¹(G)}` for values at all nodes of `G`.
    pub fn energy(&self, full: &[f64]) -> f64 {
        self.stiffness.quadratic_form(full)
    }

    pub fn boundary_l2_sq(&self, g: &[f64]) -> f64 {
        self.surface_mass.quadratic_form(g)
    }

    /// `A g` where `gᵀAg = ‖g‖²_{H^{1/2}(∂G)}`.
    pub fn apply_norm(&self, g: &[f64]) -> Result<Vec<f64>> {
        let full = self.harmonic_extension(g)?;
        let kv = self.stiffness.mul_vec(&full);
        let mg = self.surface_mass.mul_vec(g);
        Ok(self
            .boundary
            .iter()
            .enumerate()
            .map(|(i, &b)| kv[b] + mg[i] / self.diam)
            .collect())
    }

    /// `A⁻¹ y`, the boundary part of `(K + M_∂/diam) x = [0; y]`.
    pub fn solve_norm(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut rhs = vec![0.0; self.nodes.len()];
        for (i, &b) in self.boundary.iter().enumerate() {
            rhs[b] = y[i];
        }
        let x = solve_spd(&self.norm_matrix, &rhs, self.rel_tol)
            .map_err(|e| e.with_context("trace norm solve"))?;
        Ok(self.boundary.iter().map(|&b| x[b]).collect())
    }

    pub fn h_half_norm_sq(&self, g: &[f64]) -> Result<f64> {
        let full = self.harmonic_extension(g)?;
        Ok((self.energy(&full) + self.boundary_l2_sq(g) / self.diam).max(0.0))
    }

    pub fn h_half_norm(&self, g: &TraceFunction) -> Result<f64> {
        self.check(g)?;
        Ok(self.h_half_norm_sq(&g.values)?.sqrt())
    }

    /// `‖g‖²_{L²(E)}` along an edge component.
    pub fn edge_l2_sq(&self, edge: usize, g: &[f64]) -> Result<f64> {
        let e = self
            .skeleton
            .edges
            .get(edge)
            .ok_or_else(|| Error::config(format!("unknown edge component {edge}")))?;
        let pts = self.skeleton.points();
        let mut s = 0.0;
        for &(a, b) in &e.fine_edges {
            let (pa, pb) = (
                self.boundary_position(a).ok_or_else(|| Error::structure("edge off the boundary"))?,
                self.boundary_position(b).ok_or_else(|| Error::structure("edge off the boundary"))?,
            );
            let d = sub(pts[a], pts[b]);
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let (x, y) = (g[pa], g[pb]);
            s += len / 3.0 * (x * x + x * y + y * y);
        }
        Ok(s)
    }

    fn edge_mass_apply(&self, edge: usize, g: &[f64]) -> Vec<f64> {
        let e = &self.skeleton.edges[edge];
        let pts = self.skeleton.points();
        let mut out = vec![0.0; g.len()];
        for &(a, b) in &e.fine_edges {
            let (pa, pb) = (self.boundary_position(a).unwrap(), self.boundary_position(b).unwrap());
            let d = sub(pts[a], pts[b]);
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            out[pa] += len / 6.0 * (2.0 * g[pa] + g[pb]);
            out[pb] += len / 6.0 * (g[pa] + 2.0 * g[pb]);
        }
        out
    }

    /// Positions of all nodes of an edge component (endpoints included).
    fn edge_positions(&self, edge: usize) -> Vec<usize> {
        self.skeleton.edges[edge]
            .nodes
            .iter()
            .filter_map(|&v| self.boundary_position(v))
            .collect()
    }

    /// `sup_u ‖I_E^0 u‖_{H^{1/2}} / ‖u‖_{L²(E)}`.
    ///
    /// Only values on `E` matter, so the pencil lives on the nodes of `E`:
    /// numerator `wᵀ A w` with `w` the interior part, denominator the 1-D
    /// edge mass.
    pub fn edge_restriction_ratio(&self, edge: usize, opts: PowerOptions) -> Result<f64> {
        let pos = self.edge_positions(edge);
        let kept: BTreeSet<usize> = self.kept_positions(TraceSubset::Edge(edge))?.into_iter().collect();
        let nb = self.boundary.len();
        let embed = |x: &[f64], interior_only: bool| {
            let mut g = vec![0.0; nb];
            for (i, &p) in pos.iter().enumerate() {
                if !interior_only || kept.contains(&p) {
                    g[p] = x[i];
                }
            }
            g
        };
        let gather = |g: &[f64]| -> Vec<f64> { pos.iter().map(|&p| g[p]).collect() };
        let mass_local = {
            let mut trip = Vec::new();
            for (i, _) in pos.iter().enumerate() {
                let mut unit = vec![0.0; pos.len()];
                unit[i] = 1.0;
                let col = gather(&self.edge_mass_apply(edge, &embed(&unit, false)));
                for (j, v) in col.into_iter().enumerate() {
                    if v != 0.0 {
                        trip.push((j, i, v));
                    }
                }
            }
            CsrMatrix::from_triplets(pos.len(), pos.len(), trip)
        };
        let est = generalized_power_iteration(
            pos.len(),
            |x| {
                let g = embed(x, true);
                let ag = self.apply_norm(&g)?;
                let mut out = gather(&ag);
                for (i, &p) in pos.iter().enumerate() {
                    if !kept.contains(&p) {
                        out[i] = 0.0;
                    }
                }
                Ok(out)
            },
            |x| Ok(mass_local.mul_vec(x)),
            |y| solve_spd(&mass_local, y, 1e-12),
            opts,
        )?;
        Ok(est.value.sqrt())
    }

    /// `sup_u ‖u‖_{L²(E)} / ‖u‖_{H^{1/2}(∂G)}`.
    pub fn edge_trace_ratio(&self, edge: usize, opts: PowerOptions) -> Result<f64> {
        let est = generalized_power_iteration(
            self.boundary.len(),
            |x| Ok(self.edge_mass_apply(edge, x)),
            |x| self.apply_norm(x),
            |y| self.solve_norm(y),
            opts,
        )?;
        Ok(est.value.sqrt())
    }

    /// `sup_u ‖I_F^0 u‖_{H^{1/2}} / ‖u‖_{H^{1/2}}`.
    pub fn face_restriction_ratio(&self, face: usize, opts: PowerOptions) -> Result<f64> {
        let kept = self.kept_positions(TraceSubset::Face(face))?;
        let mask = |x: &[f64]| {
            let mut g = vec![0.0; x.len()];
            for &p in &kept {
                g[p] = x[p];
            }
            g
        };
        let est = generalized_power_iteration(
            self.boundary.len(),
            |x| Ok(mask(&self.apply_norm(&mask(x))?)),
            |x| self.apply_norm(x),
            |y| self.solve_norm(y),
            opts,
        )?;
        Ok(est.value.sqrt())
    }

    /// Tets of `G` (global ids) with a triangle on face component `face`.
    pub fn face_elements(&self, face: usize) -> Result<Vec<usize>> {
        let f = self
            .skeleton
            .faces
            .get(face)
            .filter(|f| f.owner == self.subdomain)
            .ok_or_else(|| Error::config(format!("unknown face component {face}")))?;
        let tris: BTreeSet<[usize; 3]> = f.triangles.iter().copied().collect();
        let mut out = Vec::new();
        for (i, t) in self.tets.iter().enumerate() {
            let g = t.map(|v| self.nodes[v]);
            let faces = [[g[1], g[2], g[3]], [g[0], g[2], g[3]], [g[0], g[1], g[3]], [g[0], g[1], g[2]]];
            if faces.iter().any(|tri| {
                let mut s = *tri;
                s.sort_unstable();
                tris.contains(&s)
            }) {
                out.push(i);
            }
        }
        Ok(out)
    }

    fn tet_centroid(&self, local_tet: usize) -> Point {
        let t = self.tets[local_tet];
        let mut c = [0.0; 3];
        for &v in &t {
            for a in 0..3 {
                c[a] += self.points[v][a] / 4.0;
            }
        }
        c
    }

    fn tet_gradient(&self, local_tet: usize, full: &[f64]) -> Point {
        let t = self.tets[local_tet];
        let p = t.map(|v| self.points[v]);
        let e1 = sub(p[1], p[0]);
        let e2 = sub(p[2], p[0]);
        let e3 = sub(p[3], p[0]);
        let det = crate::mesh::dot3(e1, cross(e2, e3));
        let g = [
            cross(e2, e3).map(|c| c / det),
            cross(e3, e1).map(|c| c / det),
            cross(e1, e2).map(|c| c / det),
        ];
        let du = [full[t[1]] - full[t[0]], full[t[2]] - full[t[0]], full[t[3]] - full[t[0]]];
        let mut out = [0.0; 3];
        for i in 0..3 {
            for a in 0..3 {
                out[a] += du[i] * g[i][a];
            }
        }
        out
    }

    /// Slice the elements touching `face` into width-`h` slabs by the
    /// projection of their centroids and pick the nodes and elements that
    /// maximize `v²` and `|∂_j v̂|²` in each slab.
    pub fn centroid_slicing(&self, face: usize, v: &TraceFunction) -> Result<CentroidSlicing> {
        self.check(v)?;
        let elems = self.face_elements(face)?;
        let f = &self.skeleton.faces[face];
        let pts = self.skeleton.points();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &n in &f.nodes {
            for a in 0..3 {
                lo[a] = lo[a].min(pts[n][a]);
                hi[a] = hi[a].max(pts[n][a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] + 1e-12 {
                axis = a;
            }
        }
        let h = self.h;
        let mut slabs: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for &e in &elems {
            let c = self.tet_centroid(e)[axis];
            let i = (((c - lo[axis]) / h) - 1e-9).ceil() as i64;
            slabs.entry(i.max(1)).or_default().push(e);
        }
        let face_nodes: BTreeSet<usize> = f.nodes.iter().copied().collect();
        let hv = self.harmonic_extension(&v.values)?;
        let mut slices = Vec::new();
        let mut node_picks = Vec::new();
        let mut element_picks = Vec::new();
        for (_, tets) in slabs {
            let mut cand: BTreeSet<usize> = BTreeSet::new();
            for &t in &tets {
                for &l in &self.tets[t] {
                    let g = self.nodes[l];
                    if face_nodes.contains(&g) {
                        cand.insert(g);
                    }
                }
            }
            let value = |g: usize| v.values[self.boundary_position(g).unwrap()];
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for &g in &cand {
                let s = value(g).powi(2);
                if s > best.0 {
                    best = (s, g);
                }
            }
            node_picks.push(best.1);
            let grads: Vec<Point> = tets.iter().map(|&t| self.tet_gradient(t, &hv)).collect();
            let mut picks = [usize::MAX; 3];
            for j in 0..3 {
                let mut b = (f64::NEG_INFINITY, usize::MAX);
                for (i, &t) in tets.iter().enumerate() {
                    let s = grads[i][j].powi(2);
                    if s > b.0 || (s == b.0 && self.tet_ids[t] < b.1) {
                        b = (s, self.tet_ids[t]);
                    }
                }
                picks[j] = b.1;
            }
            element_picks.push(picks);
            let mut global: Vec<usize> = tets.iter().map(|&t| self.tet_ids[t]).collect();
            global.sort_unstable();
            slices.push(global);
        }
        Ok(CentroidSlicing {
            axis,
            h,
            slices,
            node_picks,
            element_picks,
        })
    }

    /// `h Σ v(p_i)²` and `h³ Σ_i Σ_j |∂_j v̂(c_{K_i^j})|²`.
    pub fn slicing_sums(&self, face: usize, v: &TraceFunction) -> Result<(f64, f64)> {
        let s = self.centroid_slicing(face, v)?;
        let hv = self.harmonic_extension(&v.values)?;
        let local_tet: HashMap<usize, usize> =
            self.tet_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let h = self.h;
        let q1 = h * s
            .node_picks
            .iter()
            .map(|&g| v.values[self.boundary_position(g).unwrap()].powi(2))
            .sum::<f64>();
        let mut q2 = 0.0;
        for picks in &s.element_picks {
            for (j, &t) in picks.iter().enumerate() {
                q2 += self.tet_gradient(local_tet[&t], &hv)[j].powi(2);
            }
        }
        Ok((q1, h.powi(3) * q2))
    }
}

/// Slabs of the elements along a face and the per-slab picks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CentroidSlicing {
    pub axis: usize,
    pub h: f64,
    /// Global tet ids per slab, ascending.
    pub slices: Vec<Vec<usize>>,
    /// `p_i` (global node id) per slab.
    pub node_picks: Vec<usize>,
    /// `K_i^j` (global tet id) per slab and direction.
    pub element_picks: Vec<[usize; 3]>,
}

/// Least-squares line `y ≈ c0 + c1 x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    /// `max |y − fit| / |y|`.
    pub max_rel_residual: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let max_rel_residual = x
        .iter()
        .zip(y)
        .map(|(a, b)| ((intercept + slope * a) - b).abs() / b.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    LinearFit {
        intercept,
        slope,
        max_rel_residual,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaRow {
    pub h: f64,
    pub log_h_ratio: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaTable {
    pub rows: Vec<LemmaRow>,
    pub fit: LinearFit,
}

impl LemmaTable {
    fn from_rows(rows: Vec<LemmaRow>) -> Self {
        let x: Vec<f64> = rows.iter().map(|r| r.log_h_ratio).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
        LemmaTable {
            fit: linear_fit(&x, &y),
            rows,
        }
    }

    pub fn mean_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.ratio).sum::<f64>() / self.rows.len() as f64
    }

    pub fn is_nondecreasing(&self, slack: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].ratio >= w[0].ratio * (1.0 - slack))
    }
}

/// Edge lemma study on the unit cube with the edge from `(0,0,0)` to
/// `(1,0,0)`, one row per entry of `cells` (cells per axis).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeLemmaStudy {
    /// `sup ‖I_E^0 u‖_{H^{1/2}} / ‖u‖_{L²(E)}`.
    pub restriction: LemmaTable,
    /// `sup ‖u‖²_{L²(E)} / ‖u‖²_{H^{1/2}}`.
    pub trace_sq: LemmaTable,
}

pub fn edge_lemma_ratios(cells: &[usize], opts: PowerOptions) -> Result<EdgeLemmaStudy> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &n in cells {
        let g = TraceSpace::unit_cube(n)?;
        let e = g
            .find_edge([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
            .ok_or_else(|| Error::structure("unit cube edge not found"))?;
        let h = g.mesh_size();
        let log_h_ratio = (g.extent() / h).ln();
        first.push(LemmaRow {
            h,
            log_h_ratio,
            ratio: g.edge_restriction_ratio(e, opts)?,
        });
        second.push(LemmaRow {
            h,
            log_h_ratio,
            ratio: g.edge_trace_ratio(e, opts)?.powi(2),
        });
    }
    Ok(EdgeLemmaStudy {
        restriction: LemmaTable::from_rows(first),
        trace_sq: LemmaTable::from_rows(second),
    })
}

/// Face lemma study on the unit cube with the face `z = 0`.
pub fn face_lemma_ratio(cells: &[usize], opts: PowerOptions) -> Result<LemmaTable> {
    let mut rows = Vec::new();
    for &n in cells {
        let g = TraceSpace::unit_cube(n)?;
        let f = g
            .find_face(Side::Outer, 2, 0)
            .ok_or_else(|| Error::structure("unit cube face not found"))?;
        let h = g.mesh_size();
        rows.push(LemmaRow {
            h,
            log_h_ratio: (g.extent() / h).ln(),
            ratio: g.face_restriction_ratio(f, opts)?,
        });
    }
    Ok(LemmaTable::from_rows(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlicingRow {
    pub h: f64,
    pub log_h_ratio: f64,
    /// max over samples of `h Σ v(p_i)² / (log(H/h) ‖v‖²)`.
    pub node_ratio: f64,
    /// max over samples of `h³ Σ |∂_j v̂(c_K)|² / (log(H/h) ‖v‖²)`.
    pub gradient_ratio: f64,
}

/// Slicing bounds on the unit cube face `z = 0` for `samples` random traces
/// per level.
pub fn slicing_inequality_check(cells: &[usize], samples: usize, seed: u64) -> Result<Vec<SlicingRow>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n in cells {
        let g = TraceSpace::unit_cube(n)?;
        let f = g
            .find_face(Side::Outer, 2, 0)
            .ok_or_else(|| Error::structure("unit cube face not found"))?;
        let h = g.mesh_size();
        let log_h_ratio = (g.extent() / h).ln();
        let (mut r1, mut r2) = (0.0f64, 0.0f64);
        for _ in 0..samples {
            let v = g.trace((0..g.num_boundary_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let norm = g.h_half_norm_sq(&v.values)?;
            let (q1, q2) = g.slicing_sums(f, &v)?;
            r1 = r1.max(q1 / (log_h_ratio * norm));
            r2 = r2.max(q2 / (log_h_ratio * norm));
        }
        rows.push(SlicingRow {
            h,
            log_h_ratio,
            node_ratio: r1,
            gradient_ratio: r2,
        });
    }
    Ok(rows)
}

/// `sup ‖I_F^0 u‖ / ‖u‖` for the face of subdomain `k` facing subdomain `l`,
/// computed on `mesh` with the given element map.
pub fn interface_face_ratio(
    mesh: &MeshLevel,
    tet_subdomain: &[usize],
    grid: [usize; 3],
    k: usize,
    l: usize,
    opts: PowerOptions,
) -> Result<f64> {
    let g = TraceSpace::new(mesh, tet_subdomain, grid, k)?;
    let face = g
        .skeleton()
        .faces_of(k)
        .filter(|f| f.label.other == Side::Subdomain(l))
        .max_by_key(|f| f.triangles.len())
        .map(|f| f.id)
        .ok_or_else(|| Error::config(format!("subdomains {k} and {l} share no face")))?;
    g.face_restriction_ratio(face, opts)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn cube() -> &'static TraceSpace {
        static G: OnceLock<TraceSpace> = OnceLock::new();
        G.get_or_init(|| TraceSpace::unit_cube(3).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn restrictions_are_idempotent_projections(v in prop::collection::vec(-1.0f64..1.0, 56), which in 0usize..3) {
            let g = cube();
            let u = g.trace(v).unwrap();
            let subset = match which {
                0 => TraceSubset::Boundary,
                1 => TraceSubset::Edge(g.edges()[0]),
                _ => TraceSubset::Face(g.faces()[0]),
            };
            let once = g.restrict_to(subset, &u).unwrap();
            prop_assert_eq!(&g.restrict_to(subset, &once).unwrap(), &once);
            for (a, b) in once.values.iter().zip(&u.values) {
                prop_assert!(*a == 0.0 || a == b);
            }
        }

        #[test]
        fn trace_norm_is_homogeneous(v in prop::collection::vec(-1.0f64..1.0, 56), s in -10.0f64..10.0) {
            let g = cube();
            let sv: Vec<f64> = v.iter().map(|x| s * x).collect();
            let (a, b) = (g.h_half_norm_sq(&v).unwrap().sqrt(), g.h_half_norm_sq(&sv).unwrap().sqrt());
            prop_assert!((b - s.abs() * a).abs() <= 1e-8 * (1.0 + b));
        }
    }
}
