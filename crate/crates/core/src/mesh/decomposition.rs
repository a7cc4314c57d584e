//! Box-grid subdomain decompositions and their interface geometry.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::skeleton::{face_to_tets, tri_edges, Side, Skeleton, UnionFind};
use super::{cross, dot3, sub, MeshHierarchy, MeshLevel, Point};
use crate::error::{Error, Result};

/// Accepted deviation of an edge or face from a line or plane, in units of h.
pub const DEFAULT_LIPSCHITZ_FACTOR: f64 = 2.0;

fn default_lipschitz() -> f64 {
    DEFAULT_LIPSCHITZ_FACTOR
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub seed: u64,
    /// Maximum depth of reassignment, in fine element layers.
    pub amplitude: usize,
    /// Level at which the reassignment happens; defaults to the finest level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
}

/// Box grid over the unit cube with one weight per cell.
///
/// Cell `(ix, iy, iz)` has id `ix + nx * (iy + ny * iz)`; `alpha` is indexed
/// by cell id. `merge` lists groups of cells that form a single subdomain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSpec {
    pub grid: [usize; 3],
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub merge: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbSpec>,
    #[serde(default = "default_lipschitz")]
    pub lipschitz_factor: f64,
}

impl DecompositionSpec {
    pub fn new(grid: [usize; 3], alpha: Vec<f64>) -> Self {
        DecompositionSpec {
            grid,
            alpha,
            merge: Vec::new(),
            perturb: None,
            lipschitz_factor: DEFAULT_LIPSCHITZ_FACTOR,
        }
    }

    pub fn with_merge(mut self, merge: Vec<Vec<usize>>) -> Self {
        self.merge = merge;
        self
    }

    pub fn num_cells(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn cell_coords(&self, id: usize) -> [usize; 3] {
        let [nx, ny, _] = self.grid;
        [id % nx, (id / nx) % ny, id / (nx * ny)]
    }

    pub fn cell_id(&self, c: [usize; 3]) -> usize {
        c[0] + self.grid[0] * (c[1] + self.grid[1] * c[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterfaceClass {
    Face,
    Edge,
    Vertex,
    Mixed,
    Empty,
}

/// Common boundary of two subdomains, expressed on the resolution level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterfaceGeometry {
    pub shared_faces: Vec<[usize; 3]>,
    pub shared_edges: Vec<(usize, usize)>,
    pub shared_vertices: Vec<usize>,
    pub classification: InterfaceClass,
    /// δ_F of each connected face component.
    pub flatness_face: Vec<f64>,
    /// δ_E of each connected edge component.
    pub straightness_edge: Vec<f64>,
    /// Every component within `lipschitz_factor * h`.
    pub lipschitz: bool,
}

/// Element-to-subdomain map on every level of a hierarchy, plus the
/// boundary structure of the subdomains.
#[derive(Clone, Debug)]
pub struct SubdomainDecomposition {
    spec: DecompositionSpec,
    num_subdomains: usize,
    cell_subdomain: Vec<usize>,
    alpha: Vec<f64>,
    tet_maps: Vec<Vec<usize>>,
    resolution_level: usize,
    resolution_h: f64,
    skeleton: Skeleton,
    interfaces: BTreeMap<(usize, usize), InterfaceGeometry>,
    diameters: Vec<f64>,
}

impl SubdomainDecomposition {
    pub fn spec(&self) -> &DecompositionSpec {
        &self.spec
    }

    pub fn num_subdomains(&self) -> usize {
        self.num_subdomains
    }

    pub fn grid(&self) -> [usize; 3] {
        self.spec.grid
    }

    /// Subdomain of each grid cell.
    pub fn cell_subdomains(&self) -> &[usize] {
        &self.cell_subdomain
    }

    /// Default weights from the spec, one per subdomain.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn num_levels(&self) -> usize {
        self.tet_maps.len()
    }

    pub fn subdomain_of_tet(&self, level: usize, tet: usize) -> usize {
        self.tet_maps[level][tet]
    }

    pub fn tet_map(&self, level: usize) -> &[usize] {
        &self.tet_maps[level]
    }

    /// Level at which the subdomains are exact unions of elements and the
    /// skeleton is extracted.
    pub fn resolution_level(&self) -> usize {
        self.resolution_level
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn interfaces(&self) -> &BTreeMap<(usize, usize), InterfaceGeometry> {
        &self.interfaces
    }

    /// Symmetric lookup: `interface(k, l)` and `interface(l, k)` agree.
    pub fn interface(&self, k: usize, l: usize) -> Option<&InterfaceGeometry> {
        self.interfaces.get(&(k.min(l), k.max(l)))
    }

    /// Closures intersect.
    pub fn adjacent(&self, k: usize, l: usize) -> bool {
        k != l
            && self
                .interface(k, l)
                .is_some_and(|g| g.classification != InterfaceClass::Empty)
    }

    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        (0..self.num_subdomains).filter(|&l| self.adjacent(k, l)).collect()
    }

    /// Bounding-box diagonal of each subdomain.
    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }

    /// H: the largest subdomain diameter.
    pub fn subdomain_diameter(&self) -> f64 {
        self.diameters.iter().cloned().fold(0.0, f64::max)
    }

    pub fn lipschitz_tolerance(&self) -> f64 {
        self.spec.lipschitz_factor * self.resolution_h
    }

    pub fn is_perturbed(&self) -> bool {
        self.spec.perturb.is_some_and(|p| p.amplitude > 0)
    }

    /// Same geometry, different weights.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != self.num_subdomains {
            return Err(Error::config(format!(
                "expected {} weights, got {}",
                self.num_subdomains,
                alpha.len()
            )));
        }
        validate_weights(&alpha)?;
        let mut out = self.clone();
        out.alpha = alpha;
        Ok(out)
    }
}

fn validate_weights(alpha: &[f64]) -> Result<()> {
    if let Some((i, a)) = alpha.iter().enumerate().find(|(_, a)| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::config(format!("weight {i} must be positive and finite, got {a}")));
    }
    Ok(())
}

fn cell_of_point(c: Point, grid: [usize; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((c[a] * grid[a] as f64).floor() as usize).min(grid[a] - 1);
    }
    out
}

/// Assign every tet of every level of `hierarchy` to a subdomain of the box
/// grid described by `spec`, applying the perturbation in `spec` if present.
pub fn assign_subdomains(
    hierarchy: &MeshHierarchy,
    spec: &DecompositionSpec,
) -> Result<SubdomainDecomposition> {
    let grid = spec.grid;
    let n = hierarchy.coarse_n();
    if grid.iter().any(|&g| g == 0 || !n.is_multiple_of(g)) {
        return Err(Error::config(format!(
            "grid {grid:?} must have positive entries dividing coarse_n = {n}"
        )));
    }
    let ncells = spec.num_cells();
    if spec.alpha.len() != ncells {
        return Err(Error::config(format!(
            "grid has {ncells} cells but {} weights were given",
            spec.alpha.len()
        )));
    }
    validate_weights(&spec.alpha)?;
    if !(spec.lipschitz_factor.is_finite() && spec.lipschitz_factor > 0.0) {
        return Err(Error::config("lipschitz_factor must be positive"));
    }

    // Group cells into subdomains.
    let mut group_of = vec![usize::MAX; ncells];
    for (g, members) in spec.merge.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::config("empty merge group"));
        }
        for &c in members {
            if c >= ncells {
                return Err(Error::config(format!("merge refers to unknown cell {c}")));
            }
            if group_of[c] != usize::MAX {
                return Err(Error::config(format!("cell {c} appears in two merge groups")));
            }
            group_of[c] = g;
        }
        let a0 = spec.alpha[members[0]];
        if members.iter().any(|&c| spec.alpha[c] != a0) {
            return Err(Error::config(format!(
                "merged cells {members:?} must carry equal weights"
            )));
        }
        check_cells_connected(spec, members)?;
    }
    let mut groups: Vec<Vec<usize>> = spec.merge.iter().map(|m| {
        let mut m = m.clone();
        m.sort_unstable();
        m
    }).collect();
    for c in 0..ncells {
        if group_of[c] == usize::MAX {
            groups.push(vec![c]);
        }
    }
    groups.sort_by_key(|g| g[0]);
    let mut cell_subdomain = vec![0; ncells];
    for (s, g) in groups.iter().enumerate() {
        for &c in g {
            cell_subdomain[c] = s;
        }
    }
    let num_subdomains = groups.len();
    let alpha: Vec<f64> = groups.iter().map(|g| spec.alpha[g[0]]).collect();

    let mut tet_maps: Vec<Vec<usize>> = hierarchy
        .levels()
        .iter()
        .map(|mesh| {
            (0..mesh.num_tets())
                .map(|t| cell_subdomain[spec.cell_id(cell_of_point(mesh.centroid(t), grid))])
                .collect()
        })
        .collect();

    let mut resolution_level = 0;
    if let Some(p) = spec.perturb.filter(|p| p.amplitude > 0) {
        let level = p.level.unwrap_or(hierarchy.num_levels() - 1);
        if level >= hierarchy.num_levels() {
            return Err(Error::config(format!(
                "perturbation level {level} exceeds the hierarchy depth"
            )));
        }
        tet_maps[level] = perturb_map(
            hierarchy.level(level),
            &tet_maps[level],
            grid,
            p.seed,
            p.amplitude,
        )?;
        for k in level + 1..tet_maps.len() {
            let parent = &tet_maps[k - 1];
            tet_maps[k] = (0..hierarchy.level(k).num_tets()).map(|t| parent[t / 8]).collect();
        }
        resolution_level = level;
    }

    let mesh = hierarchy.level(resolution_level);
    check_tets_connected(mesh, &tet_maps[resolution_level], num_subdomains)?;
    let skeleton = Skeleton::build(mesh, &tet_maps[resolution_level], grid);
    let resolution_h = mesh.mesh_size();
    let interfaces = build_interfaces(
        &skeleton,
        num_subdomains,
        spec.lipschitz_factor * resolution_h,
        grid,
    );
    let diameters = subdomain_diameters(mesh, &tet_maps[resolution_level], num_subdomains);

    Ok(SubdomainDecomposition {
        spec: spec.clone(),
        num_subdomains,
        cell_subdomain,
        alpha,
        tet_maps,
        resolution_level,
        resolution_h,
        skeleton,
        interfaces,
        diameters,
    })
}

/// Re-run the assignment with a perturbation at `level`.
///
/// Whole fine lattice cubes in columns crossing each nominal interface plane
/// are moved to the other side, to a random depth of at most `amplitude`
/// cubes. Columns within `amplitude + 1` cubes of any tangential grid plane
/// stay fixed, which keeps subdomain edges straight.
pub fn perturb_subdomain_boundary(
    dec: &SubdomainDecomposition,
    hierarchy: &MeshHierarchy,
    level: usize,
    seed: u64,
    amplitude: usize,
) -> Result<SubdomainDecomposition> {
    let mut spec = dec.spec.clone();
    spec.perturb = Some(PerturbSpec {
        seed,
        amplitude,
        level: Some(level),
    });
    if amplitude == 0 {
        spec.perturb = None;
    }
    assign_subdomains(hierarchy, &spec)
}

fn perturb_map(
    mesh: &MeshLevel,
    nominal: &[usize],
    grid: [usize; 3],
    seed: u64,
    amplitude: usize,
) -> Result<Vec<usize>> {
    let nl = mesh.cells_per_axis();
    let m: Vec<usize> = (0..3).map(|a| nl / grid[a]).collect();
    for a in 0..3 {
        if grid[a] > 1 && m[a] < 2 * amplitude + 3 {
            return Err(Error::config(format!(
                "boxes are {} elements thick along axis {a}; amplitude {amplitude} needs at least {}",
                m[a],
                2 * amplitude + 3
            )));
        }
    }
    let cube_of = |t: usize| -> [usize; 3] {
        let c = mesh.centroid(t);
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = ((c[a] * nl as f64).floor() as usize).min(nl - 1);
        }
        out
    };
    let cube_id = |c: [usize; 3]| c[0] + nl * (c[1] + nl * c[2]);
    let mut cube_tets: Vec<Vec<usize>> = vec![Vec::new(); nl * nl * nl];
    for t in 0..mesh.num_tets() {
        cube_tets[cube_id(cube_of(t))].push(t);
    }
    let nominal_cube = |c: [usize; 3]| nominal[cube_tets[cube_id(c)][0]];

    // Distance (in cubes) from cube index u to the nearest grid plane along axis b.
    let plane_distance = |u: usize, b: usize| -> usize {
        (0..=grid[b])
            .map(|q| {
                let p = q * m[b];
                if u >= p {
                    u - p
                } else {
                    p - (u + 1)
                }
            })
            .min()
            .unwrap()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = nominal.to_vec();
    let amp = amplitude as i64;
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for q in 1..grid[a] {
            let plane = q * m[a];
            for u in 0..nl {
                for v in 0..nl {
                    if plane_distance(u, b) < amplitude + 1 || plane_distance(v, c) < amplitude + 1 {
                        continue;
                    }
                    let t: i64 = rng.gen_range(-amp..=amp);
                    let mut at = [0usize; 3];
                    at[b] = u;
                    at[c] = v;
                    at[a] = plane - 1;
                    let below = nominal_cube(at);
                    at[a] = plane;
                    let above = nominal_cube(at);
                    if below == above || t == 0 {
                        continue;
                    }
                    let (range, target) = if t > 0 {
                        (plane..plane + t as usize, below)
                    } else {
                        (plane - (-t) as usize..plane, above)
                    };
                    for k in range {
                        at[a] = k;
                        for &tet in &cube_tets[cube_id(at)] {
                            map[tet] = target;
                        }
                    }
                }
            }
        }
    }
    Ok(map)
}

fn check_cells_connected(spec: &DecompositionSpec, members: &[usize]) -> Result<()> {
    let set: BTreeSet<usize> = members.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([members[0]]);
    seen.insert(members[0]);
    while let Some(c) = queue.pop_front() {
        let xyz = spec.cell_coords(c);
        for a in 0..3 {
            for step in [-1i64, 1] {
                let v = xyz[a] as i64 + step;
                if v < 0 || v >= spec.grid[a] as i64 {
                    continue;
                }
                let mut nb = xyz;
                nb[a] = v as usize;
                let id = spec.cell_id(nb);
                if set.contains(&id) && seen.insert(id) {
                    queue.push_back(id);
                }
            }
        }
    }
    if seen.len() != set.len() {
        return Err(Error::config(format!(
            "merged cells {members:?} do not form a face-connected subdomain"
        )));
    }
    Ok(())
}

fn check_tets_connected(mesh: &MeshLevel, map: &[usize], num_subdomains: usize) -> Result<()> {
    let f2t = face_to_tets(mesh);
    let mut uf = UnionFind::new(mesh.num_tets());
    for ts in f2t.values() {
        if let [a, b] = ts.as_slice() {
            if map[*a] == map[*b] {
                uf.union(*a, *b);
            }
        }
    }
    let mut roots: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_subdomains];
    for t in 0..mesh.num_tets() {
        roots[map[t]].insert(uf.find(t));
    }
    for (s, r) in roots.iter().enumerate() {
        match r.len() {
            0 => return Err(Error::config(format!("subdomain {s} contains no elements"))),
            1 => {}
            c => {
                return Err(Error::config(format!(
                    "subdomain {s} splits into {c} disconnected pieces"
                )))
            }
        }
    }
    Ok(())
}

fn subdomain_diameters(mesh: &MeshLevel, map: &[usize], num_subdomains: usize) -> Vec<f64> {
    let mut lo = vec![[f64::INFINITY; 3]; num_subdomains];
    let mut hi = vec![[f64::NEG_INFINITY; 3]; num_subdomains];
    for (t, tet) in mesh.tets().iter().enumerate() {
        let s = map[t];
        for &v in tet {
            let p = mesh.vertices()[v];
            for a in 0..3 {
                lo[s][a] = lo[s][a].min(p[a]);
                hi[s][a] = hi[s][a].max(p[a]);
            }
        }
    }
    (0..num_subdomains)
        .map(|s| {
            (0..3)
                .map(|a| (hi[s][a] - lo[s][a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn distance(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot3(d, d).sqrt()
}

fn farthest_from(points: &[Point], idx: &[usize], from: Point) -> usize {
    let mut best = (f64::NEG_INFINITY, idx[0]);
    for &i in idx {
        let d = distance(points[i], from);
        if d > best.0 + 1e-14 {
            best = (d, i);
        }
    }
    best.1
}

/// Max distance of `nodes` to the line through their two farthest-apart nodes.
pub(crate) fn line_deviation(points: &[Point], nodes: &[usize]) -> f64 {
    if nodes.len() <= 2 {
        return 0.0;
    }
    let p1 = farthest_from(points, nodes, points[nodes[0]]);
    let p2 = farthest_from(points, nodes, points[p1]);
    let dir = sub(points[p2], points[p1]);
    let len = dot3(dir, dir).sqrt();
    nodes
        .iter()
        .map(|&v| {
            let w = sub(points[v], points[p1]);
            let c = cross(w, dir);
            dot3(c, c).sqrt() / len
        })
        .fold(0.0, f64::max)
}

/// Min over candidate planes of the max distance of `nodes` to the plane.
/// Candidates: the plane through a spread-out node triple, and the nominal
/// grid plane `x_axis = coord` when at least three non-collinear nodes lie on it.
pub(crate) fn plane_deviation(points: &[Point], nodes: &[usize], nominal: Option<(usize, f64)>) -> f64 {
    let mut best = f64::INFINITY;
    if let Some((axis, coord)) = nominal {
        let on: Vec<usize> = nodes
            .iter()
            .copied()
            .filter(|&v| (points[v][axis] - coord).abs() < 1e-12)
            .collect();
        if on.len() >= 3 && line_deviation(points, &on) > 1e-12 {
            best = nodes.iter().map(|&v| (points[v][axis] - coord).abs()).fold(0.0, f64::max);
        }
    }
    if nodes.len() >= 3 {
        let p1 = farthest_from(points, nodes, points[nodes[0]]);
        let p2 = farthest_from(points, nodes, points[p1]);
        let dir = sub(points[p2], points[p1]);
        let mut p3 = (0.0, usize::MAX);
        for &v in nodes {
            let c = cross(sub(points[v], points[p1]), dir);
            let d = dot3(c, c);
            if d > p3.0 + 1e-24 {
                p3 = (d, v);
            }
        }
        if p3.1 != usize::MAX {
            let normal = cross(dir, sub(points[p3.1], points[p1]));
            let nn = dot3(normal, normal).sqrt();
            let dev = nodes
                .iter()
                .map(|&v| dot3(sub(points[v], points[p1]), normal).abs() / nn)
                .fold(0.0, f64::max);
            best = best.min(dev);
        } else {
            best = best.min(0.0);
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

fn build_interfaces(
    skeleton: &Skeleton,
    num_subdomains: usize,
    tolerance: f64,
    grid: [usize; 3],
) -> BTreeMap<(usize, usize), InterfaceGeometry> {
    #[derive(Default)]
    struct Acc {
        faces: Vec<[usize; 3]>,
        face_labels: Vec<(usize, usize)>,
        edges: BTreeSet<(usize, usize)>,
        vertices: BTreeSet<usize>,
    }
    let mut acc: BTreeMap<(usize, usize), Acc> = BTreeMap::new();
    for f in &skeleton.faces {
        if let Side::Subdomain(l) = f.label.other {
            if f.owner < l {
                let e = acc.entry((f.owner, l)).or_default();
                for t in &f.triangles {
                    e.faces.push(*t);
                    e.face_labels.push((f.label.axis, f.label.plane));
                }
            }
        }
    }
    for (e, info) in &skeleton.fine_edges {
        let s = &info.subdomains;
        for (i, &a) in s.iter().enumerate() {
            for &b in &s[i + 1..] {
                acc.entry((a, b)).or_default().edges.insert(*e);
            }
        }
    }
    for (v, s) in skeleton.node_subdomains.iter().enumerate() {
        for (i, &a) in s.iter().enumerate() {
            for &b in &s[i + 1..] {
                acc.entry((a, b)).or_default().vertices.insert(v);
            }
        }
    }

    let points = skeleton.points();
    let mut out = BTreeMap::new();
    for k in 0..num_subdomains {
        for l in k + 1..num_subdomains {
            let Some(mut a) = acc.remove(&(k, l)) else {
                out.insert(
                    (k, l),
                    InterfaceGeometry {
                        shared_faces: Vec::new(),
                        shared_edges: Vec::new(),
                        shared_vertices: Vec::new(),
                        classification: InterfaceClass::Empty,
                        flatness_face: Vec::new(),
                        straightness_edge: Vec::new(),
                        lipschitz: true,
                    },
                );
                continue;
            };
            let mut order: Vec<usize> = (0..a.faces.len()).collect();
            order.sort_by_key(|&i| a.faces[i]);
            a.faces = order.iter().map(|&i| a.faces[i]).collect();
            a.face_labels = order.iter().map(|&i| a.face_labels[i]).collect();
            let face_edges: BTreeSet<(usize, usize)> =
                a.faces.iter().flat_map(tri_edges).collect();
            let face_nodes: BTreeSet<usize> = a.faces.iter().flatten().copied().collect();
            let shared_edges: Vec<(usize, usize)> =
                a.edges.iter().copied().filter(|e| !face_edges.contains(e)).collect();
            let edge_nodes: BTreeSet<usize> =
                shared_edges.iter().flat_map(|e| [e.0, e.1]).collect();
            let shared_vertices: Vec<usize> = a
                .vertices
                .iter()
                .copied()
                .filter(|v| !face_nodes.contains(v) && !edge_nodes.contains(v))
                .collect();
            let classification = match (
                !a.faces.is_empty(),
                !shared_edges.is_empty(),
                !shared_vertices.is_empty(),
            ) {
                (false, false, false) => InterfaceClass::Empty,
                (true, false, false) => InterfaceClass::Face,
                (false, true, false) => InterfaceClass::Edge,
                (false, false, true) => InterfaceClass::Vertex,
                _ => InterfaceClass::Mixed,
            };

            // Face components and their flatness.
            let mut uf = UnionFind::new(a.faces.len());
            let mut by_edge: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for (i, t) in a.faces.iter().enumerate() {
                for e in tri_edges(t) {
                    match by_edge.get(&e) {
                        Some(&j) => uf.union(i, j),
                        None => {
                            by_edge.insert(e, i);
                        }
                    }
                }
            }
            let flatness_face: Vec<f64> = uf
                .groups()
                .into_iter()
                .map(|g| {
                    let nodes: Vec<usize> = g
                        .iter()
                        .flat_map(|&i| a.faces[i])
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect();
                    let mut votes: BTreeMap<(usize, usize), usize> = BTreeMap::new();
                    for &i in &g {
                        *votes.entry(a.face_labels[i]).or_default() += 1;
                    }
                    let (axis, plane) = votes
                        .iter()
                        .max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0)))
                        .map(|(k, _)| *k)
                        .unwrap();
                    plane_deviation(points, &nodes, Some((axis, plane as f64 / grid[axis] as f64)))
                })
                .collect();

            // Edge components (outside the shared faces) and their straightness.
            let node_list: Vec<usize> = edge_nodes.iter().copied().collect();
            let local: BTreeMap<usize, usize> =
                node_list.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            let mut uf = UnionFind::new(node_list.len());
            for e in &shared_edges {
                uf.union(local[&e.0], local[&e.1]);
            }
            let straightness_edge: Vec<f64> = uf
                .groups()
                .into_iter()
                .map(|g| {
                    let nodes: Vec<usize> = g.iter().map(|&i| node_list[i]).collect();
                    line_deviation(points, &nodes)
                })
                .collect();
            let lipschitz = flatness_face
                .iter()
                .chain(straightness_edge.iter())
                .all(|&d| d <= tolerance + 1e-12);
            out.insert(
                (k, l),
                InterfaceGeometry {
                    shared_faces: a.faces,
                    shared_edges,
                    shared_vertices,
                    classification,
                    flatness_face,
                    straightness_edge,
                    lipschitz,
                },
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hierarchy(n: usize, levels: usize) -> MeshHierarchy {
        MeshHierarchy::build(n, levels).unwrap()
    }

    fn spec(grid: [usize; 3]) -> DecompositionSpec {
        DecompositionSpec::new(grid, vec![1.0; grid.iter().product()])
    }

    #[test]
    fn single_box_holds_everything() {
        let h = hierarchy(2, 1);
        let d = assign_subdomains(&h, &spec([1, 1, 1])).unwrap();
        assert_eq!(d.num_subdomains(), 1);
        assert!(d.tet_map(1).iter().all(|&s| s == 0));
        assert!(d.interfaces().is_empty());
    }

    #[test]
    fn columns_split_evenly() {
        let h = hierarchy(4, 0);
        let d = assign_subdomains(&h, &spec([2, 2, 1])).unwrap();
        let mut counts = [0; 4];
        for &s in d.tet_map(0) {
            counts[s] += 1;
        }
        assert_eq!(counts, [96; 4]);
        assert_eq!(d.interface(0, 1).unwrap().classification, InterfaceClass::Face);
        assert_eq!(d.interface(0, 3).unwrap().classification, InterfaceClass::Edge);
        assert_eq!(d.interface(1, 2).unwrap().classification, InterfaceClass::Edge);
    }

    #[test]
    fn octants_share_the_center() {
        let h = hierarchy(2, 0);
        let d = assign_subdomains(&h, &spec([2, 2, 2])).unwrap();
        let mesh = h.level(0);
        let center = (0..mesh.num_vertices())
            .find(|&v| mesh.vertices()[v] == [0.5, 0.5, 0.5])
            .unwrap();
        assert_eq!(d.skeleton().node_subdomains(center), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(d.interface(0, 7).unwrap().classification, InterfaceClass::Vertex);
        assert_eq!(d.interface(0, 7).unwrap().shared_vertices, vec![center]);
        assert_eq!(d.interface(0, 3).unwrap().classification, InterfaceClass::Edge);
        assert_eq!(d.interface(0, 1).unwrap().classification, InterfaceClass::Face);
    }

    #[test]
    fn unperturbed_interfaces_are_flat() {
        let h = hierarchy(4, 0);
        let d = assign_subdomains(&h, &spec([2, 2, 2])).unwrap();
        for g in d.interfaces().values() {
            assert!(g.flatness_face.iter().all(|&x| x == 0.0));
            assert!(g.straightness_edge.iter().all(|&x| x.abs() < 1e-15));
            assert_ne!(g.classification, InterfaceClass::Mixed);
        }
    }

    #[test]
    fn grid_must_divide() {
        let h = hierarchy(4, 0);
        assert!(matches!(assign_subdomains(&h, &spec([3, 1, 1])), Err(Error::Config(_))));
    }

    #[test]
    fn merge_rules() {
        let h = hierarchy(2, 0);
        let l = spec([2, 2, 1]).with_merge(vec![vec![0, 1, 2]]);
        let d = assign_subdomains(&h, &l).unwrap();
        assert_eq!(d.num_subdomains(), 2);
        assert_eq!(d.cell_subdomains(), &[0, 0, 0, 1]);
        let diag = spec([2, 2, 1]).with_merge(vec![vec![0, 3]]);
        assert!(matches!(assign_subdomains(&h, &diag), Err(Error::Config(_))));
        let mut unequal = spec([2, 2, 1]).with_merge(vec![vec![0, 1]]);
        unequal.alpha[1] = 2.0;
        assert!(matches!(assign_subdomains(&h, &unequal), Err(Error::Config(_))));
    }

    #[test]
    fn bad_weights_rejected() {
        let h = hierarchy(2, 0);
        let mut s = spec([1, 1, 2]);
        s.alpha[0] = 0.0;
        assert!(assign_subdomains(&h, &s).is_err());
        s.alpha = vec![1.0];
        assert!(assign_subdomains(&h, &s).is_err());
    }

    #[test]
    fn perturbation_zero_is_identity() {
        let h = hierarchy(2, 2);
        let d = assign_subdomains(&h, &spec([1, 1, 2])).unwrap();
        let p = perturb_subdomain_boundary(&d, &h, 2, 7, 0).unwrap();
        for k in 0..h.num_levels() {
            assert_eq!(d.tet_map(k), p.tet_map(k));
        }
    }

    #[test]
    fn perturbation_is_repeatable_and_bounded() {
        let h = hierarchy(2, 3);
        let d = assign_subdomains(&h, &spec([1, 1, 2])).unwrap();
        let a = perturb_subdomain_boundary(&d, &h, 3, 11, 1).unwrap();
        let b = perturb_subdomain_boundary(&d, &h, 3, 11, 1).unwrap();
        assert_eq!(a.tet_map(3), b.tet_map(3));
        assert_ne!(a.tet_map(3), d.tet_map(3));
        assert_eq!(a.resolution_level(), 3);
        let hfine = h.level(3).mesh_size();
        let g = a.interface(0, 1).unwrap();
        assert_eq!(g.classification, InterfaceClass::Face);
        assert!(g.flatness_face.iter().all(|&x| x <= hfine + 1e-12));
        assert!(g.lipschitz);
    }

    #[test]
    fn perturbation_needs_thick_boxes() {
        let h = hierarchy(2, 2);
        let d = assign_subdomains(&h, &spec([1, 1, 2])).unwrap();
        assert!(matches!(
            perturb_subdomain_boundary(&d, &h, 2, 1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finer_levels_inherit() {
        let h = hierarchy(2, 4);
        let d = assign_subdomains(&h, &spec([1, 1, 2])).unwrap();
        let p = perturb_subdomain_boundary(&d, &h, 3, 3, 1).unwrap();
        for t in 0..h.level(4).num_tets() {
            assert_eq!(p.tet_map(4)[t], p.tet_map(3)[t / 8]);
        }
        assert_eq!(p.tet_map(2), d.tet_map(2));
    }

    #[test]
    fn deviation_helpers() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.25, 0.0], [0.0, 1.0, 0.5]];
        assert!((line_deviation(&pts, &[0, 1, 2]) - 0.25).abs() < 1e-14);
        assert!(plane_deviation(&pts, &[0, 1, 2], None).abs() < 1e-14);
        assert!(plane_deviation(&pts, &[0, 1, 2, 3], Some((2, 0.0))) <= 0.5);
    }
}
