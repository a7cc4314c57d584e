//! Combinatorial boundary structure of a subdomain decomposition.
//!
//! Works on one mesh level at which every subdomain is a union of tets and
//! extracts the subdomain faces (connected patches of boundary triangles
//! that see the same neighbor across them and sit on the same nominal grid
//! plane), the edges (chains of fine edges where a subdomain's face label
//! changes) and the vertices where edge chains end.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{MeshLevel, Point};

/// What lies on the other side of a boundary triangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Subdomain(usize),
    /// The outer boundary of the unit cube.
    Outer,
}

/// Face identity: the neighbor across plus the nominal grid plane
/// (`axis`, plane index `i` at coordinate `i / grid[axis]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FaceLabel {
    pub other: Side,
    pub axis: usize,
    pub plane: usize,
}

#[derive(Clone, Debug)]
pub struct FaceComponent {
    pub id: usize,
    pub owner: usize,
    pub label: FaceLabel,
    pub triangles: Vec<[usize; 3]>,
    /// All nodes of the patch, ascending.
    pub nodes: Vec<usize>,
    /// Nodes off the rim of the patch, ascending.
    pub interior_nodes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EdgeComponent {
    pub id: usize,
    /// Subdomains whose closure contains the edge.
    pub subdomains: Vec<usize>,
    pub on_outer_boundary: bool,
    pub fine_edges: Vec<(usize, usize)>,
    /// Chain of nodes from one endpoint to the other.
    pub nodes: Vec<usize>,
}

impl EdgeComponent {
    pub fn endpoints(&self) -> (usize, usize) {
        (self.nodes[0], *self.nodes.last().unwrap())
    }

    /// Chain nodes without the two endpoints.
    pub fn interior_nodes(&self) -> &[usize] {
        if self.nodes.len() <= 2 {
            &[]
        } else {
            &self.nodes[1..self.nodes.len() - 1]
        }
    }
}

#[derive(Clone, Debug)]
pub struct SkeletonVertex {
    pub node: usize,
    pub subdomains: Vec<usize>,
    pub on_outer_boundary: bool,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct FineEdgeInfo {
    pub subdomains: Vec<usize>,
    pub on_outer_boundary: bool,
    pub ridge: bool,
}

/// Boundary complex of all subdomains at one mesh level.
#[derive(Clone, Debug)]
pub struct Skeleton {
    pub faces: Vec<FaceComponent>,
    pub edges: Vec<EdgeComponent>,
    pub vertices: Vec<SkeletonVertex>,
    pub(crate) node_subdomains: Vec<Vec<usize>>,
    pub(crate) fine_edges: HashMap<(usize, usize), FineEdgeInfo>,
    /// (owner, fine edge) -> face components of the owner containing the edge.
    pub(crate) edge_faces: HashMap<(usize, (usize, usize)), Vec<usize>>,
    /// node -> face components containing it.
    pub(crate) node_faces: Vec<Vec<usize>>,
    pub(crate) points: Vec<Point>,
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }

    /// Group members by root, groups ordered by smallest member.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for x in 0..self.parent.len() {
            let r = self.find(x);
            map.entry(r).or_default().push(x);
        }
        map.into_values().collect()
    }
}

/// Sorted vertex triples of the four faces of a tet.
pub(crate) fn tet_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    let mut f = [
        [t[1], t[2], t[3]],
        [t[0], t[2], t[3]],
        [t[0], t[1], t[3]],
        [t[0], t[1], t[2]],
    ];
    for x in f.iter_mut() {
        x.sort_unstable();
    }
    f
}

pub(crate) fn tet_edges(t: &[usize; 4]) -> [(usize, usize); 6] {
    [
        edge_key(t[0], t[1]),
        edge_key(t[0], t[2]),
        edge_key(t[0], t[3]),
        edge_key(t[1], t[2]),
        edge_key(t[1], t[3]),
        edge_key(t[2], t[3]),
    ]
}

pub(crate) fn tri_edges(t: &[usize; 3]) -> [(usize, usize); 3] {
    [edge_key(t[0], t[1]), edge_key(t[0], t[2]), edge_key(t[1], t[2])]
}

/// Map each (sorted) triangle to the tets containing it.
pub(crate) fn face_to_tets(mesh: &MeshLevel) -> HashMap<[usize; 3], Vec<usize>> {
    let mut map: HashMap<[usize; 3], Vec<usize>> = HashMap::with_capacity(2 * mesh.num_tets());
    for (ti, t) in mesh.tets().iter().enumerate() {
        for f in tet_faces(t) {
            map.entry(f).or_default().push(ti);
        }
    }
    map
}

fn nominal_plane(points: &[Point], tri: &[usize; 3], grid: [usize; 3]) -> (usize, usize) {
    let mut c = [0.0; 3];
    for &v in tri {
        for a in 0..3 {
            c[a] += points[v][a] / 3.0;
        }
    }
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for a in 0..3 {
        let g = grid[a] as f64;
        let idx = (c[a] * g).round().clamp(0.0, g);
        let dist = (c[a] - idx / g).abs();
        if dist < best.0 - 1e-12 {
            best = (dist, a, idx as usize);
        }
    }
    (best.1, best.2)
}

impl Skeleton {
    /// Build the boundary complex for `tet_subdomain` on `mesh`; `grid` is
    /// the box grid whose planes name the faces.
    pub fn build(mesh: &MeshLevel, tet_subdomain: &[usize], grid: [usize; 3]) -> Skeleton {
        let points = mesh.vertices().to_vec();
        let nv = mesh.num_vertices();

        let mut node_subdomains: Vec<Vec<usize>> = vec![Vec::new(); nv];
        let mut fine_edges: HashMap<(usize, usize), FineEdgeInfo> = HashMap::new();
        for (ti, t) in mesh.tets().iter().enumerate() {
            let s = tet_subdomain[ti];
            for &v in t {
                node_subdomains[v].push(s);
            }
            for e in tet_edges(t) {
                fine_edges.entry(e).or_default().subdomains.push(s);
            }
        }
        for s in node_subdomains.iter_mut() {
            s.sort_unstable();
            s.dedup();
        }
        for info in fine_edges.values_mut() {
            info.subdomains.sort_unstable();
            info.subdomains.dedup();
        }

        // Boundary triangles of every subdomain, with their labels.
        let mut tris: Vec<([usize; 3], usize, FaceLabel)> = Vec::new();
        let mut f2t: Vec<([usize; 3], Vec<usize>)> = face_to_tets(mesh).into_iter().collect();
        f2t.sort_by_key(|a| a.0);
        for (f, ts) in &f2t {
            let (axis, plane) = nominal_plane(&points, f, grid);
            match ts.as_slice() {
                [t] => {
                    let label = FaceLabel {
                        other: Side::Outer,
                        axis,
                        plane,
                    };
                    tris.push((*f, tet_subdomain[*t], label));
                    for e in tri_edges(f) {
                        fine_edges.get_mut(&e).unwrap().on_outer_boundary = true;
                    }
                }
                [a, b] => {
                    let (sa, sb) = (tet_subdomain[*a], tet_subdomain[*b]);
                    if sa != sb {
                        tris.push((
                            *f,
                            sa,
                            FaceLabel {
                                other: Side::Subdomain(sb),
                                axis,
                                plane,
                            },
                        ));
                        tris.push((
                            *f,
                            sb,
                            FaceLabel {
                                other: Side::Subdomain(sa),
                                axis,
                                plane,
                            },
                        ));
                    }
                }
                _ => unreachable!("a triangle belongs to at most two tets"),
            }
        }

        // Ridge detection: a subdomain sees two different labels at an edge.
        let mut owner_edge_labels: HashMap<(usize, (usize, usize)), BTreeSet<FaceLabel>> =
            HashMap::new();
        for (f, owner, label) in &tris {
            for e in tri_edges(f) {
                owner_edge_labels.entry((*owner, e)).or_default().insert(*label);
            }
        }
        for ((_, e), labels) in &owner_edge_labels {
            if labels.len() >= 2 {
                fine_edges.get_mut(e).unwrap().ridge = true;
            }
        }

        // Face components.
        let mut groups: BTreeMap<(usize, FaceLabel), Vec<usize>> = BTreeMap::new();
        for (i, (_, owner, label)) in tris.iter().enumerate() {
            groups.entry((*owner, *label)).or_default().push(i);
        }
        let mut faces = Vec::new();
        for ((owner, label), members) in groups {
            let mut uf = UnionFind::new(members.len());
            let mut by_edge: HashMap<(usize, usize), usize> = HashMap::new();
            for (local, &ti) in members.iter().enumerate() {
                for e in tri_edges(&tris[ti].0) {
                    if let Some(&other) = by_edge.get(&e) {
                        uf.union(local, other);
                    } else {
                        by_edge.insert(e, local);
                    }
                }
            }
            for group in uf.groups() {
                let triangles: Vec<[usize; 3]> = group.iter().map(|&l| tris[members[l]].0).collect();
                let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
                for t in &triangles {
                    for e in tri_edges(t) {
                        *edge_count.entry(e).or_default() += 1;
                    }
                }
                let rim: BTreeSet<usize> = edge_count
                    .iter()
                    .filter(|(_, &c)| c == 1)
                    .flat_map(|(e, _)| [e.0, e.1])
                    .collect();
                let nodes: BTreeSet<usize> = triangles.iter().flatten().copied().collect();
                let interior_nodes = nodes.iter().copied().filter(|v| !rim.contains(v)).collect();
                faces.push(FaceComponent {
                    id: faces.len(),
                    owner,
                    label,
                    triangles,
                    nodes: nodes.into_iter().collect(),
                    interior_nodes,
                });
            }
        }

        let mut edge_faces: HashMap<(usize, (usize, usize)), Vec<usize>> = HashMap::new();
        let mut node_faces: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for f in &faces {
            for t in &f.triangles {
                for e in tri_edges(t) {
                    let entry = edge_faces.entry((f.owner, e)).or_default();
                    if entry.last() != Some(&f.id) {
                        entry.push(f.id);
                    }
                }
            }
            for &v in &f.nodes {
                node_faces[v].push(f.id);
            }
        }

        // Ridge chains and the vertices that terminate them.
        let mut ridge: Vec<(usize, usize)> = fine_edges
            .iter()
            .filter(|(_, info)| info.ridge)
            .map(|(e, _)| *e)
            .collect();
        ridge.sort_unstable();
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for (i, e) in ridge.iter().enumerate() {
            incident[e.0].push(i);
            incident[e.1].push(i);
        }
        let signature = |e: &(usize, usize)| {
            let info = &fine_edges[e];
            (info.subdomains.clone(), info.on_outer_boundary)
        };
        let node_on_outer = |v: usize| mesh.is_boundary(v);
        let mut node_pairs: HashMap<usize, BTreeSet<(usize, usize)>> = HashMap::new();
        for (e, info) in &fine_edges {
            let s = &info.subdomains;
            if s.len() < 2 {
                continue;
            }
            for (i, &a) in s.iter().enumerate() {
                for &b in &s[i + 1..] {
                    node_pairs.entry(e.0).or_default().insert((a, b));
                    node_pairs.entry(e.1).or_default().insert((a, b));
                }
            }
        }
        let mut is_vertex = vec![false; nv];
        for v in 0..nv {
            let inc = &incident[v];
            is_vertex[v] = match inc.len() {
                0 => {
                    // Point contact: two subdomains meeting at v without a common fine edge.
                    let subs = &node_subdomains[v];
                    subs.len() >= 2
                        && subs.iter().enumerate().any(|(i, &a)| {
                            subs[i + 1..].iter().any(|&b| {
                                !node_pairs.get(&v).is_some_and(|s| s.contains(&(a, b)))
                            })
                        })
                }
                2 => {
                    let (s0, s1) = (signature(&ridge[inc[0]]), signature(&ridge[inc[1]]));
                    s0 != s1 || node_subdomains[v] != s0.0 || node_on_outer(v) != s0.1
                }
                _ => true,
            };
        }
        let mut uf = UnionFind::new(ridge.len());
        for v in 0..nv {
            if !is_vertex[v] && incident[v].len() == 2 {
                uf.union(incident[v][0], incident[v][1]);
            }
        }
        let mut edges = Vec::new();
        for group in uf.groups() {
            let fine: Vec<(usize, usize)> = group.iter().map(|&i| ridge[i]).collect();
            let (subs, outer) = signature(&fine[0]);
            let nodes = order_chain(&fine);
            edges.push(EdgeComponent {
                id: edges.len(),
                subdomains: subs,
                on_outer_boundary: outer,
                fine_edges: fine,
                nodes,
            });
        }
        let vertices = (0..nv)
            .filter(|&v| is_vertex[v])
            .map(|v| SkeletonVertex {
                node: v,
                subdomains: node_subdomains[v].clone(),
                on_outer_boundary: node_on_outer(v),
            })
            .collect();

        Skeleton {
            faces,
            edges,
            vertices,
            node_subdomains,
            fine_edges,
            edge_faces,
            node_faces,
            points,
        }
    }

    pub fn node_subdomains(&self, v: usize) -> &[usize] {
        &self.node_subdomains[v]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Subdomains containing the fine edge `e`, if it is a mesh edge.
    pub fn fine_edge_subdomains(&self, e: (usize, usize)) -> Option<&[usize]> {
        self.fine_edges.get(&edge_key(e.0, e.1)).map(|i| i.subdomains.as_slice())
    }

    pub fn fine_edge_on_outer_boundary(&self, e: (usize, usize)) -> bool {
        self.fine_edges
            .get(&edge_key(e.0, e.1))
            .is_some_and(|i| i.on_outer_boundary)
    }

    /// Face components of `owner` whose closure contains every fine edge of `edge`.
    pub fn faces_containing_edge(&self, owner: usize, edge: &EdgeComponent) -> Vec<usize> {
        let mut result: Option<BTreeSet<usize>> = None;
        for e in &edge.fine_edges {
            let here: BTreeSet<usize> = self
                .edge_faces
                .get(&(owner, *e))
                .map(|v| v.iter().copied().collect())
                .unwrap_or_default();
            result = Some(match result {
                None => here,
                Some(acc) => acc.intersection(&here).copied().collect(),
            });
        }
        result.unwrap_or_default().into_iter().collect()
    }

    /// Face components (of any owner) that contain `node`.
    pub fn faces_at_node(&self, node: usize) -> &[usize] {
        &self.node_faces[node]
    }

    pub fn faces_of(&self, owner: usize) -> impl Iterator<Item = &FaceComponent> {
        self.faces.iter().filter(move |f| f.owner == owner)
    }

    pub fn edges_of(&self, owner: usize) -> impl Iterator<Item = &EdgeComponent> {
        self.edges
            .iter()
            .filter(move |e| e.subdomains.binary_search(&owner).is_ok())
    }
}

/// Order the nodes of a chain of edges; closed loops start at the smallest node.
pub(crate) fn order_chain(edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let start = adj
        .iter()
        .find(|(_, n)| n.len() == 1)
        .map(|(&v, _)| v)
        .unwrap_or(*adj.keys().next().unwrap());
    let mut chain = vec![start];
    let mut prev = usize::MAX;
    let mut cur = start;
    loop {
        let next = adj[&cur].iter().copied().filter(|&n| n != prev).min();
        match next {
            Some(n) if n != start && !chain.contains(&n) => {
                chain.push(n);
                prev = cur;
                cur = n;
            }
            _ => break,
        }
    }
    chain
}
