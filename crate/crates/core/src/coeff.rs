//! Analysis of a coefficient distribution over a decomposition: upper
//! intersections, thorny edges and vertices, quasi-monotonicity, the
//! multilayer partition and the subdomain sets derived from them.
//!
//! Everything here depends on the weights only through comparisons
//! `α_l ≥ α_k`, so any strictly increasing rescaling of the weights gives
//! the same result.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::fem::CoefficientField;
use crate::mesh::{EdgeComponent, FaceComponent, InterfaceClass, Side, SubdomainDecomposition};

/// `𝒮_k`: the part of `∂Ω_k` shared with subdomains of weight at least
/// `α_k`, together with `∂Ω_k ∩ ∂Ω`. Node and edge ids refer to the
/// decomposition's resolution level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpperIntersection {
    pub subdomain: usize,
    /// Face components of `Ω_k` lying in `𝒮_k`.
    pub faces: Vec<usize>,
    /// Fine edges of `𝒮_k` that are not edges of those faces.
    pub edges: Vec<(usize, usize)>,
    /// Nodes of `𝒮_k` on neither.
    pub vertices: Vec<usize>,
}

impl UpperIntersection {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty() && self.edges.is_empty() && self.vertices.is_empty()
    }
}

fn face_is_upper(f: &FaceComponent, alpha: &CoefficientField) -> bool {
    match f.label.other {
        Side::Outer => true,
        Side::Subdomain(l) => alpha.get(l) >= alpha.get(f.owner),
    }
}

/// Whether a feature with subdomain set `subs` lies in `𝒮_k`.
fn feature_in_upper(k: usize, subs: &[usize], on_outer: bool, alpha: &CoefficientField) -> bool {
    on_outer || subs.iter().any(|&l| l != k && alpha.get(l) >= alpha.get(k))
}

pub fn upper_intersection(
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
    k: usize,
) -> UpperIntersection {
    let sk = dec.skeleton();
    let faces: Vec<usize> = sk
        .faces_of(k)
        .filter(|f| face_is_upper(f, alpha))
        .map(|f| f.id)
        .collect();
    let mut face_edges = BTreeSet::new();
    let mut face_nodes = BTreeSet::new();
    for &f in &faces {
        for t in &sk.faces[f].triangles {
            face_edges.insert((t[0].min(t[1]), t[0].max(t[1])));
            face_edges.insert((t[0].min(t[2]), t[0].max(t[2])));
            face_edges.insert((t[1].min(t[2]), t[1].max(t[2])));
        }
        face_nodes.extend(sk.faces[f].nodes.iter().copied());
    }
    let mut edges: Vec<(usize, usize)> = sk
        .fine_edges
        .iter()
        .filter(|(e, info)| {
            info.subdomains.binary_search(&k).is_ok()
                && info.subdomains.len() + usize::from(info.on_outer_boundary) >= 2
                && feature_in_upper(k, &info.subdomains, info.on_outer_boundary, alpha)
                && !face_edges.contains(*e)
        })
        .map(|(e, _)| *e)
        .collect();
    edges.sort_unstable();
    let edge_nodes: BTreeSet<usize> = edges.iter().flat_map(|e| [e.0, e.1]).collect();
    let points = sk.points();
    let vertices = (0..points.len())
        .filter(|&v| {
            let subs = sk.node_subdomains(v);
            let on_outer = is_outer_point(points[v]);
            subs.binary_search(&k).is_ok()
                && (subs.len() >= 2 || on_outer)
                && feature_in_upper(k, subs, on_outer, alpha)
                && !face_nodes.contains(&v)
                && !edge_nodes.contains(&v)
        })
        .collect();
    UpperIntersection {
        subdomain: k,
        faces,
        edges,
        vertices,
    }
}

fn is_outer_point(p: [f64; 3]) -> bool {
    p.iter().any(|&c| c.abs() < 1e-12 || (c - 1.0).abs() < 1e-12)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThornyEdge {
    /// Edge component id in the decomposition's skeleton.
    pub edge: usize,
    pub endpoints: [[f64; 3]; 2],
    /// `𝒮_E`.
    pub subdomains: Vec<usize>,
    /// `𝒮*_E`: members in whose upper intersection `E` is isolated.
    pub star: Vec<usize>,
    /// `𝒮^c_E`.
    pub complement: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThornyVertex {
    /// Node id on the resolution level.
    pub vertex: usize,
    pub point: [f64; 3],
    pub subdomains: Vec<usize>,
    pub star: Vec<usize>,
    pub complement: Vec<usize>,
}

/// Whether edge component `e` is isolated in `𝒮_k` (lies in it but in
/// none of its faces).
pub fn edge_isolated_in(
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
    e: &EdgeComponent,
    k: usize,
) -> bool {
    if !feature_in_upper(k, &e.subdomains, e.on_outer_boundary, alpha) {
        return false;
    }
    let sk = dec.skeleton();
    !sk.faces_containing_edge(k, e)
        .into_iter()
        .any(|f| face_is_upper(&sk.faces[f], alpha))
}

fn edge_in_upper(e: &EdgeComponent, k: usize, alpha: &CoefficientField) -> bool {
    e.subdomains.binary_search(&k).is_ok()
        && feature_in_upper(k, &e.subdomains, e.on_outer_boundary, alpha)
}

/// Whether skeleton vertex `node` is isolated in `𝒮_k` (lies in it but in
/// none of its faces or edges).
pub fn vertex_isolated_in(
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
    node: usize,
    k: usize,
) -> bool {
    let sk = dec.skeleton();
    let subs = sk.node_subdomains(node);
    let on_outer = is_outer_point(sk.points()[node]);
    if !feature_in_upper(k, subs, on_outer, alpha) {
        return false;
    }
    let in_face = sk
        .faces_at_node(node)
        .iter()
        .any(|&f| sk.faces[f].owner == k && face_is_upper(&sk.faces[f], alpha));
    if in_face {
        return false;
    }
    !sk.edges
        .iter()
        .any(|e| e.nodes.contains(&node) && edge_in_upper(e, k, alpha))
}

pub fn detect_thorny_edges(dec: &SubdomainDecomposition, alpha: &CoefficientField) -> Vec<ThornyEdge> {
    let sk = dec.skeleton();
    let pts = sk.points();
    sk.edges
        .iter()
        .filter_map(|e| {
            let (star, complement): (Vec<usize>, Vec<usize>) = e
                .subdomains
                .iter()
                .partition(|&&k| edge_isolated_in(dec, alpha, e, k));
            if star.is_empty() {
                return None;
            }
            let (a, b) = e.endpoints();
            Some(ThornyEdge {
                edge: e.id,
                endpoints: [pts[a], pts[b]],
                subdomains: e.subdomains.clone(),
                star,
                complement,
            })
        })
        .collect()
}

pub fn detect_thorny_vertices(
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
) -> Vec<ThornyVertex> {
    let sk = dec.skeleton();
    sk.vertices
        .iter()
        .filter_map(|v| {
            let (star, complement): (Vec<usize>, Vec<usize>) = v
                .subdomains
                .iter()
                .partition(|&&k| vertex_isolated_in(dec, alpha, v.node, k));
            if star.is_empty() {
                return None;
            }
            Some(ThornyVertex {
                vertex: v.node,
                point: sk.points()[v.node],
                subdomains: v.subdomains.clone(),
                star,
                complement,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    Edge { edge: usize, subdomain: usize },
    Vertex { vertex: usize, subdomain: usize },
}

/// True iff there is no thorny edge or vertex; otherwise the first
/// offending feature (edges before vertices).
pub fn is_quasi_monotone(
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
) -> (bool, Option<Witness>) {
    if let Some(e) = detect_thorny_edges(dec, alpha).first() {
        return (
            false,
            Some(Witness::Edge {
                edge: e.edge,
                subdomain: e.star[0],
            }),
        );
    }
    if let Some(v) = detect_thorny_vertices(dec, alpha).first() {
        return (
            false,
            Some(Witness::Vertex {
                vertex: v.vertex,
                subdomain: v.star[0],
            }),
        );
    }
    (true, None)
}

/// Subdomain adjacency (closures intersect) as sorted neighbor lists.
pub fn adjacency(dec: &SubdomainDecomposition) -> Vec<Vec<usize>> {
    (0..dec.num_subdomains()).map(|k| dec.neighbors(k)).collect()
}

/// Greedy layering: visit subdomains by descending weight (ties by id) and
/// put each in the lowest layer above every adjacent, strictly heavier
/// subdomain that holds no adjacent subdomain. Layers are numbered from 1.
pub fn multilayer_partition(dec: &SubdomainDecomposition, alpha: &CoefficientField) -> Vec<Vec<usize>> {
    multilayer_partition_graph(&adjacency(dec), alpha.alpha())
}

pub fn multilayer_partition_graph(adj: &[Vec<usize>], alpha: &[f64]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    let mut layer_of: Vec<Option<usize>> = vec![None; n];
    let mut layers: Vec<Vec<usize>> = Vec::new();
    for k in order {
        let floor = adj[k]
            .iter()
            .filter_map(|&l| layer_of[l].filter(|_| alpha[l] > alpha[k]).map(|j| j + 1))
            .max()
            .unwrap_or(0);
        let mut j = floor;
        while adj[k].iter().any(|&l| layer_of[l] == Some(j)) {
            j += 1;
        }
        if j == layers.len() {
            layers.push(Vec::new());
        }
        layers[j].push(k);
        layer_of[k] = Some(j);
    }
    for l in layers.iter_mut() {
        l.sort_unstable();
    }
    layers
}

/// Check both layer conditions: no adjacency inside a layer, and weights
/// non-increasing from lower to higher layers across adjacent pairs.
pub fn layers_valid(adj: &[Vec<usize>], alpha: &[f64], layers: &[Vec<usize>]) -> bool {
    let n = adj.len();
    let mut layer_of = vec![usize::MAX; n];
    for (j, l) in layers.iter().enumerate() {
        if l.is_empty() {
            return false;
        }
        for &k in l {
            if k >= n || layer_of[k] != usize::MAX {
                return false;
            }
            layer_of[k] = j;
        }
    }
    if layer_of.contains(&usize::MAX) {
        return false;
    }
    (0..n).all(|k| {
        adj[k].iter().all(|&l| {
            layer_of[k] != layer_of[l] && (layer_of[k] > layer_of[l] || alpha[k] >= alpha[l])
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerNeighbor {
    pub subdomain: usize,
    pub tag: InterfaceClass,
}

/// `Λ_k^j` for every subdomain `k` and every layer `j` below `k`'s layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerIndexSets {
    /// `sets[k][j]` lists the layer-`j` neighbors of `k` (layers from 0).
    pub sets: Vec<Vec<Vec<LayerNeighbor>>>,
    pub layer_of: Vec<usize>,
}

impl LayerIndexSets {
    pub fn get(&self, k: usize, j: usize) -> &[LayerNeighbor] {
        self.sets[k].get(j).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn interface_tag(dec: &SubdomainDecomposition, k: usize, l: usize) -> InterfaceClass {
    let g = dec.interface(k, l).expect("adjacent pair has an interface");
    match g.classification {
        InterfaceClass::Mixed if !g.shared_faces.is_empty() => InterfaceClass::Face,
        InterfaceClass::Mixed if !g.shared_edges.is_empty() => InterfaceClass::Edge,
        c => c,
    }
}

pub fn layer_index_sets(layers: &[Vec<usize>], dec: &SubdomainDecomposition) -> LayerIndexSets {
    let n = dec.num_subdomains();
    let mut layer_of = vec![0; n];
    for (j, l) in layers.iter().enumerate() {
        for &k in l {
            layer_of[k] = j;
        }
    }
    let sets = (0..n)
        .map(|k| {
            (0..layer_of[k])
                .map(|j| {
                    dec.neighbors(k)
                        .into_iter()
                        .filter(|&l| layer_of[l] == j)
                        .map(|l| LayerNeighbor {
                            subdomain: l,
                            tag: interface_tag(dec, k, l),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    LayerIndexSets { sets, layer_of }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StarSets {
    /// `𝒮*`: union of the star sets of all thorny vertices and edges.
    pub star: Vec<usize>,
    /// `𝒮^c_*`.
    pub complement: Vec<usize>,
    /// `𝒮̃*`: thorny vertices only.
    pub tilde_star: Vec<usize>,
    pub tilde_complement: Vec<usize>,
}

pub fn classify_star_sets(
    num_subdomains: usize,
    edges: &[ThornyEdge],
    vertices: &[ThornyVertex],
) -> StarSets {
    let tilde: BTreeSet<usize> = vertices.iter().flat_map(|v| v.star.iter().copied()).collect();
    let mut star = tilde.clone();
    star.extend(edges.iter().flat_map(|e| e.star.iter().copied()));
    let rest = |s: &BTreeSet<usize>| (0..num_subdomains).filter(|k| !s.contains(k)).collect();
    StarSets {
        complement: rest(&star),
        tilde_complement: rest(&tilde),
        star: star.into_iter().collect(),
        tilde_star: tilde.into_iter().collect(),
    }
}

/// For every thorny edge `E` and `Ω_r ∈ 𝒮*_E`: each `Ω_l ∈ 𝒮_E` sharing
/// with `Ω_r` a face that contains `E` lies in `𝒮^c_E` with `α_l < α_r`.
pub fn face_neighbors_are_lower(
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
    edges: &[ThornyEdge],
) -> bool {
    let sk = dec.skeleton();
    edges.iter().all(|t| {
        let e = &sk.edges[t.edge];
        t.star.iter().all(|&r| {
            sk.faces_containing_edge(r, e).into_iter().all(|f| match sk.faces[f].label.other {
                Side::Subdomain(l) if t.subdomains.contains(&l) => {
                    t.complement.contains(&l) && alpha.get(l) < alpha.get(r)
                }
                _ => true,
            })
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionReport {
    pub num_subdomains: usize,
    pub alpha: Vec<f64>,
    pub quasi_monotone: bool,
    pub witness: Option<Witness>,
    pub thorny_edges: Vec<ThornyEdge>,
    pub thorny_vertices: Vec<ThornyVertex>,
    pub layers: Vec<Vec<usize>>,
    pub m: usize,
    pub layer_index_sets: LayerIndexSets,
    pub star_set: Vec<usize>,
    pub complement: Vec<usize>,
    pub tilde_star_set: Vec<usize>,
    pub tilde_complement: Vec<usize>,
    pub face_neighbors_lower: bool,
    pub interfaces: BTreeMap<String, InterfaceClass>,
}

pub fn analyze(dec: &SubdomainDecomposition, alpha: &CoefficientField) -> DistributionReport {
    let thorny_edges = detect_thorny_edges(dec, alpha);
    let thorny_vertices = detect_thorny_vertices(dec, alpha);
    let (quasi_monotone, witness) = is_quasi_monotone(dec, alpha);
    let layers = multilayer_partition(dec, alpha);
    let sets = classify_star_sets(dec.num_subdomains(), &thorny_edges, &thorny_vertices);
    let interfaces = dec
        .interfaces()
        .iter()
        .filter(|(_, g)| g.classification != InterfaceClass::Empty)
        .map(|((k, l), g)| (format!("{k}-{l}"), g.classification))
        .collect();
    DistributionReport {
        num_subdomains: dec.num_subdomains(),
        alpha: alpha.alpha().to_vec(),
        quasi_monotone,
        witness,
        face_neighbors_lower: face_neighbors_are_lower(dec, alpha, &thorny_edges),
        thorny_edges,
        thorny_vertices,
        m: layers.len(),
        layer_index_sets: layer_index_sets(&layers, dec),
        layers,
        star_set: sets.star,
        complement: sets.complement,
        tilde_star_set: sets.tilde_star,
        tilde_complement: sets.tilde_complement,
        interfaces,
    }
}

impl DistributionReport {
    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} subdomains, quasi-monotone: {}\nthorny edges: {}, thorny vertices: {}\nlayers (m = {}): {:?}\nS* = {:?}, S*^c = {:?}, vertex-only S* = {:?}\n",
            self.num_subdomains,
            self.quasi_monotone,
            self.thorny_edges.len(),
            self.thorny_vertices.len(),
            self.m,
            self.layers,
            self.star_set,
            self.complement,
            self.tilde_star_set
        );
        for e in &self.thorny_edges {
            s.push_str(&format!(
                "  edge {} from {:?} to {:?}: star {:?}\n",
                e.edge, e.endpoints[0], e.endpoints[1], e.star
            ));
        }
        for v in &self.thorny_vertices {
            s.push_str(&format!("  vertex at {:?}: star {:?}\n", v.point, v.star));
        }
        s
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::mesh::{assign_subdomains, DecompositionSpec, MeshHierarchy};
    use proptest::prelude::*;

    fn octants() -> SubdomainDecomposition {
        let h = MeshHierarchy::build(2, 0).unwrap();
        assign_subdomains(&h, &DecompositionSpec::new([2, 2, 2], vec![1.0; 8])).unwrap()
    }

    fn graph() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<f64>)> {
        (1usize..10).prop_flat_map(|n| {
            (
                prop::collection::vec(any::<bool>(), n * n),
                prop::collection::vec(0u8..4, n),
            )
                .prop_map(move |(bits, ranks)| {
                    let mut adj = vec![Vec::new(); n];
                    for i in 0..n {
                        for j in i + 1..n {
                            if bits[i * n + j] {
                                adj[i].push(j);
                                adj[j].push(i);
                            }
                        }
                    }
                    (adj, ranks.iter().map(|&r| 10f64.powi(-(r as i32))).collect())
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn detectors_depend_only_on_order(ranks in prop::collection::vec(0u8..5, 8), p in 0.2f64..5.0, c in 1e-3f64..1e3) {
            let dec = octants();
            let a: Vec<f64> = ranks.iter().map(|&r| 2f64.powi(-(r as i32))).collect();
            // x ↦ c·x^p is strictly increasing on the positive reals.
            let b: Vec<f64> = a.iter().map(|x| c * x.powf(p)).collect();
            let fa = CoefficientField::new(a).unwrap();
            let fb = CoefficientField::new(b).unwrap();
            let strip_e = |v: Vec<ThornyEdge>| v.into_iter().map(|e| (e.edge, e.star)).collect::<Vec<_>>();
            let strip_v = |v: Vec<ThornyVertex>| v.into_iter().map(|e| (e.vertex, e.star)).collect::<Vec<_>>();
            prop_assert_eq!(strip_e(detect_thorny_edges(&dec, &fa)), strip_e(detect_thorny_edges(&dec, &fb)));
            prop_assert_eq!(strip_v(detect_thorny_vertices(&dec, &fa)), strip_v(detect_thorny_vertices(&dec, &fb)));
            prop_assert_eq!(is_quasi_monotone(&dec, &fa).0, is_quasi_monotone(&dec, &fb).0);
            let (la, lb) = (multilayer_partition(&dec, &fa), multilayer_partition(&dec, &fb));
            prop_assert_eq!(&la, &lb);
            prop_assert!(layers_valid(&adjacency(&dec), fb.alpha(), &lb));
        }

        #[test]
        fn greedy_layers_are_valid_on_any_graph((adj, alpha) in graph()) {
            let layers = multilayer_partition_graph(&adj, &alpha);
            prop_assert!(layers_valid(&adj, &alpha, &layers));
            prop_assert!(layers.len() <= adj.len());
        }
    }
}
