//! P1 finite elements with homogeneous Dirichlet conditions: weighted
//! assembly, weighted L² projection onto a coarser level, weighted norms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{generalized_power_iteration, PowerOptions};
use crate::error::{Error, Result};
use crate::mesh::{dot3, prolongation, MeshLevel, Point, SubdomainDecomposition};
use crate::sparse::{dot, solve_spd, CsrMatrix};

/// Piecewise-constant weights, one per subdomain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    alpha: Vec<f64>,
}

impl CoefficientField {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::config("coefficient field needs at least one weight"));
        }
        if let Some((i, a)) = alpha.iter().enumerate().find(|(_, a)| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::config(format!("alpha[{i}] = {a} is not positive and finite")));
        }
        Ok(CoefficientField { alpha })
    }

    pub fn uniform(num_subdomains: usize) -> Self {
        CoefficientField {
            alpha: vec![1.0; num_subdomains.max(1)],
        }
    }

    pub fn from_decomposition(dec: &SubdomainDecomposition) -> Self {
        CoefficientField {
            alpha: dec.alpha().to_vec(),
        }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn get(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.alpha.iter().map(|a| a * c).collect())
    }

    /// Weight of every tet of `mesh` under `dec`.
    pub fn tet_weights(&self, mesh: &MeshLevel, dec: &SubdomainDecomposition) -> Result<Vec<f64>> {
        let level = mesh.level_index();
        if level >= dec.num_levels() || dec.tet_map(level).len() != mesh.num_tets() {
            return Err(Error::structure(format!(
                "decomposition has no map for level {level} with {} tets",
                mesh.num_tets()
            )));
        }
        if self.alpha.len() < dec.num_subdomains() {
            return Err(Error::config(format!(
                "{} subdomains but only {} weights",
                dec.num_subdomains(),
                self.alpha.len()
            )));
        }
        Ok(dec.tet_map(level).iter().map(|&s| self.alpha[s]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceTag {
    Coarse,
    Fine,
}

/// Nodal values of a P1 function on the free nodes of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FEFunction {
    pub level_index: usize,
    pub values: Vec<f64>,
    pub space: SpaceTag,
}

impl FEFunction {
    pub fn new(mesh: &MeshLevel, values: Vec<f64>, space: SpaceTag) -> Result<Self> {
        if values.len() != mesh.num_free() {
            return Err(Error::structure(format!(
                "{} values for {} free nodes",
                values.len(),
                mesh.num_free()
            )));
        }
        Ok(FEFunction {
            level_index: mesh.level_index(),
            values,
            space,
        })
    }

    pub fn zeros(mesh: &MeshLevel, space: SpaceTag) -> Self {
        FEFunction {
            level_index: mesh.level_index(),
            values: vec![0.0; mesh.num_free()],
            space,
        }
    }

    /// Values at all vertices, zero on the boundary.
    pub fn full_values(&self, mesh: &MeshLevel) -> Vec<f64> {
        mesh.expand_free(&self.values)
    }

    fn check_level(&self, mesh: &MeshLevel) -> Result<()> {
        if self.level_index != mesh.level_index() || self.values.len() != mesh.num_free() {
            return Err(Error::structure(format!(
                "function lives on level {}, mesh is level {}",
                self.level_index,
                mesh.level_index()
            )));
        }
        Ok(())
    }
}

/// Which vertices index the rows and columns of an assembled matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Numbering {
    /// Interior nodes only (Dirichlet elimination).
    Free,
    All,
}

pub fn element_mass(volume: f64) -> [[f64; 4]; 4] {
    let mut m = [[volume / 20.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = volume / 10.0;
    }
    m
}

pub fn element_stiffness(grads: &[Point; 4], volume: f64) -> [[f64; 4]; 4] {
    let mut k = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            k[i][j] = volume * dot3(grads[i], grads[j]);
        }
    }
    k
}

#[derive(Clone, Copy)]
enum Kind {
    Mass,
    Stiffness,
}

fn assemble(mesh: &MeshLevel, weights: &[f64], kind: Kind, numbering: Numbering) -> CsrMatrix {
    let index = |v: usize| match numbering {
        Numbering::Free => mesh.free_index(v),
        Numbering::All => Some(v),
    };
    let n = match numbering {
        Numbering::Free => mesh.num_free(),
        Numbering::All => mesh.num_vertices(),
    };
    let triplets: Vec<(usize, usize, f64)> = (0..mesh.num_tets())
        .into_par_iter()
        .filter(|&t| weights[t] != 0.0)
        .flat_map_iter(|t| {
            let vol = mesh.tet_volume(t);
            let local = match kind {
                Kind::Mass => element_mass(vol),
                Kind::Stiffness => element_stiffness(&mesh.barycentric_gradients(t), vol),
            };
            let tet = mesh.tets()[t];
            let w = weights[t];
            let mut out = Vec::with_capacity(16);
            for i in 0..4 {
                let Some(r) = index(tet[i]) else { continue };
                for j in 0..4 {
                    if let Some(c) = index(tet[j]) {
                        out.push((r, c, w * local[i][j]));
                    }
                }
            }
            out
        })
        .collect();
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Mass matrix for arbitrary per-tet weights.
pub fn assemble_mass(mesh: &MeshLevel, tet_weights: &[f64], numbering: Numbering) -> CsrMatrix {
    assemble(mesh, tet_weights, Kind::Mass, numbering)
}

/// Stiffness matrix for arbitrary per-tet weights.
pub fn assemble_stiffness(mesh: &MeshLevel, tet_weights: &[f64], numbering: Numbering) -> CsrMatrix {
    assemble(mesh, tet_weights, Kind::Stiffness, numbering)
}

/// α-weighted mass matrix on free nodes.
pub fn assemble_mass_weighted(
    mesh: &MeshLevel,
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
) -> Result<CsrMatrix> {
    Ok(assemble_mass(mesh, &alpha.tet_weights(mesh, dec)?, Numbering::Free))
}

/// α-weighted stiffness matrix on free nodes.
pub fn assemble_stiffness_weighted(
    mesh: &MeshLevel,
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
) -> Result<CsrMatrix> {
    Ok(assemble_stiffness(mesh, &alpha.tet_weights(mesh, dec)?, Numbering::Free))
}

/// Weighted L² projection onto the range of a prolongation, with the Gram
/// matrix `PᵀMP` assembled once.
#[derive(Clone, Debug)]
pub struct Projector {
    coarse_level: usize,
    fine_level: usize,
    p: CsrMatrix,
    mass: CsrMatrix,
    gram: CsrMatrix,
    rel_tol: f64,
}

impl Projector {
    pub fn new(
        coarse: &MeshLevel,
        fine: &MeshLevel,
        mass_fine: CsrMatrix,
        rel_tol: f64,
    ) -> Result<Self> {
        let p = prolongation(coarse, fine)?;
        Self::from_parts(coarse.level_index(), fine.level_index(), p, mass_fine, rel_tol)
    }

    pub fn from_parts(
        coarse_level: usize,
        fine_level: usize,
        p: CsrMatrix,
        mass_fine: CsrMatrix,
        rel_tol: f64,
    ) -> Result<Self> {
        if mass_fine.nrows() != p.nrows() {
            return Err(Error::structure(format!(
                "mass matrix has {} rows, prolongation {}",
                mass_fine.nrows(),
                p.nrows()
            )));
        }
        let gram = mass_fine.galerkin(&p);
        Ok(Projector {
            coarse_level,
            fine_level,
            p,
            mass: mass_fine,
            gram,
            rel_tol,
        })
    }

    pub fn prolongation(&self) -> &CsrMatrix {
        &self.p
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn gram(&self) -> &CsrMatrix {
        &self.gram
    }

    /// Coarse coefficients `c` with `(PᵀMP) c = PᵀM u`.
    pub fn coarse_coefficients(&self, u: &[f64]) -> Result<Vec<f64>> {
        let rhs = self.p.mul_vec_transpose(&self.mass.mul_vec(u));
        solve_spd(&self.gram, &rhs, self.rel_tol)
            .map_err(|e| e.with_context("weighted L2 projection"))
    }

    pub fn project(&self, u: &FEFunction) -> Result<FEFunction> {
        if u.level_index != self.fine_level || u.values.len() != self.p.nrows() {
            return Err(Error::structure(format!(
                "projector acts on level {}, function is on level {}",
                self.fine_level, u.level_index
            )));
        }
        Ok(FEFunction {
            level_index: self.coarse_level,
            values: self.coarse_coefficients(&u.values)?,
            space: SpaceTag::Coarse,
        })
    }

    /// `(I − Q) u` on the fine level.
    pub fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        let c = self.coarse_coefficients(u)?;
        let pc = self.p.mul_vec(&c);
        Ok(u.iter().zip(&pc).map(|(a, b)| a - b).collect())
    }

    /// `‖(I − Q) u‖_{L²_α}`.
    pub fn error_norm(&self, u: &[f64]) -> Result<f64> {
        let r = self.residual(u)?;
        Ok(self.mass.quadratic_form(&r).max(0.0).sqrt())
    }
}

/// Solve `(PᵀMP) c = PᵀM u` for the coarse coefficients of `Q u`.
pub fn weighted_l2_project(
    u_fine: &FEFunction,
    coarse: &MeshLevel,
    p: &CsrMatrix,
    mass_fine: &CsrMatrix,
    rel_tol: f64,
) -> Result<FEFunction> {
    if p.ncols() != coarse.num_free() {
        return Err(Error::structure("prolongation does not match the coarse level"));
    }
    Projector::from_parts(
        coarse.level_index(),
        u_fine.level_index,
        p.clone(),
        mass_fine.clone(),
        rel_tol,
    )?
    .project(u_fine)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubdomainNorms {
    /// Unweighted ‖u‖²_{L²(Ω_k)}.
    pub l2_sq: f64,
    /// Unweighted |u|²_{H¹(Ω_k)}.
    pub h1_semi_sq: f64,
}

impl SubdomainNorms {
    pub fn h1_full_sq(&self) -> f64 {
        self.l2_sq + self.h1_semi_sq
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l2_alpha: f64,
    pub h1_semi_alpha: f64,
    pub h1_full_alpha: f64,
    pub per_subdomain: Vec<SubdomainNorms>,
}

/// Weighted norms of `u`, evaluated by exact elementwise integration.
pub fn norms(
    u: &FEFunction,
    mesh: &MeshLevel,
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
) -> Result<Norms> {
    u.check_level(mesh)?;
    alpha.tet_weights(mesh, dec)?;
    let full = u.full_values(mesh);
    let map = dec.tet_map(mesh.level_index());
    let mut per = vec![SubdomainNorms::default(); dec.num_subdomains()];
    let local: Vec<(f64, f64)> = (0..mesh.num_tets())
        .into_par_iter()
        .map(|t| element_norms(mesh, t, &full))
        .collect();
    for (t, (l2, h1)) in local.into_iter().enumerate() {
        per[map[t]].l2_sq += l2;
        per[map[t]].h1_semi_sq += h1;
    }
    let (mut l2, mut h1) = (0.0, 0.0);
    for (k, s) in per.iter().enumerate() {
        l2 += alpha.get(k) * s.l2_sq;
        h1 += alpha.get(k) * s.h1_semi_sq;
    }
    Ok(Norms {
        l2_alpha: l2.sqrt(),
        h1_semi_alpha: h1.sqrt(),
        h1_full_alpha: (l2 + h1).sqrt(),
        per_subdomain: per,
    })
}

/// `(∫_K u², ∫_K |∇u|²)` for the P1 function with vertex values `full`.
pub fn element_norms(mesh: &MeshLevel, t: usize, full: &[f64]) -> (f64, f64) {
    let tet = mesh.tets()[t];
    let vol = mesh.tet_volume(t);
    let u = [full[tet[0]], full[tet[1]], full[tet[2]], full[tet[3]]];
    let s: f64 = u.iter().sum();
    let sq: f64 = u.iter().map(|x| x * x).sum();
    let l2 = vol / 20.0 * (sq + s * s);
    let g = mesh.barycentric_gradients(t);
    let mut grad = [0.0; 3];
    for i in 0..4 {
        for a in 0..3 {
            grad[a] += u[i] * g[i][a];
        }
    }
    (l2, vol * dot3(grad, grad))
}

/// Nodal interpolant of `f` on the free nodes of `mesh`.
pub fn interpolate<F: Fn(Point) -> f64 + Sync>(f: F, mesh: &MeshLevel) -> FEFunction {
    let values = mesh
        .free_nodes()
        .par_iter()
        .map(|&v| f(mesh.vertices()[v]))
        .collect();
    FEFunction {
        level_index: mesh.level_index(),
        values,
        space: SpaceTag::Fine,
    }
}

/// Sharp constant `sup_u ‖(I − Q)u‖_{L²_α} / |u|_{H¹_α}` over the fine
/// space, from power iteration on `A⁻¹ M (I − Q)`.
pub fn projection_error_operator_norm(
    coarse: &MeshLevel,
    fine: &MeshLevel,
    dec: &SubdomainDecomposition,
    alpha: &CoefficientField,
    rel_tol: f64,
    opts: PowerOptions,
) -> Result<f64> {
    let mass = assemble_mass_weighted(fine, dec, alpha)?;
    let stiff = assemble_stiffness_weighted(fine, dec, alpha)?;
    let proj = Projector::new(coarse, fine, mass, rel_tol)?;
    let est = generalized_power_iteration(
        fine.num_free(),
        |x| {
            let r = proj.residual(x)?;
            Ok(proj.mass().mul_vec(&r))
        },
        |x| Ok(stiff.mul_vec(x)),
        |y| solve_spd(&stiff, y, rel_tol).map_err(|e| e.with_context("operator-norm probe")),
        opts,
    )?;
    Ok(est.value.max(0.0).sqrt())
}

/// `(u, v)` in the inner product of an assembled SPD matrix.
pub fn inner(a: &CsrMatrix, u: &[f64], v: &[f64]) -> f64 {
    dot(u, &a.mul_vec(v))
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::mesh::{assign_subdomains, DecompositionSpec, MeshHierarchy};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn projection_is_idempotent_and_scale_invariant(
            u in prop::collection::vec(-1.0f64..1.0, 27),
            w in prop::collection::vec(-6i32..=0, 4),
            log_c in -6.0f64..6.0,
        ) {
            let h = MeshHierarchy::build(2, 1).unwrap();
            let alpha: Vec<f64> = w.iter().map(|&e| 10f64.powi(e)).collect();
            let dec = assign_subdomains(&h, &DecompositionSpec::new([2, 2, 1], alpha)).unwrap();
            let a = CoefficientField::from_decomposition(&dec);
            let (coarse, fine) = (h.level(0), h.level(1));
            let mass = assemble_mass_weighted(fine, &dec, &a).unwrap();
            let q = Projector::new(coarse, fine, mass.clone(), 1e-13).unwrap();
            let qs = Projector::new(coarse, fine, mass.scaled(10f64.powf(log_c)), 1e-13).unwrap();
            let c = q.coarse_coefficients(&u).unwrap();
            let again = q.coarse_coefficients(&q.prolongation().mul_vec(&c)).unwrap();
            let scaled = qs.coarse_coefficients(&u).unwrap();
            for i in 0..c.len() {
                prop_assert!((again[i] - c[i]).abs() <= 1e-10 * (1.0 + c[i].abs()));
                prop_assert!((scaled[i] - c[i]).abs() <= 1e-10 * (1.0 + c[i].abs()));
            }
            // Pythagoras in the weighted inner product.
            let r = q.residual(&u).unwrap();
            let pc = q.prolongation().mul_vec(&c);
            prop_assert!(inner(q.mass(), &r, &pc).abs() <= 1e-9 * (1.0 + q.mass().quadratic_form(&u)));
        }

        #[test]
        fn norms_are_homogeneous(s in -4.0f64..4.0, k in 0u32..3) {
            let h = MeshHierarchy::build(2, 1).unwrap();
            let dec = assign_subdomains(&h, &DecompositionSpec::new([1, 1, 2], vec![1.0, 10f64.powi(-(k as i32))])).unwrap();
            let a = CoefficientField::from_decomposition(&dec);
            let fine = h.level(1);
            let u = interpolate(|p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[2]), fine);
            let su = FEFunction::new(fine, u.values.iter().map(|v| s * v).collect(), SpaceTag::Fine).unwrap();
            let (n1, n2) = (norms(&u, fine, &dec, &a).unwrap(), norms(&su, fine, &dec, &a).unwrap());
            prop_assert!((n2.l2_alpha - s.abs() * n1.l2_alpha).abs() <= 1e-12 * (1.0 + n2.l2_alpha));
            prop_assert!((n2.h1_semi_alpha - s.abs() * n1.h1_semi_alpha).abs() <= 1e-12 * (1.0 + n2.h1_semi_alpha));
            prop_assert!(n1.h1_full_alpha >= n1.h1_semi_alpha);
        }
    }
}
