//! Experiment harness: named coefficient distributions, projection-error
//! studies over jump sweeps, operator-norm sweeps, the layered auxiliary
//! function and CSV/JSON reports.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff::{analyze, multilayer_partition};
use crate::eigen::PowerOptions;
use crate::error::{Error, Result};
use crate::fem::{
    assemble_mass, assemble_mass_weighted, interpolate, norms, projection_error_operator_norm,
    CoefficientField, FEFunction, Numbering, Projector, SpaceTag,
};
use crate::mesh::{
    assign_subdomains, prolongation, DecompositionSpec, MeshHierarchy, PerturbSpec, Point,
    SubdomainDecomposition,
};
use crate::sparse::{solve_spd, DEFAULT_REL_TOL};

/// Coefficient patterns on box grids of the unit cube. Weights are powers
/// of the jump parameter `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionKind {
    /// Two boxes stacked along z, weights `1` below and `ε` above.
    MonotoneStack,
    /// 2×2 columns along z, diagonal columns `1`, off-diagonal `ε`.
    CheckerboardColumns,
    /// 2×2×2 octants, the pair at `(0,0,0)` and `(1,1,1)` gets `1`, the rest `ε`.
    OctantVertex,
    /// Three columns merged into an L at weight `1`, the fourth at `ε`.
    #[serde(rename = "quasi_monotone_L", alias = "quasi_monotone_l")]
    QuasiMonotoneL,
    /// Cell weights `ε^exponent[cell]`.
    Custom {
        grid: [usize; 3],
        exponents: Vec<f64>,
        #[serde(default)]
        merge: Vec<Vec<usize>>,
    },
}

impl DistributionKind {
    pub fn name(&self) -> &'static str {
        match self {
            DistributionKind::MonotoneStack => "monotone_stack",
            DistributionKind::CheckerboardColumns => "checkerboard_columns",
            DistributionKind::OctantVertex => "octant_vertex",
            DistributionKind::QuasiMonotoneL => "quasi_monotone_L",
            DistributionKind::Custom { .. } => "custom",
        }
    }
}

impl FromStr for DistributionKind {
    type Err = Error;

    /// Named kinds only; `custom` needs a grid and exponents.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monotone_stack" => Ok(DistributionKind::MonotoneStack),
            "checkerboard_columns" => Ok(DistributionKind::CheckerboardColumns),
            "octant_vertex" => Ok(DistributionKind::OctantVertex),
            "quasi_monotone_L" | "quasi_monotone_l" => Ok(DistributionKind::QuasiMonotoneL),
            other => Err(Error::config(format!("unknown distribution kind '{other}'"))),
        }
    }
}

/// Decomposition spec for `kind` at jump parameter `eps`.
pub fn make_distribution(kind: &DistributionKind, eps: f64) -> Result<DecompositionSpec> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!("jump parameter must be positive, got {eps}")));
    }
    Ok(match kind {
        DistributionKind::MonotoneStack => DecompositionSpec::new([1, 1, 2], vec![1.0, eps]),
        DistributionKind::CheckerboardColumns => {
            DecompositionSpec::new([2, 2, 1], vec![1.0, eps, eps, 1.0])
        }
        DistributionKind::OctantVertex => {
            let mut a = vec![eps; 8];
            a[0] = 1.0;
            a[7] = 1.0;
            DecompositionSpec::new([2, 2, 2], a)
        }
        DistributionKind::QuasiMonotoneL => {
            DecompositionSpec::new([2, 2, 1], vec![1.0, 1.0, 1.0, eps]).with_merge(vec![vec![0, 1, 2]])
        }
        DistributionKind::Custom {
            grid,
            exponents,
            merge,
        } => {
            let cells = grid.iter().product::<usize>();
            if exponents.len() != cells {
                return Err(Error::config(format!(
                    "custom distribution has {} exponents for {cells} cells",
                    exponents.len()
                )));
            }
            DecompositionSpec::new(*grid, exponents.iter().map(|p| eps.powf(*p)).collect())
                .with_merge(merge.clone())
        }
    })
}

/// Per-subdomain weights in subdomain order for a decomposition built from `spec`.
fn subdomain_alpha(dec: &SubdomainDecomposition, spec: &DecompositionSpec) -> Vec<f64> {
    let mut alpha = vec![0.0; dec.num_subdomains()];
    for (cell, &k) in dec.cell_subdomains().iter().enumerate() {
        alpha[k] = spec.alpha[cell];
    }
    alpha
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// `sin(πx) sin(πy) sin(πz)`.
    Sine,
    /// Sine bubble times an angular profile around the line `x = y = 1/2`:
    /// `+1` in the quadrant `x, y < 1/2`, `−1` in `x, y > 1/2`.
    EdgeJump,
    /// Sine bubble times a profile around the center: `+1` in the octant at
    /// the origin, `−1` in the opposite one.
    VertexJump,
}

impl TestFunction {
    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Sine => "sine",
            TestFunction::EdgeJump => "edge_jump",
            TestFunction::VertexJump => "vertex_jump",
        }
    }

    pub fn eval(&self, p: Point) -> f64 {
        use std::f64::consts::PI;
        let bubble = (PI * p[0]).sin() * (PI * p[1]).sin() * (PI * p[2]).sin();
        let profile = |s: f64, r: f64| if r < 1e-14 { 0.0 } else { -(s / r).clamp(-1.0, 1.0) };
        let [x, y, z] = [p[0] - 0.5, p[1] - 0.5, p[2] - 0.5];
        match self {
            TestFunction::Sine => bubble,
            TestFunction::EdgeJump => bubble * profile(x + y, (x * x + y * y).sqrt()),
            TestFunction::VertexJump => bubble * profile(x + y + z, (x * x + y * y + z * z).sqrt()),
        }
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(TestFunction::Sine),
            "edge_jump" => Ok(TestFunction::EdgeJump),
            "vertex_jump" => Ok(TestFunction::VertexJump),
            other => Err(Error::config(format!("unknown test function '{other}'"))),
        }
    }
}

/// Which estimate a sweep verdict is taken on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RatioKind {
    /// `‖(I−Q)u‖ / (d |u|_{H¹_α})`.
    #[default]
    Thm1,
    /// `‖(I−Q)u‖ / (d (log(H/d) log(H/h))^{1/2} |u|_{H¹_α})`.
    Thm2,
    /// `‖(I−Q)u‖² / (d² (log(H/d) Σ_{𝒮*} α‖u‖²_{H¹} + Σ_rest α|u|²_{H¹}))`.
    Thm3,
    /// `‖(I−Q)u‖² / (d² log(H/d) log(H/h) (Σ_{𝒮̃*} α‖u‖²_{H¹} + Σ_rest α|u|²_{H¹}))`.
    Thm4,
}

fn default_coarse_n() -> usize {
    4
}
fn default_test_function() -> TestFunction {
    TestFunction::Sine
}
fn default_rel_tol() -> f64 {
    DEFAULT_REL_TOL
}
fn default_power_tol() -> f64 {
    1e-3
}
fn default_power_max_iter() -> usize {
    300
}
fn default_coarse_levels() -> Vec<usize> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub distribution: DistributionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbSpec>,
    /// Cells per axis of level 0.
    #[serde(default = "default_coarse_n")]
    pub coarse_n: usize,
    /// Levels defining `d`; one record per level and `ε`.
    #[serde(default = "default_coarse_levels")]
    pub coarse_levels: Vec<usize>,
    /// Level defining `h`.
    pub fine_level: usize,
    /// Level on which `u` is interpolated; defaults to `fine_level + 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_level: Option<usize>,
    pub eps: Vec<f64>,
    #[serde(default = "default_test_function")]
    pub test_function: TestFunction,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_power_tol")]
    pub power_tol: f64,
    #[serde(default = "default_power_max_iter")]
    pub power_max_iter: usize,
    /// Also compute the operator norm for each record.
    #[serde(default)]
    pub opnorm: bool,
    #[serde(default)]
    pub ratio: RatioKind,
}

impl ExperimentConfig {
    pub fn new(distribution: DistributionKind, coarse_levels: Vec<usize>, fine_level: usize, eps: Vec<f64>) -> Self {
        ExperimentConfig {
            distribution,
            perturb: None,
            coarse_n: default_coarse_n(),
            coarse_levels,
            fine_level,
            surrogate_level: None,
            eps,
            test_function: default_test_function(),
            seed: 0,
            rel_tol: default_rel_tol(),
            power_tol: default_power_tol(),
            power_max_iter: default_power_max_iter(),
            opnorm: false,
            ratio: RatioKind::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn surrogate(&self) -> usize {
        self.surrogate_level.unwrap_or(self.fine_level + 2)
    }

    pub fn power_options(&self) -> PowerOptions {
        PowerOptions {
            tol: self.power_tol,
            max_iter: self.power_max_iter,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_levels.is_empty() {
            return Err(Error::config("no coarse levels given"));
        }
        if let Some(&c) = self.coarse_levels.iter().find(|&&c| c > self.fine_level) {
            return Err(Error::config(format!(
                "coarse level {c} is finer than fine level {}",
                self.fine_level
            )));
        }
        if self.surrogate() < self.fine_level {
            return Err(Error::config("surrogate level must not be coarser than the fine level"));
        }
        if self.eps.is_empty() {
            return Err(Error::config("empty jump parameter list"));
        }
        if let Some(e) = self.eps.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(Error::config(format!("jump parameter must be positive, got {e}")));
        }
        if self.coarse_n == 0 {
            return Err(Error::config("coarse_n must be positive"));
        }
        let cells = (self.coarse_n << self.surrogate()).pow(3);
        if cells > 32usize.pow(3) * 8 {
            return Err(Error::config(format!("surrogate level has {cells} cells, too many")));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-4) {
            return Err(Error::config("rel_tol must lie in (0, 1e-4]"));
        }
        Ok(())
    }

    fn spec(&self, eps: f64) -> Result<DecompositionSpec> {
        let mut s = make_distribution(&self.distribution, eps)?;
        s.perturb = self.perturb;
        Ok(s)
    }
}

/// Raw norms and the derived bound ratios of one experiment cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub distribution: String,
    pub test_function: String,
    pub eps: f64,
    pub d: f64,
    pub h: f64,
    /// `H`: the largest subdomain diameter.
    pub big_h: f64,
    pub coarse_level: usize,
    pub fine_level: usize,
    pub surrogate_level: usize,
    pub layers: usize,
    pub error: f64,
    pub seminorm: f64,
    /// `Σ_{𝒮*} α_k ‖u‖²_{H¹(Ω_k)}`.
    pub fullnorm_star: f64,
    /// `Σ_{∉𝒮*} α_k |u|²_{H¹(Ω_k)}`.
    pub seminorm_rest_sq: f64,
    /// The same split for the vertex-only set `𝒮̃*`.
    pub fullnorm_tilde_star: f64,
    pub seminorm_tilde_rest_sq: f64,
    pub ratio_thm1: f64,
    pub ratio_thm2: f64,
    pub ratio_thm3: f64,
    pub ratio_thm4: f64,
    pub opnorm: Option<f64>,
}

/// `(thm1, thm2, thm3, thm4)` from the raw values of `r`.
pub fn bound_ratios(r: &ConvergenceRecord) -> [f64; 4] {
    let log_d = (r.big_h / r.d).ln();
    let log_h = (r.big_h / r.h).ln();
    let e2 = r.error * r.error;
    let d2 = r.d * r.d;
    [
        r.error / (r.d * r.seminorm),
        r.error / (r.d * (log_d * log_h).sqrt() * r.seminorm),
        e2 / (d2 * (log_d * r.fullnorm_star + r.seminorm_rest_sq)),
        e2 / (d2 * log_d * log_h * (r.fullnorm_tilde_star + r.seminorm_tilde_rest_sq)),
    ]
}

impl ConvergenceRecord {
    pub fn ratio(&self, kind: RatioKind) -> f64 {
        match kind {
            RatioKind::Thm1 => self.ratio_thm1,
            RatioKind::Thm2 => self.ratio_thm2,
            RatioKind::Thm3 => self.ratio_thm3,
            RatioKind::Thm4 => self.ratio_thm4,
        }
    }
}

/// Levels, prolongations and the geometry shared by all cells of a config.
pub struct ExperimentSetup {
    pub hierarchy: MeshHierarchy,
    pub decomposition: SubdomainDecomposition,
    pub config: ExperimentConfig,
}

impl ExperimentSetup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hierarchy = MeshHierarchy::build(cfg.coarse_n, cfg.surrogate())?;
        let decomposition = assign_subdomains(&hierarchy, &cfg.spec(cfg.eps[0])?)?;
        Ok(ExperimentSetup {
            hierarchy,
            decomposition,
            config: cfg.clone(),
        })
    }

    /// Decomposition and weights at jump parameter `eps`.
    pub fn at(&self, eps: f64) -> Result<(SubdomainDecomposition, CoefficientField)> {
        let spec = self.config.spec(eps)?;
        let dec = self.decomposition.with_alpha(subdomain_alpha(&self.decomposition, &spec))?;
        let alpha = CoefficientField::from_decomposition(&dec);
        Ok((dec, alpha))
    }
}

fn cell_context(cfg: &ExperimentConfig, eps: f64, level: usize) -> String {
    format!(
        "cell distribution={} eps={eps:e} coarse_level={level}",
        cfg.distribution.name()
    )
}

fn record_for(
    setup: &ExperimentSetup,
    u: &FEFunction,
    p: &crate::sparse::CsrMatrix,
    eps: f64,
    coarse_level: usize,
) -> Result<ConvergenceRecord> {
    let cfg = &setup.config;
    let h = &setup.hierarchy;
    let surrogate = h.level(cfg.surrogate());
    let (dec, alpha) = setup.at(eps)?;
    let mass = assemble_mass_weighted(surrogate, &dec, &alpha)?;
    let proj = Projector::from_parts(coarse_level, cfg.surrogate(), p.clone(), mass, cfg.rel_tol)?;
    let error = proj.error_norm(&u.values)?;
    let n = norms(u, surrogate, &dec, &alpha)?;
    let report = analyze(&dec, &alpha);
    let split = |star: &[usize]| {
        let (mut full, mut rest) = (0.0, 0.0);
        for (k, s) in n.per_subdomain.iter().enumerate() {
            if star.contains(&k) {
                full += alpha.get(k) * s.h1_full_sq();
            } else {
                rest += alpha.get(k) * s.h1_semi_sq;
            }
        }
        (full, rest)
    };
    let (fullnorm_star, seminorm_rest_sq) = split(&report.star_set);
    let (fullnorm_tilde_star, seminorm_tilde_rest_sq) = split(&report.tilde_star_set);
    let opnorm = if cfg.opnorm {
        Some(projection_error_operator_norm(
            h.level(coarse_level),
            h.level(cfg.fine_level),
            &dec,
            &alpha,
            cfg.rel_tol,
            cfg.power_options(),
        )?)
    } else {
        None
    };
    let mut r = ConvergenceRecord {
        distribution: cfg.distribution.name().to_string(),
        test_function: cfg.test_function.name().to_string(),
        eps,
        d: h.level(coarse_level).mesh_size(),
        h: h.level(cfg.fine_level).mesh_size(),
        big_h: dec.subdomain_diameter(),
        coarse_level,
        fine_level: cfg.fine_level,
        surrogate_level: cfg.surrogate(),
        layers: report.m,
        error,
        seminorm: n.h1_semi_alpha,
        fullnorm_star,
        seminorm_rest_sq,
        fullnorm_tilde_star,
        seminorm_tilde_rest_sq,
        ratio_thm1: 0.0,
        ratio_thm2: 0.0,
        ratio_thm3: 0.0,
        ratio_thm4: 0.0,
        opnorm,
    };
    [r.ratio_thm1, r.ratio_thm2, r.ratio_thm3, r.ratio_thm4] = bound_ratios(&r);
    Ok(r)
}

/// One record per `(coarse level, ε)` of `cfg`, in that order.
pub fn run_projection_error(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRecord>> {
    let setup = ExperimentSetup::new(cfg)?;
    run_on(&setup)
}

pub fn run_on(setup: &ExperimentSetup) -> Result<Vec<ConvergenceRecord>> {
    let cfg = &setup.config;
    let surrogate = setup.hierarchy.level(cfg.surrogate());
    let f = cfg.test_function;
    let u = interpolate(move |p| f.eval(p), surrogate);
    let mut cells = Vec::new();
    for &c in &cfg.coarse_levels {
        let p = prolongation(setup.hierarchy.level(c), surrogate)?;
        for &e in &cfg.eps {
            cells.push((c, e, p.clone()));
        }
    }
    cells
        .into_par_iter()
        .map(|(c, e, p)| {
            record_for(setup, &u, &p, e, c).map_err(|err| err.with_context(cell_context(cfg, e, c)))
        })
        .collect()
}

/// Verdict on one ratio across the jump sweep at fixed `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepVerdict {
    pub d: f64,
    pub ratio: RatioKind,
    pub min: f64,
    pub max: f64,
    pub uniform: bool,
    /// Least-squares slope of `log ratio` against `log ε` when not uniform.
    pub exponent: Option<f64>,
}

impl fmt::Display for SweepVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d={} max/min={:.3} {}",
            self.d,
            self.max / self.min,
            if self.uniform { "uniform".to_string() } else {
                format!("growing (exponent {:.3})", self.exponent.unwrap_or(f64::NAN))
            }
        )
    }
}

pub const UNIFORM_FACTOR: f64 = 4.0;

pub fn sweep_verdicts(records: &[ConvergenceRecord], kind: RatioKind) -> Vec<SweepVerdict> {
    let mut by_level: BTreeMap<usize, Vec<&ConvergenceRecord>> = BTreeMap::new();
    for r in records {
        by_level.entry(r.coarse_level).or_default().push(r);
    }
    by_level
        .into_values()
        .map(|rs| {
            let vals: Vec<f64> = rs.iter().map(|r| r.ratio(kind)).collect();
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let uniform = max <= UNIFORM_FACTOR * min;
            let exponent = (!uniform).then(|| {
                let x: Vec<f64> = rs.iter().map(|r| r.eps.ln()).collect();
                let y: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
                crate::trace::linear_fit(&x, &y).slope
            });
            SweepVerdict {
                d: rs[0].d,
                ratio: kind,
                min,
                max,
                uniform,
                exponent,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<ConvergenceRecord>,
    pub verdicts: Vec<SweepVerdict>,
}

pub fn run_jump_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let records = run_projection_error(cfg)?;
    Ok(SweepReport {
        verdicts: sweep_verdicts(&records, cfg.ratio),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpnormRow {
    pub distribution: String,
    pub eps: f64,
    pub d: f64,
    pub h: f64,
    pub big_h: f64,
    pub sqrt_lambda: f64,
    /// `√λ / (d (log(H/d) log(H/h))^{1/2})`.
    pub scaled: f64,
}

/// Operator norm of `I − Q_d^α` on the fine space for each `(coarse level, ε)`.
pub fn run_opnorm_sweep(cfg: &ExperimentConfig) -> Result<Vec<OpnormRow>> {
    let setup = ExperimentSetup::new(cfg)?;
    let h = &setup.hierarchy;
    let fine = h.level(cfg.fine_level);
    let mut cells = Vec::new();
    for &c in &cfg.coarse_levels {
        for &e in &cfg.eps {
            cells.push((c, e));
        }
    }
    cells
        .into_par_iter()
        .map(|(c, e)| {
            let (dec, alpha) = setup.at(e)?;
            let coarse = h.level(c);
            let sqrt_lambda =
                projection_error_operator_norm(coarse, fine, &dec, &alpha, cfg.rel_tol, cfg.power_options())
                    .map_err(|err| err.with_context(cell_context(cfg, e, c)))?;
            let (d, hh, big_h) = (coarse.mesh_size(), fine.mesh_size(), dec.subdomain_diameter());
            let logs = (big_h / d).ln() * (big_h / hh).ln();
            Ok(OpnormRow {
                distribution: cfg.distribution.name().to_string(),
                eps: e,
                d,
                h: hh,
                big_h,
                sqrt_lambda,
                scaled: if logs > 0.0 { sqrt_lambda / (d * logs.sqrt()) } else { f64::NAN },
            })
        })
        .collect()
}

/// How a coarse node of `u_d` got its value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum NodeRule {
    /// Only `subdomain` touches the node; its own projection is used.
    Own { subdomain: usize },
    /// Interface node: the projection of `source`, the subdomain in the
    /// lowest layer among those touching the node.
    Neighbor { source: usize, receivers: Vec<usize> },
}

impl NodeRule {
    pub fn source(&self) -> usize {
        match self {
            NodeRule::Own { subdomain } => *subdomain,
            NodeRule::Neighbor { source, .. } => *source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuxiliaryFunction {
    /// Coarse free-node values.
    pub u_d: FEFunction,
    /// Rule per coarse free node.
    pub provenance: Vec<NodeRule>,
    /// `‖u − u_d‖_{L²_α}`.
    pub error_l2_alpha: f64,
}

/// The layered auxiliary function of `u` (given on any level finer than
/// `coarse_level`): every coarse node takes the local unweighted L²
/// projection of `u` computed in the lowest-layer subdomain touching it.
pub fn build_auxiliary_function(
    u: &FEFunction,
    layers: &[Vec<usize>],
    dec: &SubdomainDecomposition,
    hierarchy: &MeshHierarchy,
    coarse_level: usize,
    rel_tol: f64,
) -> Result<AuxiliaryFunction> {
    let fine = hierarchy.level(u.level_index);
    let coarse = hierarchy.level(coarse_level);
    let nsub = dec.num_subdomains();
    let mut layer_of = vec![usize::MAX; nsub];
    for (j, l) in layers.iter().enumerate() {
        for &k in l {
            if k < nsub {
                layer_of[k] = j;
            }
        }
    }
    if layer_of.contains(&usize::MAX) {
        return Err(Error::config("layers do not cover every subdomain"));
    }
    let map = dec.tet_map(u.level_index);
    // Coarse free nodes touched by each subdomain at u's level.
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); coarse.num_free()];
    for (t, tet) in fine.tets().iter().enumerate() {
        for &v in tet {
            if v < coarse.num_vertices() {
                if let Some(i) = coarse.free_index(v) {
                    if !touching[i].contains(&map[t]) {
                        touching[i].push(map[t]);
                    }
                }
            }
        }
    }
    let p = prolongation(coarse, fine)?;
    let mut local: Vec<Option<Vec<f64>>> = vec![None; nsub];
    let mut needed = vec![false; nsub];
    let mut provenance = Vec::with_capacity(coarse.num_free());
    for t in touching.iter_mut() {
        t.sort_unstable();
        let source = *t
            .iter()
            .min_by_key(|&&k| (layer_of[k], k))
            .ok_or_else(|| Error::structure("coarse node touched by no subdomain"))?;
        needed[source] = true;
        provenance.push(if t.len() == 1 {
            NodeRule::Own { subdomain: source }
        } else {
            NodeRule::Neighbor {
                source,
                receivers: t.iter().copied().filter(|&k| k != source).collect(),
            }
        });
    }
    for k in (0..nsub).filter(|&k| needed[k]) {
        let weights: Vec<f64> = map.iter().map(|&s| if s == k { 1.0 } else { 0.0 }).collect();
        let mass = assemble_mass(fine, &weights, Numbering::Free);
        let cols: Vec<usize> = (0..coarse.num_free()).filter(|&i| touching[i].contains(&k)).collect();
        let pk = p.submatrix(&(0..p.nrows()).collect::<Vec<_>>(), &cols);
        let gram = mass.galerkin(&pk);
        let rhs = pk.mul_vec_transpose(&mass.mul_vec(&u.values));
        let c = solve_spd(&gram, &rhs, rel_tol).map_err(|e| e.with_context(format!("local projection on subdomain {k}")))?;
        let mut full = vec![0.0; coarse.num_free()];
        for (i, &col) in cols.iter().enumerate() {
            full[col] = c[i];
        }
        local[k] = Some(full);
    }
    let values: Vec<f64> = provenance
        .iter()
        .enumerate()
        .map(|(i, r)| local[r.source()].as_ref().expect("projection computed")[i])
        .collect();
    let alpha = CoefficientField::from_decomposition(dec);
    let mass = assemble_mass_weighted(fine, dec, &alpha)?;
    let pv = p.mul_vec(&values);
    let diff: Vec<f64> = u.values.iter().zip(&pv).map(|(a, b)| a - b).collect();
    Ok(AuxiliaryFunction {
        u_d: FEFunction {
            level_index: coarse_level,
            values,
            space: SpaceTag::Coarse,
        },
        provenance,
        error_l2_alpha: mass.quadratic_form(&diff).max(0.0).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryRecord {
    pub distribution: String,
    pub eps: f64,
    pub d: f64,
    pub layers: usize,
    pub error_sq: f64,
    pub seminorm_sq: f64,
    /// `‖u − u_d‖²_{L²_α} / (d² |u|²_{H¹_α})`.
    pub ratio: f64,
}

/// Auxiliary-function diagnostic over the `(coarse level, ε)` cells of `cfg`.
pub fn run_auxiliary_sweep(cfg: &ExperimentConfig) -> Result<Vec<AuxiliaryRecord>> {
    let setup = ExperimentSetup::new(cfg)?;
    let surrogate = setup.hierarchy.level(cfg.surrogate());
    let f = cfg.test_function;
    let u = interpolate(move |p| f.eval(p), surrogate);
    let mut out = Vec::new();
    for &c in &cfg.coarse_levels {
        for &e in &cfg.eps {
            let (dec, alpha) = setup.at(e)?;
            let layers = multilayer_partition(&dec, &alpha);
            let aux = build_auxiliary_function(&u, &layers, &dec, &setup.hierarchy, c, cfg.rel_tol)
                .map_err(|err| err.with_context(cell_context(cfg, e, c)))?;
            let semi = norms(&u, surrogate, &dec, &alpha)?.h1_semi_alpha;
            let d = setup.hierarchy.level(c).mesh_size();
            let error_sq = aux.error_l2_alpha.powi(2);
            out.push(AuxiliaryRecord {
                distribution: cfg.distribution.name().to_string(),
                eps: e,
                d,
                layers: layers.len(),
                error_sq,
                seminorm_sq: semi * semi,
                ratio: error_sq / (d * d * semi * semi),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::config(format!("unknown report format '{other}'"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "distribution",
    "eps",
    "d",
    "h",
    "error",
    "seminorm",
    "fullnorm_star",
    "ratio_thm1",
    "ratio_thm2",
    "ratio_thm3",
    "ratio_thm4",
    "opnorm",
];

#[derive(Serialize, Deserialize)]
struct ReportRow {
    distribution: String,
    eps: f64,
    d: f64,
    h: f64,
    error: f64,
    seminorm: f64,
    fullnorm_star: f64,
    ratio_thm1: f64,
    ratio_thm2: f64,
    ratio_thm3: f64,
    ratio_thm4: f64,
    opnorm: Option<f64>,
}

impl From<&ConvergenceRecord> for ReportRow {
    fn from(r: &ConvergenceRecord) -> Self {
        ReportRow {
            distribution: r.distribution.clone(),
            eps: r.eps,
            d: r.d,
            h: r.h,
            error: r.error,
            seminorm: r.seminorm,
            fullnorm_star: r.fullnorm_star,
            ratio_thm1: r.ratio_thm1,
            ratio_thm2: r.ratio_thm2,
            ratio_thm3: r.ratio_thm3,
            ratio_thm4: r.ratio_thm4,
            opnorm: r.opnorm,
        }
    }
}

/// Write records as CSV (fixed columns) or JSON (an array of full records).
pub fn emit_report<W: Write>(records: &[ConvergenceRecord], format: ReportFormat, out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::config("no records to report"));
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in records {
                w.serialize(ReportRow::from(r)).map_err(csv_error)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, records)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Parse a JSON report written by [`emit_report`].
pub fn parse_json_report(text: &str) -> Result<Vec<ConvergenceRecord>> {
    Ok(serde_json::from_str(text)?)
}

/// Any serializable rows as CSV with a header from the field names.
pub fn write_csv<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::structure(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{detect_thorny_edges, detect_thorny_vertices, is_quasi_monotone};

    fn small(kind: DistributionKind, eps: Vec<f64>) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind, vec![0], 1, eps);
        c.coarse_n = 2;
        c.surrogate_level = Some(2);
        c
    }

    fn analyzed(kind: &DistributionKind, eps: f64) -> (SubdomainDecomposition, CoefficientField) {
        let h = MeshHierarchy::build(2, 0).unwrap();
        let dec = assign_subdomains(&h, &make_distribution(kind, eps).unwrap()).unwrap();
        let a = CoefficientField::from_decomposition(&dec);
        (dec, a)
    }

    #[test]
    fn named_distributions_have_expected_structure() {
        let (dec, a) = analyzed(&DistributionKind::MonotoneStack, 1e-3);
        assert!(is_quasi_monotone(&dec, &a).0);
        let (dec, a) = analyzed(&DistributionKind::CheckerboardColumns, 1e-4);
        assert_eq!(detect_thorny_edges(&dec, &a).len(), 1);
        assert!(detect_thorny_vertices(&dec, &a).is_empty());
        let (dec, a) = analyzed(&DistributionKind::OctantVertex, 1e-4);
        let v = detect_thorny_vertices(&dec, &a);
        assert!(!v.is_empty());
        assert!(v.iter().any(|t| t.point == [0.5, 0.5, 0.5]));
        let (dec, a) = analyzed(&DistributionKind::QuasiMonotoneL, 1e-2);
        assert_eq!(dec.num_subdomains(), 2);
        assert!(is_quasi_monotone(&dec, &a).0);
        assert!(matches!("tartan".parse::<DistributionKind>(), Err(Error::Config(_))));
        assert!(make_distribution(&DistributionKind::MonotoneStack, 0.0).is_err());
    }

    #[test]
    fn custom_weights_are_powers_of_eps() {
        let kind = DistributionKind::Custom {
            grid: [1, 1, 2],
            exponents: vec![0.0, 2.0],
            merge: vec![],
        };
        assert_eq!(make_distribution(&kind, 0.1).unwrap().alpha, vec![1.0, 0.1f64.powf(2.0)]);
        let bad = DistributionKind::Custom {
            grid: [2, 1, 1],
            exponents: vec![1.0],
            merge: vec![],
        };
        assert!(make_distribution(&bad, 0.1).is_err());
    }

    #[test]
    fn test_functions_vanish_on_the_boundary_and_jump() {
        for f in [TestFunction::Sine, TestFunction::EdgeJump, TestFunction::VertexJump] {
            assert!(f.eval([0.0, 0.3, 0.7]).abs() < 1e-14);
            assert!(f.eval([0.3, 1.0, 0.7]).abs() < 1e-14);
        }
        let e = TestFunction::EdgeJump;
        assert!(e.eval([0.25, 0.25, 0.5]) > 0.0);
        assert!(e.eval([0.75, 0.75, 0.5]) < 0.0);
        let b = TestFunction::Sine.eval([0.25, 0.25, 0.5]);
        assert!((e.eval([0.25, 0.25, 0.5]) - b).abs() < 1e-14);
        let v = TestFunction::VertexJump;
        assert!((v.eval([0.75, 0.75, 0.75]) + TestFunction::Sine.eval([0.75, 0.75, 0.75])).abs() < 1e-14);
        assert_eq!(v.eval([0.5, 0.5, 0.5]), 0.0);
    }

    #[test]
    fn coarse_functions_are_reproduced() {
        // A coarse P1 function is already in the coarse space.
        let h = MeshHierarchy::build(2, 2).unwrap();
        let dec = assign_subdomains(&h, &make_distribution(&DistributionKind::MonotoneStack, 1e-3).unwrap()).unwrap();
        let alpha = CoefficientField::from_decomposition(&dec);
        let p = prolongation(h.level(0), h.level(2)).unwrap();
        let u: Vec<f64> = p.mul_vec(&[1.0]);
        let mass = assemble_mass_weighted(h.level(2), &dec, &alpha).unwrap();
        let proj = Projector::from_parts(0, 2, p, mass, 1e-12).unwrap();
        assert!(proj.error_norm(&u).unwrap() <= 1e-9 * alpha.get(0).sqrt());
    }

    #[test]
    fn records_are_consistent_and_deterministic() {
        let cfg = small(DistributionKind::MonotoneStack, vec![1.0, 1e-2, 1e-4]);
        let a = run_projection_error(&cfg).unwrap();
        let b = run_projection_error(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for r in &a {
            let [t1, t2, t3, t4] = bound_ratios(r);
            assert_eq!([t1, t2, t3, t4], [r.ratio_thm1, r.ratio_thm2, r.ratio_thm3, r.ratio_thm4]);
            assert!(r.error >= 0.0 && r.seminorm >= 0.0 && r.fullnorm_star >= 0.0);
        }
        let same = run_projection_error(&small(DistributionKind::CheckerboardColumns, vec![1e-2; 3])).unwrap();
        assert!(same.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn ratios_are_scale_invariant() {
        let kind = DistributionKind::Custom {
            grid: [2, 2, 1],
            exponents: vec![0.0, 1.0, 1.0, 0.0],
            merge: vec![],
        };
        let scaled = DistributionKind::Custom {
            grid: [2, 2, 1],
            exponents: vec![-3.0, -2.0, -2.0, -3.0],
            merge: vec![],
        };
        // ε = 0.01: the second pattern is the first times 10⁶.
        let a = run_projection_error(&small(kind, vec![0.01])).unwrap();
        let b = run_projection_error(&small(scaled, vec![0.01])).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in bound_ratios(x).iter().zip(bound_ratios(y).iter()) {
                assert!((p - q).abs() <= 1e-8 * p.abs());
            }
        }
    }

    #[test]
    fn auxiliary_function_rules() {
        let h = MeshHierarchy::build(2, 2).unwrap();
        let u = interpolate(|p| TestFunction::Sine.eval(p), h.level(2));
        // Single subdomain: every node is own, value = global L² projection.
        let dec = assign_subdomains(&h, &DecompositionSpec::new([1, 1, 1], vec![1.0])).unwrap();
        let aux = build_auxiliary_function(&u, &[vec![0]], &dec, &h, 1, 1e-12).unwrap();
        assert_eq!(aux.provenance.len(), h.level(1).num_free());
        assert!(aux.provenance.iter().all(|r| *r == NodeRule::Own { subdomain: 0 }));
        let alpha = CoefficientField::from_decomposition(&dec);
        let mass = assemble_mass_weighted(h.level(2), &dec, &alpha).unwrap();
        let proj = Projector::new(h.level(1), h.level(2), mass, 1e-12).unwrap();
        let q = proj.coarse_coefficients(&u.values).unwrap();
        for (a, b) in q.iter().zip(&aux.u_d.values) {
            assert!((a - b).abs() < 1e-8);
        }

        // Two stacked boxes: interface nodes carry the heavy box's values.
        let dec = assign_subdomains(&h, &make_distribution(&DistributionKind::MonotoneStack, 1e-3).unwrap()).unwrap();
        let alpha = CoefficientField::from_decomposition(&dec);
        let layers = multilayer_partition(&dec, &alpha);
        assert_eq!(layers, vec![vec![0], vec![1]]);
        let aux = build_auxiliary_function(&u, &layers, &dec, &h, 1, 1e-12).unwrap();
        let coarse = h.level(1);
        for (i, r) in aux.provenance.iter().enumerate() {
            let z = coarse.vertices()[coarse.free_nodes()[i]][2];
            if (z - 0.5).abs() < 1e-12 {
                assert_eq!(*r, NodeRule::Neighbor { source: 0, receivers: vec![1] });
            } else if z < 0.5 {
                assert_eq!(*r, NodeRule::Own { subdomain: 0 });
            } else {
                assert_eq!(*r, NodeRule::Own { subdomain: 1 });
            }
        }
        assert!(aux.error_l2_alpha > 0.0);
    }

    #[test]
    fn reports_have_fixed_columns_and_round_trip() {
        let recs = run_projection_error(&small(DistributionKind::MonotoneStack, vec![1.0])).unwrap();
        let mut csv_out = Vec::new();
        emit_report(&recs, ReportFormat::Csv, &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], REPORT_COLUMNS.join(","));
        assert!(lines[1].ends_with(','));

        let mut j1 = Vec::new();
        emit_report(&recs, ReportFormat::Json, &mut j1).unwrap();
        let parsed = parse_json_report(std::str::from_utf8(&j1).unwrap()).unwrap();
        assert_eq!(parsed, recs);
        let mut j2 = Vec::new();
        emit_report(&parsed, ReportFormat::Json, &mut j2).unwrap();
        assert_eq!(j1, j2);
        assert!(matches!(emit_report(&[], ReportFormat::Csv, Vec::new()), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let ok = r#"{"distribution":{"kind":"monotone_stack"},"fine_level":1,"eps":[1,0.01]}"#;
        let cfg = ExperimentConfig::from_json(ok).unwrap();
        assert_eq!(cfg.surrogate(), 3);
        for bad in [
            r#"{"distribution":{"kind":"nope"},"fine_level":1,"eps":[1]}"#,
            r#"{"distribution":{"kind":"monotone_stack"},"fine_level":1,"eps":[-1]}"#,
            r#"{"distribution":{"kind":"monotone_stack"},"fine_level":1,"coarse_levels":[2],"eps":[1]}"#,
            r#"{"distribution":{"kind":"monotone_stack"},"fine_level":2,"surrogate_level":1,"eps":[1]}"#,
            r#"{"distribution":{"kind":"monotone_stack"},"fine_level":1,"eps":[]}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn opnorm_vanishes_when_levels_coincide() {
        let mut cfg = small(DistributionKind::MonotoneStack, vec![1e-2]);
        cfg.coarse_levels = vec![1];
        let rows = run_opnorm_sweep(&cfg).unwrap();
        assert!(rows[0].sqrt_lambda <= 1e-6);
    }
}
