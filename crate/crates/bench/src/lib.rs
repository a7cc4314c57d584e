//! Shared fixtures for the kernel benchmarks.

use wproj_core::experiments::{make_distribution, DistributionKind};
use wproj_core::{assign_subdomains, CoefficientField, MeshHierarchy, SubdomainDecomposition};

pub struct Fixture {
    pub hierarchy: MeshHierarchy,
    pub decomposition: SubdomainDecomposition,
    pub alpha: CoefficientField,
}

/// Checkerboard columns at jump `eps` on a `coarse_n³` mesh refined `levels` times.
pub fn checkerboard(coarse_n: usize, levels: usize, eps: f64) -> Fixture {
    let hierarchy = MeshHierarchy::build(coarse_n, levels).expect("hierarchy");
    let spec = make_distribution(&DistributionKind::CheckerboardColumns, eps).expect("spec");
    let decomposition = assign_subdomains(&hierarchy, &spec).expect("decomposition");
    let alpha = CoefficientField::from_decomposition(&decomposition);
    Fixture {
        hierarchy,
        decomposition,
        alpha,
    }
}
