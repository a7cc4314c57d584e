pub mod coeff;
pub mod eigen;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod mesh;
pub mod sparse;
pub mod trace;

pub use coeff::{analyze, DistributionReport, ThornyEdge, ThornyVertex};
pub use eigen::{generalized_power_iteration, EigenEstimate, PowerOptions};
pub use error::{Error, Result};
pub use experiments::{
    make_distribution, ConvergenceRecord, DistributionKind, ExperimentConfig, RatioKind,
    ReportFormat, TestFunction,
};
pub use fem::{CoefficientField, FEFunction, Projector, SpaceTag};
pub use mesh::{
    assign_subdomains, DecompositionSpec, InterfaceClass, MeshHierarchy, MeshLevel, PerturbSpec,
    Side, Skeleton, SubdomainDecomposition,
};
pub use sparse::CsrMatrix;
pub use trace::{TraceFunction, TraceSpace, TraceSubset};
