//! Simulation harness: scenario populations, sample draws, the estimator
//! roster, the Monte Carlo loop and report tables.

pub mod estimators;
pub mod metrics;
pub mod montecarlo;
pub mod plasmode;
pub mod report;
pub mod sampling;
pub mod scenario;

pub use estimators::{run_estimators, DomainSpec, EstimatorSettings, Method, MethodResult, ResidualCheck};
pub use metrics::{aggregate, DomainMetrics, MethodMetrics, MetricsTable};
pub use montecarlo::{
    run_monte_carlo, run_replication, Execution, MonteCarloConfig, MonteCarloRun, PopulationSource,
    ReplicationResult, SampleDesign,
};
pub use scenario::{generate_population, ScenarioSpec, SelectionModel};
