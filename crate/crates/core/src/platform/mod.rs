//! Multi-tenant platform: tenant store, routing, storage capacity and
//! inference cost.

pub mod cache;
pub mod capacity;
pub mod cost;
pub mod record;
pub mod store;

pub use capacity::{
    capacity, capacity_table, parse_spaces, CapacityRow, Space, StorageModel, DEFAULT_SPACES,
};
pub use cost::{
    analytic_flops, bench_inputs, bench_model, cost_report, CostReport, CostRow, InferencePath,
    Latency,
};
pub use record::{ArtifactRef, TenantRecord};
pub use store::{Platform, RegisterOptions, Registration, TenantData};
