//! Multi-branch 2-bit network: branch plan, selection strategies, the
//! model itself, cost and storage accounting, checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod cost;
pub mod model;
pub mod plan;

pub use arch::{ArchSpec, ConvSpec, LayerShape};
pub use cost::{compute_cost, storage_report, BodyEncoding, CostRow, StorageReport};
pub use model::{ForwardOutput, ForwardRecord, Mode, MultiQuantModel, WeightScheme};
pub use plan::{
    build_branch_plan, build_selection_map, explicit_selection_map, parse_bits, parse_explicit_map, BranchId,
    BranchPlan, SelectionMap, Strategy,
};
