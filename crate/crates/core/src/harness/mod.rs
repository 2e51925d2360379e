//! Synthetic workloads, sequential reference execution, the C/R oracle and
//! scenario runs.

mod oracle;
mod profile;
mod reference;
mod scenario;
mod sweep;
mod workload;

pub use oracle::{compare_oracle, OracleError, OracleReport};
pub use profile::{fuzz_config, DurationDist, WorkloadProfile, DESK_P99_NS, GPT2_INFER_PARAM_FRACTION};
pub use reference::{reference_final, reference_states, Reference};
pub use scenario::{run_scenario, trigger_seq, Comparator, Measured, Scenario, ScenarioKind, ScenarioOutcome};
pub use sweep::{apply, run_sweep, write_csv, Row, Sweep, SweepError};
pub use workload::{generate, share, Workload, ADVERSARIAL_KERNEL, HOST_ALIGN, HOST_BASE};
