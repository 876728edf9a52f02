//! Probes for loop pathologies: per-block update magnitude, RBF-kernel CKA
//! between stages, and normalized singular spectra.

mod dump;
mod metrics;
mod probe;
mod report;

pub use dump::{is_stage_name, read_dump, read_sample, write_sample, ProbeSample, Sidecar};
pub use metrics::{cka_rbf, effort, spectrum, SPECTRUM_LEN};
pub use probe::{probe_inputs, probe_model};
pub use report::{
    aggregate, mean_std, read_report, write_report, CkaRow, EffortRow, Metric, ProbeReport,
    SpectrumRow,
};

/// Default RBF bandwidth factor on the median pairwise distance.
pub const DEFAULT_THETA: f64 = 1.0;
/// Default number of probed sequences.
pub const DEFAULT_PROBE_SAMPLES: usize = 32;
