//! Frozen-feature evaluation: transfer modes, linear probing, phase metrics
//! and label-efficiency sweeps.

pub mod chart;
pub mod features;
pub mod metrics;
pub mod probe;
pub mod sweep;

pub use chart::accuracy_chart_svg;
pub use features::{extract_features, init_transfer, FeatureMode, FeatureSet};
pub use metrics::{compute_phase_metrics, ClassMetrics, Metrics};
pub use probe::{fit_linear_probe, stratified_subset, LinearProbe, ProbeConfig};
pub use sweep::{CSV_HEADER, label_efficiency_sweep, split_train_test, SweepEncoder, SweepResult, SweepRow, SweepSummary};
