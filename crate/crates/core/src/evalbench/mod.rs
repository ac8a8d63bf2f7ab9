//! Evaluation and benchmarking: the kernel two-sample metric, the
//! programmatic shape-fidelity detector, the analytic transformer FLOPs
//! model, and the wall-clock harness.

pub mod cost;
pub mod mmd;
pub mod shapes;
pub mod wallclock;

pub use cost::{flops_cost, CostReport, CostSpec, StageCost};
pub use mmd::{mmd2, Bandwidth};
pub use shapes::{conditional_fidelity, detect_shapes, dominant_shape, Detection};
pub use wallclock::{bench_wallclock, BenchRow};

/// FNV-1a 64-bit digest of canonicalized configuration text, hex-encoded.
/// Stamped into every report row so results are traceable to their exact
/// configuration.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

/// One evaluation result row.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,value,n_generated,n_reference,config_hash,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.metric, self.value, self.n_generated, self.n_reference, self.config_hash, self.seed
        )
    }
}
