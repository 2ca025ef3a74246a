//! Experiment orchestration: probe training, two-pass turn measurement,
//! steering grids and the statistical summaries built on them.

pub mod analysis;
pub mod config;
pub mod grid;
pub mod measure;
pub mod query;
pub mod report;
pub mod synth;
pub mod train;

pub use analysis::{
    cross_steering_matrix, drift_summary, entropy_decomposition, introspection_family, introspection_summary,
    scaling_summary, steering_sign_validation, Channel, IntrospectionSummary, ScalingRun,
};
pub use config::{run_config, RunConfig};
pub use grid::{run_grid, GridCell, GridConcept, GridOutcome, GridSpec};
pub use measure::{measure_turn, DumpSource, MeasurementSource, ToySource};
pub use query::build_rating_query;
pub use synth::{default_topics, synthetic_conversations};
pub use train::{train_probe, train_probe_from_dumps};

/// FNV-1a over the parts, separated by a zero byte; stable across platforms
/// and releases, unlike the std hasher.
pub fn stable_hash(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::stable_hash;

    #[test]
    fn stable_hash_separates_parts() {
        assert_ne!(stable_hash(&["ab", "c"]), stable_hash(&["a", "bc"]));
        assert_eq!(stable_hash(&[]), 0xcbf2_9ce4_8422_2325);
    }
}
