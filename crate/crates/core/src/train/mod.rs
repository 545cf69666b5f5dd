//! Training protocol, metrics, the loss-weight ablation and report output.

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod split;
pub mod trainer;

pub use ablation::{ablate_tversky, adjacent_inversions, spearman, AblationResult, AblationRow, Trend, DEFAULT_ALPHAS};
pub use config::{Paths, RunConfig};
pub use metrics::{confusion, metrics, predict_masks, ConfusionCounts, MeanMetrics, MetricReport};
pub use optim::{Adam, Plateau};
pub use report::{plot_tradeoff, report_table, ReportRow, REFERENCE_POINTS};
pub use split::{permutation, shuffle, split_dataset};
pub use trainer::{
    batch_tensors, evaluate, evaluate_counts, finetune, history_jsonl, train, train_step, EpochRecord, RunResult,
    SchedulerConfig, TrainConfig, TrainOutcome, FINETUNE_LR,
};

pub(crate) mod par {
    /// Order-preserving map; sequential when `sequential` is set or the
    /// `parallel` feature is off.
    pub fn map<I: Sync, O: Send>(sequential: bool, items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Vec<O> {
        #[cfg(feature = "parallel")]
        if !sequential {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        let _ = sequential;
        items.iter().map(f).collect()
    }
}
