//! Feature-map and kernel pruning: masks, best-of-N random selection, the
//! weight-sum baseline, physical application, and per-layer accounting.

mod apply;
mod combined;
mod mask;
mod report;
mod select;

pub use apply::{apply_feature_map_mask, apply_kernel_mask, apply_mask};
pub use combined::{
    choose_mask, combined_prune, combined_prune_with, prune_stage, Criterion, PruneConfig, StageOutcome,
};
pub use mask::{
    enumerate_candidates, layer_candidates, round_half_up, sample_counts, sample_mask, Granularity, LayerMask,
    MaskRequest, PruningMask,
};
pub use report::{pruning_report, truncate_tenth, LayerReport, PruneReport};
pub use select::{
    evaluate_mask, generate_candidates, select_best_of_n, select_from, weight_sum_select, weight_sum_select_with,
    weight_sums, SelectOptions, Selection,
};
