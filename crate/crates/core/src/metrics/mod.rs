//! Gradient tail statistics and the paired significance tests.

mod stats;
mod tail;

pub use stats::{bonferroni, paired_t_one_sided, student_t_sf, wilcoxon_signed_rank, StatTestResult, TestKind, WILCOXON_EXACT_MAX_N};
pub use tail::{input_grad_norms, tail_ratio, GradTarget, InputGradients, TailRatioReport, TAIL_QUANTILE};
