//! Evaluation: macro-F1, explanation judging, decision-entropy analysis and
//! correlation statistics, plus report emission.

mod harness;
mod judge;
mod metrics;

pub use harness::{emit_report, eval_examples, evaluate, CdeSummary, EvalConfig, EvalReport, ExampleRecord};
pub use judge::{
    oracle_judge_score, JudgeClient, JudgeConfig, JudgeError, JudgeRequest, JudgeResponse, JUDGE_PROMPT_TEMPLATE,
};
pub use metrics::{
    average_ranks, cde_by_correctness, macro_f1, pearson, permutation_p_value, quantile, spearman, CorrectnessSplit,
    CorrelationMethod, CorrelationResult, GroupStats,
};
