//! Evaluation: greedy transducer decoding, synthesis, CER reporting against
//! a separately trained evaluation ASR, and the ablation grid runner.

pub mod ablation;
pub mod decode;
pub mod report;
pub mod synth;

pub use ablation::{
    directional_checks, grid_lines, grid_markdown, row_flags, row_label, run_ablation,
    AblationCell, AblationConfig, AblationFlags, AblationGrid, CellMetrics, CellOutcome,
    DirectionalChecks,
};
pub use decode::{greedy_decode, greedy_decode_encoded, PseudoLabel, MAX_EMISSIONS_PER_FRAME};
pub use report::{
    cer_diff_histogram, eval_condition, report_lines, report_markdown, write_report,
    CerHistogram, EvalReport, LangEval, DEFAULT_CER_THRESHOLDS,
};
pub use synth::{synthesize, synthesize_with_ids, Synthesis};
