//! The Self-Ask text format: parsing model output, serializing traces and
//! assembling few-shot prompts.

mod parse;
mod prompt;

pub use parse::{
    parse_step, parse_trace, serialize_trace, Segment, FINAL_ANSWER, FOLLOW_UP, FOLLOW_UP_NEEDED,
    INTERMEDIATE_ANSWER, NO_FOLLOW_UP_NEEDED, QUESTION,
};
pub(crate) use parse::trace_lines;
pub use prompt::{
    classify_exemplar_lines, parse_exemplar, render_prompt, render_prompt_for_answer, serialize_exemplar,
    split_blocks, Exemplar, ExemplarLine, PromptError, PromptSet, PromptVariant, VariantKind,
    BUILTIN_NQ_SA_NR, BUILTIN_NQ_SA_R1, BUILTIN_NQ_SA_R10, EXEMPLAR_LOW_RANK,
};
pub(crate) use prompt::context_lines;
