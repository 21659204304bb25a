//! Tokenization, corpora, evaluation protocols and the synthetic key-token task.

mod corpus;
mod eval;
mod keytask;

pub use corpus::{
    byte_tokenize, detokenize, detokenize_text, load_corpus, parse_id_line, sample_documents,
    Document, BOS, EOS, VOCAB_SIZE,
};
pub use eval::{
    eval_prompt_label, load_items, log_softmax, perplexity_with_context, prompt_label_forward,
    EvalSpec, ItemResult, LabelEvalSpec, LabelReport, PplReport, PplRow, PromptLabelItem,
};
pub use keytask::{
    gen_keytoken_task, gen_keytoken_task_with, keytask_deviation, keytoken_model, KeyTaskParams,
    KeyTokenTask, KEY_BASE, KEY_VALUES, SILENT, WEAK_BASE,
};
