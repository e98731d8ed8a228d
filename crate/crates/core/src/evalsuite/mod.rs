//! Evaluation metrics: correlation, purity, probing, accuracies, confusion
//! matrices and layer/pooling selection.

mod correlation;
pub mod datasets;
mod metrics;
mod phonemes;
mod probe;
mod purity;
mod selection;

pub use correlation::{average_ranks, cosine_distance, pearson, spearman, ssimi_score};
pub use datasets::{
    load_word_pairs, read_spans_tsv, write_spans_tsv, write_word_pairs, LabelKind, LabeledSpan, LabeledSpanDataset,
    Split, Utterance, WordPair,
};
pub use metrics::{
    accuracies, accuracy, balanced_accuracy, confusion_matrix, render_confusion_pgm, weighted_accuracy,
    write_confusion_csv, Accuracies,
};
pub use phonemes::{collapse_phoneme, PhonemeFolding};
pub use probe::{
    probe_objective, train_linear_probe, train_linear_probe_from, ProbeConfig, ProbeModel, Standardizer,
};
pub use purity::{align_frames, phoneme_purity, span_to_tokens, PurityReport, TokenPurity};
pub use selection::{select_layer_pooling, GridCell, Pooling, Selection};
