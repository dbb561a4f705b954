//! Open-vocabulary pseudo-labeling: prompt sets, text/image encoding,
//! cosine cost volume, decoding, refinement to the target label space, and
//! offline generation.

pub mod cost;
pub mod embedder;
pub mod offline;
pub mod prompt;
pub mod pseudo;

pub use cost::{cost_volume, decode, encode_text, CostDiagnostics, CostVolume, TextEmbeddings};
pub use embedder::{
    read_embedding_file, write_embedding_file, Embedder, EmbeddingField, FileEmbedder, OracleEmbedder,
    TeacherInput,
};
pub use offline::{
    generate_offline, label_items, label_scenes, pseudo_label_item, OfflineItem, OfflineSource, OfflineSummary,
};
pub use prompt::{build_prompt_set, default_templates, PromptSet};
pub use pseudo::{
    make_pseudo_label, read_pseudo_label, refine_ids, self_teacher_pseudo_label, write_pseudo_label, PseudoLabel,
    PseudoLabelStore, PseudoSource,
};
