//! Interaction logs, embedding files and synthetic benchmarks.

mod emb1;
mod interactions;
mod synthetic;

pub use emb1::{
    decode_emb1, encode_emb1, load_embeddings, read_embeddings, write_embeddings,
    EmbeddingKind, EmbeddingMatrix, EMB1_MAGIC, RAW_TEXT_DIM,
};
pub use interactions::{
    interactions_text, k_core_filter, load_interactions, parse_interactions, split_dataset, write_interactions,
    Interaction, InteractionDataset, RawRecord, SplitOrder, SplitRatios, Splits,
};
pub use synthetic::{generate_synthetic, SyntheticDomain, SyntheticSpec};
