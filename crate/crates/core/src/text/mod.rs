//! Word vectors, vocabularies, dataset TSVs, padded batches, and seeded
//! synthetic marker-token tasks.

mod batch;
mod dataset;
mod synth;
mod vocab;

pub use batch::{batch, Batch, SentenceBatch};
pub use dataset::{dataset_to_tsv, load_dataset, tokenize, write_dataset, DatasetRecord, Schema, Target};
pub use synth::{synth_task, synth_word_vectors, SynthSpec, SynthVocab};
pub use vocab::{load_word_vectors, write_word_vectors, EmbeddingTable, LoadedVectors, Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
