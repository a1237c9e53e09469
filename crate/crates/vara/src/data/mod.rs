//! Feature extraction, tokenization, corpora and their on-disk format.

pub mod corpus;
pub mod mel;
pub mod synthetic;
pub mod tokenizer;

pub use corpus::{
    load_corpus, load_mel_record, save_corpus, save_mel_record, speaking_speed_target, Corpus,
    SpeedStats, Split, Utterance,
};
pub use mel::{compute_mel, load_wav, resample_linear, MelConfig, MelSpectrogram, MEL_FLOOR};
pub use synthetic::{make_synthetic_corpus, token_prototype, SynthConfig};
pub use tokenizer::{Vocab, UNK_ID};
