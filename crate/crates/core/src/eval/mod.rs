//! Decoding, BLEU, noise-injection robustness and representation probing.

pub mod bleu;
pub mod decode;
pub mod noise;
pub mod probe;

pub use bleu::{corpus_bleu, ngram_precision, sequence_accuracy};
pub use decode::{beam_decode, beam_search, decode_corpus, greedy_decode, BeamConfig, Hypothesis, StepScorer};
pub use noise::{inject_noise, noise_eval, NoiseKind, NoiseRow, NoiseSpec};
pub use probe::{extract_representations, probe, probe_dataset, probe_model, ProbeConfig, ProbeResult, ProbeTask};
