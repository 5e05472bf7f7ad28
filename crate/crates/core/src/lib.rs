//! Multimodal conversational emotion recognition over precomputed
//! utterance features: modality projection, adversarial cross-modal
//! generation, speaker-relation graph convolution and hybrid contrastive
//! training.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod gcl;
pub mod metrics;
pub mod nn;
pub mod projection;
pub mod relgraph;
pub mod tensor;
pub mod tgan;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use corpus::{
    generate_synthetic, load_corpus, save_corpus, split, Corpus, CorpusMeta, Dialogue, Dims, Modality, ModalityNoise,
    SplitRatios, Splits, SyntheticSpec, Utterance,
};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use tensor::Matrix;
pub use trainer::{FusionMode, LogRecord, LossBundle, Model, TrainConfig, Trainer};
