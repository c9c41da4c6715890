pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod strategies;
pub mod tensor;
pub mod training;
pub mod zero_resource;

pub use autodiff::{grad_check, GradientMap, Op, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use config::RunConfig;
pub use data::{LanguageSpec, ParallelCorpus, Transform, Vocab};
pub use metrics::{bleu, edit_rate, score_corpus, tb_score, EvalReport};
pub use model::{LanguageVocab, ModelConfig, MultiWayModel, SHARED_ATTENTION};
pub use strategies::{translate, translate_pivot, PivotSecondStage, StrategyKind, Translation};
pub use training::{train, AdamState, DevSet, TrainConfig, TrainPair, TrainReport};
pub use zero_resource::{clone_attention, finetune_attention, generate_pseudo_corpus, FinetuneReport, PseudoPair};
