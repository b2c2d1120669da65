//! Self-supervised post-training for conversational dense retrieval: task
//! construction, a small transformer encoder with its own autodiff tape,
//! training loops, and retrieval evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod tape;
pub mod tasks;
pub mod trainer;

pub use data::{Conversation, Document, ModelInput, Vocabulary};
pub use encoder::{EncoderConfig, EncoderOutput, Model, Teacher, TeacherOutput, WordHeadInput};
pub use error::{Error, Result};
pub use objectives::{LossReport, LossWeights, TaskMask};
pub use retrieval::{DenseIndex, Qrels, RankedRun};
pub use tasks::{TaskConfig, TrainingInstance};
pub use trainer::{TrainConfig, Trainer};
