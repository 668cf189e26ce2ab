//! Capability interfaces for the image model, perception services and MLLM roles.

mod cost;
pub mod http;
pub mod mllm;
pub mod scripted;

use std::sync::Arc;

use thiserror::Error;

use crate::evidence::Perception;

pub use cost::{CallRecord, CostMeter, CostSnapshot};
pub use mllm::{AuditReply, CandidateJudge, ChatReply, ChatRequest, ChatTransport, MllmClient, MllmConfig, MllmRole, ReviewReply};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out")]
    Timeout,
    #[error("reply failed schema: {0}")]
    SchemaViolation(String),
    #[error("backend failure: {0}")]
    Failure(String),
    #[error("no evidence: {0}")]
    Missing(String),
    #[error("unparseable edit instruction: {0}")]
    UnparseableInstruction(String),
    #[error("infeasible program: {0}")]
    InfeasibleProgram(String),
}

/// Opaque handle to an image held by the image-model backend.
pub type ImageRef = String;

/// Generator and instruction editor. Each successful or failed call is one execution.
pub trait ImageModel: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError>;
    fn edit(&self, image: &ImageRef, instruction: &str, seed: u64) -> Result<ImageRef, BackendError>;
}

/// Opens perception (detection, region scoring, depth) over one image.
pub trait PerceptionService: Send + Sync {
    fn open<'a>(&'a self, image: &ImageRef) -> Result<Box<dyn Perception + 'a>, BackendError>;
}

/// Everything a run needs from the outside world.
#[derive(Clone)]
pub struct BackendSuite {
    pub image: Arc<dyn ImageModel>,
    pub perception: Arc<dyn PerceptionService>,
    pub chat: Arc<dyn ChatTransport>,
    pub mllm: MllmConfig,
}

impl BackendSuite {
    /// MLLM client whose usage is recorded into `meter`.
    pub fn client(&self, meter: Arc<CostMeter>) -> MllmClient {
        MllmClient::new(self.chat.clone(), self.mllm.clone(), meter)
    }
}
