//! Canned MLLM replies for tests and offline runs.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;

use super::{BackendError, ChatReply, ChatRequest, ChatTransport, MllmRole};

/// Replies are consumed per role in order; once a queue is empty the role's
/// sticky reply (if any) is repeated, otherwise the call fails as unreachable.
#[derive(Default)]
pub struct ScriptedTransport {
    queues: Mutex<BTreeMap<MllmRole, VecDeque<String>>>,
    sticky: BTreeMap<MllmRole, String>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with<I, S>(self, role: MllmRole, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.queues
            .lock()
            .expect("script poisoned")
            .entry(role)
            .or_default()
            .extend(replies.into_iter().map(Into::into));
        self
    }

    pub fn always(mut self, role: MllmRole, reply: impl Into<String>) -> Self {
        self.sticky.insert(role, reply.into());
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("script poisoned").clone()
    }
}

impl ChatTransport for ScriptedTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        self.seen.lock().expect("script poisoned").push(request.clone());
        let next = self.queues.lock().expect("script poisoned").get_mut(&request.role).and_then(VecDeque::pop_front);
        next.or_else(|| self.sticky.get(&request.role).cloned())
            .map(ChatReply::text)
            .ok_or_else(|| BackendError::Unreachable(format!("no scripted reply for {:?}", request.role)))
    }
}
