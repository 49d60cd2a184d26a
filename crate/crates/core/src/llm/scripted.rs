use std::fmt;

use super::{ChatBackend, ChatRequest, LlmError, LlmResponse, Usage};

type Responder = dyn Fn(&ChatRequest) -> Result<Vec<String>, LlmError> + Send + Sync;

/// Backend driven by a closure. Handy for tests, demos, and for authoring
/// replay fixtures through a [`super::RecordingBackend`].
pub struct ScriptedBackend {
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn new(responder: impl Fn(&ChatRequest) -> Result<Vec<String>, LlmError> + Send + Sync + 'static) -> Self {
        ScriptedBackend { responder: Box::new(responder) }
    }
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ScriptedBackend")
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let texts = (self.responder)(request)?;
        Ok(LlmResponse { texts, model_id: request.model.clone(), usage: Usage::default() })
    }
}
