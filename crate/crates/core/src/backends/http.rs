//! JSON-over-HTTP clients for a chat-completions endpoint and for image and perception services.
//!
//! Image service: `POST /generate {prompt, seed}` and `POST /edit {image, instruction, seed}`,
//! both answering `{image}`.
//! Perception service: `POST /info {image}` → `{width, height}`,
//! `POST /detect {image, query}` → `{detections: [{score, box, mask?}]}`,
//! `POST /score {image, region, text}` → `{score}`, `POST /depth {image}` → `{values | null}`.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendError, ChatReply, ChatRequest, ChatTransport, ImageModel, ImageRef, PerceptionService};
use crate::evidence::{Detection, DepthMap, FileDetection, Mask, Perception, Region};

fn map_err(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else if e.is_connect() {
        BackendError::Unreachable(e.to_string())
    } else {
        BackendError::Failure(e.to_string())
    }
}

fn client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder().timeout(timeout).build().map_err(map_err)
}

fn post<T: DeserializeOwned>(client: &Client, url: &str, key: Option<&str>, body: &Value) -> Result<T, BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    let resp = req.send().map_err(map_err)?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(BackendError::Failure(format!("{url} returned {status}: {text}")));
    }
    resp.json::<T>().map_err(|e| BackendError::SchemaViolation(e.to_string()))
}

/// Chat-completions client (`{endpoint}/chat/completions`).
pub struct HttpChatTransport {
    endpoint: String,
    api_key: Option<String>,
    client: Client,
}

impl HttpChatTransport {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        Ok(Self { endpoint: endpoint.trim_end_matches('/').to_string(), api_key, client: client(timeout)? })
    }

    pub fn body(request: &ChatRequest) -> Value {
        let mut content = vec![json!({ "type": "text", "text": request.user })];
        for img in &request.images {
            content.push(json!({ "type": "image_url", "image_url": { "url": img } }));
        }
        json!({
            "model": request.model,
            "temperature": request.temperature,
            "seed": request.seed,
            "messages": [
                { "role": "system", "content": request.system },
                { "role": "user", "content": content },
            ],
            "response_format": { "type": "json_object" },
        })
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let url = format!("{}/chat/completions", self.endpoint);
        let c: Completion = post(&self.client, &url, self.api_key.as_deref(), &Self::body(request))?;
        let content = c
            .choices
            .into_iter()
            .next()
            .and_then(|ch| ch.message.content)
            .ok_or_else(|| BackendError::SchemaViolation("completion has no content".into()))?;
        Ok(ChatReply {
            content,
            tokens_in: c.usage.as_ref().map(|u| u.prompt_tokens),
            tokens_out: c.usage.as_ref().map(|u| u.completion_tokens),
        })
    }
}

#[derive(Deserialize)]
struct ImageReply {
    image: ImageRef,
}

pub struct HttpImageModel {
    base: String,
    client: Client,
}

impl HttpImageModel {
    pub fn new(base: &str, timeout: Duration) -> Result<Self, BackendError> {
        Ok(Self { base: base.trim_end_matches('/').to_string(), client: client(timeout)? })
    }
}

impl ImageModel for HttpImageModel {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError> {
        let r: ImageReply =
            post(&self.client, &format!("{}/generate", self.base), None, &json!({ "prompt": prompt, "seed": seed }))?;
        Ok(r.image)
    }

    fn edit(&self, image: &ImageRef, instruction: &str, seed: u64) -> Result<ImageRef, BackendError> {
        let body = json!({ "image": image, "instruction": instruction, "seed": seed });
        let r: ImageReply = post(&self.client, &format!("{}/edit", self.base), None, &body)?;
        Ok(r.image)
    }
}

pub struct HttpPerceptionService {
    base: String,
    client: Client,
    /// Detections below this confidence are dropped before they reach the verifier.
    pub detector_confidence: f64,
}

impl HttpPerceptionService {
    pub fn new(base: &str, timeout: Duration, detector_confidence: f64) -> Result<Self, BackendError> {
        Ok(Self { base: base.trim_end_matches('/').to_string(), client: client(timeout)?, detector_confidence })
    }
}

#[derive(Deserialize)]
struct Info {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct DetectReply {
    detections: Vec<FileDetection>,
}

#[derive(Deserialize)]
struct ScoreReply {
    score: f64,
}

#[derive(Deserialize)]
struct DepthReply {
    values: Option<Vec<f64>>,
}

struct HttpPerception<'a> {
    service: &'a HttpPerceptionService,
    image: ImageRef,
    width: u32,
    height: u32,
}

impl PerceptionService for HttpPerceptionService {
    fn open<'a>(&'a self, image: &ImageRef) -> Result<Box<dyn Perception + 'a>, BackendError> {
        let info: Info = post(&self.client, &format!("{}/info", self.base), None, &json!({ "image": image }))?;
        Ok(Box::new(HttpPerception { service: self, image: image.clone(), width: info.width, height: info.height }))
    }
}

impl HttpPerception<'_> {
    fn call<T: DeserializeOwned>(&self, path: &str, body: Value) -> Result<T, BackendError> {
        post(&self.service.client, &format!("{}/{path}", self.service.base), None, &body)
    }
}

impl Perception for HttpPerception<'_> {
    fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn detect(&self, query: &str) -> Result<Vec<Detection>, BackendError> {
        let r: DetectReply = self.call("detect", json!({ "image": self.image, "query": query }))?;
        let mut out = Vec::new();
        for d in r.detections.into_iter().filter(|d| d.score >= self.service.detector_confidence) {
            let mask = d
                .mask
                .as_deref()
                .map(|m| Mask::from_rle(self.width, self.height, m))
                .transpose()
                .map_err(|e| BackendError::SchemaViolation(e.to_string()))?;
            out.push(Detection { label_query: query.to_string(), score: d.score, bbox: d.bbox, mask });
        }
        Ok(out)
    }

    fn region_score(&self, region: &Region, text: &str) -> Result<f64, BackendError> {
        let r: ScoreReply = self.call("score", json!({ "image": self.image, "region": region, "text": text }))?;
        Ok(r.score)
    }

    fn depth(&self) -> Result<Option<DepthMap>, BackendError> {
        let r: DepthReply = self.call("depth", json!({ "image": self.image }))?;
        Ok(r.values.map(|values| DepthMap { width: self.width, height: self.height, values }))
    }
}
