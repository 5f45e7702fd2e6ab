//! Newline-delimited JSON protocol between the trainer and a scorer.
//!
//! Each side opens with `{"type":"hello","version":1}`. Requests are
//! `{"id":n,"type":"score","original":[..],"rewritten":[..],"step":n}` and
//! responses `{"id":n,"sa":x,"pc":x}`, one object per line.

mod client;
mod server;

pub use client::{ClientOptions, ProtocolClient};
pub use server::{serve, serve_tcp, MockEvaluator};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Executor;
use crate::reward::RewardScore;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message {line:?}: {reason}")]
    Malformed { line: String, reason: String },
    #[error("unknown message type {kind:?} in {line:?}")]
    UnknownType { kind: String, line: String },
    #[error("protocol version mismatch: ours {ours}, peer {theirs}")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("Likert bound violated in {line:?}")]
    OutOfBounds { line: String },
    #[error("expected hello, got {line:?}")]
    MissingHello { line: String },
    #[error("request {id} timed out")]
    Timeout { id: u64 },
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("duplicate in-flight request id {id}")]
    DuplicateId { id: u64 },
    #[error("scoring request {id} failed: {reason}")]
    Scoring { id: u64, reason: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreRequest {
    pub id: u64,
    pub original: Vec<u32>,
    pub rewritten: Vec<u32>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreResponse {
    pub id: u64,
    pub sa: f64,
    pub pc: f64,
}

impl ScoreResponse {
    pub fn score(&self) -> RewardScore {
        RewardScore {
            sa: self.sa,
            pc: self.pc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u32 },
    Request(ScoreRequest),
    Response(ScoreResponse),
}

#[derive(Serialize)]
struct HelloOut<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    version: u32,
}

#[derive(Serialize)]
struct RequestOut<'a> {
    id: u64,
    #[serde(rename = "type")]
    kind: &'a str,
    original: &'a [u32],
    rewritten: &'a [u32],
    step: u64,
}

#[derive(Serialize)]
struct ResponseOut {
    id: u64,
    sa: f64,
    pc: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HelloIn {
    #[serde(rename = "type")]
    _kind: String,
    version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestIn {
    id: u64,
    #[serde(rename = "type")]
    _kind: String,
    original: Vec<u32>,
    rewritten: Vec<u32>,
    step: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseIn {
    id: u64,
    sa: f64,
    pc: f64,
}

/// Encodes a message as one newline-terminated line.
pub fn encode(msg: &Message) -> String {
    let mut s = match msg {
        Message::Hello { version } => serde_json::to_string(&HelloOut {
            kind: "hello",
            version: *version,
        }),
        Message::Request(r) => serde_json::to_string(&RequestOut {
            id: r.id,
            kind: "score",
            original: &r.original,
            rewritten: &r.rewritten,
            step: r.step,
        }),
        Message::Response(r) => serde_json::to_string(&ResponseOut {
            id: r.id,
            sa: r.sa,
            pc: r.pc,
        }),
    }
    .expect("protocol messages always serialize");
    s.push('\n');
    s
}

pub fn hello() -> Message {
    Message::Hello {
        version: PROTOCOL_VERSION,
    }
}

/// Decodes one line (with or without its trailing newline).
pub fn decode(line: &str) -> Result<Message, ProtocolError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let malformed = |reason: String| ProtocolError::Malformed {
        line: line.to_string(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| malformed("not a JSON object".into()))?;
    match obj.get("type") {
        Some(serde_json::Value::String(kind)) => match kind.as_str() {
            "hello" => {
                let h: HelloIn = serde_json::from_value(value.clone()).map_err(|e| malformed(e.to_string()))?;
                Ok(Message::Hello { version: h.version })
            }
            "score" => {
                let r: RequestIn = serde_json::from_value(value.clone()).map_err(|e| malformed(e.to_string()))?;
                Ok(Message::Request(ScoreRequest {
                    id: r.id,
                    original: r.original,
                    rewritten: r.rewritten,
                    step: r.step,
                }))
            }
            other => Err(ProtocolError::UnknownType {
                kind: other.to_string(),
                line: line.to_string(),
            }),
        },
        Some(_) => Err(malformed("\"type\" must be a string".into())),
        None => {
            let r: ResponseIn = serde_json::from_value(value.clone()).map_err(|e| malformed(e.to_string()))?;
            let ok = |x: f64| x.is_finite() && (1.0..=5.0).contains(&x);
            if !ok(r.sa) || !ok(r.pc) {
                return Err(ProtocolError::OutOfBounds { line: line.to_string() });
            }
            Ok(Message::Response(ScoreResponse {
                id: r.id,
                sa: r.sa,
                pc: r.pc,
            }))
        }
    }
}

/// Validates a peer hello line.
pub fn check_hello(line: &str) -> Result<(), ProtocolError> {
    match decode(line) {
        Ok(Message::Hello { version }) if version == PROTOCOL_VERSION => Ok(()),
        Ok(Message::Hello { version }) => Err(ProtocolError::VersionMismatch {
            ours: PROTOCOL_VERSION,
            theirs: version,
        }),
        Ok(_) => Err(ProtocolError::MissingHello { line: line.to_string() }),
        Err(e) => Err(e),
    }
}

/// Anything that turns rewrite requests into Likert score pairs, in order.
pub trait Scorer: Sync {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<RewardScore>, ProtocolError>;
}

/// Scores through [`MockEvaluator`] in the calling process.
#[derive(Debug, Clone)]
pub struct InProcessScorer {
    pub evaluator: MockEvaluator,
    pub exec: Executor,
}

impl InProcessScorer {
    pub fn new(evaluator: MockEvaluator, exec: Executor) -> Self {
        Self { evaluator, exec }
    }
}

impl Scorer for InProcessScorer {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<RewardScore>, ProtocolError> {
        self.exec
            .map(requests, |r| self.evaluator.respond(r).map(|resp| resp.score()))
            .into_iter()
            .collect()
    }
}

impl Scorer for ProtocolClient {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<RewardScore>, ProtocolError> {
        self.score_batch(requests)
            .into_iter()
            .map(|r| r.map(|resp| resp.score()))
            .collect()
    }
}
