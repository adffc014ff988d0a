//! Line-level encoding of protocol messages.
//!
//! Every line is `{"kind":..,"id":..,"payload":{..}}`. Numbers inside a
//! payload travel as decimal strings: floats with 17 significant digits,
//! which round-trip every finite f64 exactly, and integers in plain
//! decimal.

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::attribution::SpanTag;
use crate::error::{Error, Result};
use crate::target::{NoiseRequest, TargetAttribution, TargetCapabilities};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        protocol_version: String,
    },
    Capabilities {
        protocol_version: String,
        capabilities: TargetCapabilities,
    },
    DecodeRequest {
        tokens: Vec<String>,
        noise: Option<NoiseRequest>,
    },
    DecodeResponse {
        tokens: Vec<String>,
    },
    AttributeRequest {
        tokens: Vec<String>,
        span: SpanTag,
    },
    AttributeResponse(TargetAttribution),
    Error {
        code: String,
        message: String,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Capabilities { .. } => "capabilities",
            Message::DecodeRequest { .. } => "decode_request",
            Message::DecodeResponse { .. } => "decode_response",
            Message::AttributeRequest { .. } => "attribute_request",
            Message::AttributeResponse(_) => "attribute_response",
            Message::Error { .. } => "error",
        }
    }

    pub fn from_error(err: &Error) -> Self {
        match err {
            Error::Remote { code, message } => Message::Error {
                code: code.clone(),
                message: message.clone(),
            },
            other => Message::Error {
                code: other.code().to_string(),
                message: other.to_string(),
            },
        }
    }
}

/// A message with its request id.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub id: u64,
    pub message: Message,
}

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Protocol(format!("`{s}` is not a number")))
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::String(format_f64(*x))).collect())
}

#[derive(Serialize)]
struct Frame<'a> {
    kind: &'a str,
    id: u64,
    payload: Value,
}

/// One line, without the trailing newline.
pub fn encode(env: &Envelope) -> String {
    let payload = match &env.message {
        Message::Hello { protocol_version } => json!({ "protocol_version": protocol_version }),
        Message::Capabilities {
            protocol_version,
            capabilities: c,
        } => json!({
            "protocol_version": protocol_version,
            "supports_decode": c.supports_decode,
            "supports_noise": c.supports_noise,
            "supports_gradients": c.supports_gradients,
            "embedding_dim": c.embedding_dim.to_string(),
            "max_len": c.max_len.to_string(),
            "noise_fixed_per_decode": c.noise_fixed_per_decode,
            "name": c.name,
        }),
        Message::DecodeRequest { tokens, noise } => {
            let mut m = Map::new();
            m.insert("tokens".into(), json!(tokens));
            if let Some(n) = noise {
                m.insert("sigma2".into(), Value::String(format_f64(n.sigma2)));
                m.insert("seed".into(), Value::String(n.seed.to_string()));
            }
            Value::Object(m)
        }
        Message::DecodeResponse { tokens } => json!({ "tokens": tokens }),
        Message::AttributeRequest { tokens, span } => json!({ "tokens": tokens, "span": span.as_str() }),
        Message::AttributeResponse(a) => json!({
            "decoded": a.decoded,
            "label": floats(&a.label),
            "rationale": floats(&a.rationale),
            "total": floats(&a.total),
        }),
        Message::Error { code, message } => json!({ "code": code, "message": message }),
    };
    serde_json::to_string(&Frame {
        kind: env.message.kind(),
        id: env.id,
        payload,
    })
    .expect("frames contain only strings, bools and integers")
}

struct Fields<'a>(&'a Map<String, Value>);

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Result<&'a Value> {
        self.0
            .get(key)
            .ok_or_else(|| Error::Protocol(format!("payload missing `{key}`")))
    }

    fn str(&self, key: &str) -> Result<&'a str> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| Error::Protocol(format!("`{key}` must be a string")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.get(key)?
            .as_bool()
            .ok_or_else(|| Error::Protocol(format!("`{key}` must be a boolean")))
    }

    fn uint(&self, key: &str) -> Result<u64> {
        let s = self.str(key)?;
        s.parse()
            .map_err(|_| Error::Protocol(format!("`{key}` must be a decimal integer, got `{s}`")))
    }

    fn strings(&self, key: &str) -> Result<Vec<String>> {
        self.get(key)?
            .as_array()
            .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_string)).collect())
            .ok_or_else(|| Error::Protocol(format!("`{key}` must be an array of strings")))
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        self.strings(key)?.iter().map(|s| parse_f64(s)).collect()
    }
}

pub fn decode(line: &str) -> Result<Envelope> {
    let v: Value = serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))?;
    let frame = v
        .as_object()
        .ok_or_else(|| Error::Protocol("frame is not an object".into()))?;
    let top = Fields(frame);
    let kind = top.get("kind")?.as_str().ok_or_else(|| Error::Protocol("`kind` must be a string".into()))?;
    let id = top
        .get("id")?
        .as_u64()
        .ok_or_else(|| Error::Protocol("`id` must be a non-negative integer".into()))?;
    let payload = top
        .get("payload")?
        .as_object()
        .ok_or_else(|| Error::Protocol("`payload` must be an object".into()))?;
    let p = Fields(payload);
    let message = match kind {
        "hello" => Message::Hello {
            protocol_version: p.str("protocol_version")?.to_string(),
        },
        "capabilities" => Message::Capabilities {
            protocol_version: p.str("protocol_version")?.to_string(),
            capabilities: TargetCapabilities {
                supports_decode: p.bool("supports_decode")?,
                supports_noise: p.bool("supports_noise")?,
                supports_gradients: p.bool("supports_gradients")?,
                embedding_dim: p.uint("embedding_dim")? as usize,
                max_len: p.uint("max_len")? as usize,
                noise_fixed_per_decode: p.bool("noise_fixed_per_decode")?,
                name: p.str("name")?.to_string(),
            },
        },
        "decode_request" => {
            let noise = match (payload.contains_key("sigma2"), payload.contains_key("seed")) {
                (false, false) => None,
                (true, true) => Some(NoiseRequest {
                    sigma2: parse_f64(p.str("sigma2")?)?,
                    seed: p.uint("seed")?,
                }),
                _ => return Err(Error::Protocol("`sigma2` and `seed` go together".into())),
            };
            Message::DecodeRequest {
                tokens: p.strings("tokens")?,
                noise,
            }
        }
        "decode_response" => Message::DecodeResponse {
            tokens: p.strings("tokens")?,
        },
        "attribute_request" => Message::AttributeRequest {
            tokens: p.strings("tokens")?,
            span: p
                .str("span")?
                .parse()
                .map_err(|_| Error::Protocol(format!("unknown span `{}`", payload["span"])))?,
        },
        "attribute_response" => Message::AttributeResponse(TargetAttribution {
            decoded: p.strings("decoded")?,
            label: p.floats("label")?,
            rationale: p.floats("rationale")?,
            total: p.floats("total")?,
        }),
        "error" => Message::Error {
            code: p.str("code")?.to_string(),
            message: p.str("message")?.to_string(),
        },
        other => return Err(Error::Protocol(format!("unknown message kind `{other}`"))),
    };
    Ok(Envelope { id, message })
}
