//! Provider abstraction and the OpenAI-compatible HTTP adapter.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{GatewayError, Message, Role, ToolSpec, Usage};

/// One model turn: either final text or a request to invoke a tool.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelTurn {
    Text(String),
    ToolCall {
        id: Option<String>,
        name: String,
        arguments: serde_json::Value,
    },
}

#[derive(Debug, Clone)]
pub struct ProviderResponse {
    pub turn: ModelTurn,
    pub usage: Usage,
}

/// A chat-completion backend. Implementations must be safe to call from
/// multiple worker threads.
pub trait ChatProvider: Send + Sync {
    fn chat(
        &self,
        model_id: &str,
        messages: &[Message],
        tools: &[ToolSpec],
        temperature: f64,
        timeout: Duration,
    ) -> Result<ProviderResponse, GatewayError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Adapter for any endpoint speaking the OpenAI chat-completions and
/// embeddings protocol. Credentials come from the environment:
/// `OPENAI_API_KEY`, optionally `OPENAI_BASE_URL`.
pub struct OpenAiProvider {
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl OpenAiProvider {
    pub fn from_env() -> Result<OpenAiProvider, GatewayError> {
        let api_key = std::env::var("OPENAI_API_KEY")
            .map_err(|_| GatewayError::MissingCredentials("OPENAI_API_KEY is not set".into()))?;
        let base_url = std::env::var("OPENAI_BASE_URL")
            .unwrap_or_else(|_| "https://api.openai.com/v1".to_string());
        Ok(OpenAiProvider {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            client: reqwest::blocking::Client::new(),
        })
    }

    fn wire_messages(messages: &[Message]) -> Vec<serde_json::Value> {
        messages
            .iter()
            .map(|m| match m.role {
                Role::Assistant if m.tool_call.is_some() => {
                    let tc = m.tool_call.as_ref().expect("checked above");
                    json!({
                        "role": "assistant",
                        "content": serde_json::Value::Null,
                        "tool_calls": [{
                            "id": tc.id,
                            "type": "function",
                            "function": {"name": tc.name, "arguments": tc.arguments},
                        }],
                    })
                }
                Role::Tool => json!({
                    "role": "tool",
                    "tool_call_id": m.tool_call_id.clone().unwrap_or_default(),
                    "content": m.content,
                }),
                _ => json!({"role": m.role.as_str(), "content": m.content}),
            })
            .collect()
    }

    fn post(
        &self,
        path: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<serde_json::Value, GatewayError> {
        let url = format!("{}{}", self.base_url, path);
        let resp = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e|

                if e.is_timeout() {
                    GatewayError::Timeout(format!("{} after {:?}", url, timeout))
                } else {
                    GatewayError::Transport(e.to_string())
                }
            )?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(GatewayError::Auth(format!("{}: {}", status, text)));
        }
        if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
            return Err(GatewayError::Transport(format!("{}: {}", status, text)));
        }
        if !status.is_success() {
            return Err(GatewayError::Provider(format!("{}: {}", status, text)));
        }
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Provider(format!("malformed provider response: {}", e)))
    }
}

#[derive(Deserialize)]
struct WireCompletion {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<WireToolCall>,
}

#[derive(Deserialize)]
struct WireToolCall {
    #[serde(default)]
    id: Option<String>,
    function: WireFunction,
}

#[derive(Deserialize)]
struct WireFunction {
    name: String,
    arguments: String,
}

#[derive(Deserialize, Serialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatProvider for OpenAiProvider {
    fn chat(
        &self,
        model_id: &str,
        messages: &[Message],
        tools: &[ToolSpec],
        temperature: f64,
        timeout: Duration,
    ) -> Result<ProviderResponse, GatewayError> {
        let mut body = json!({
            "model": model_id,
            "messages": Self::wire_messages(messages),
            "temperature": temperature,
        });
        if !tools.is_empty() {
            body["tools"] = tools
                .iter()
                .map(|t| {
                    json!({
                        "type": "function",
                        "function": {
                            "name": t.name,
                            "description": t.description,
                            "parameters": t.parameters,
                        },
                    })
                })
                .collect();
        }
        let raw = self.post("/chat/completions", &body, timeout)?;
        let parsed: WireCompletion = serde_json::from_value(raw)
            .map_err(|e| GatewayError::Provider(format!("malformed completion: {}", e)))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Provider("completion has no choices".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        let turn = if let Some(tc) = choice.message.tool_calls.into_iter().next() {
            let arguments = serde_json::from_str(&tc.function.arguments)
                .unwrap_or(serde_json::Value::String(tc.function.arguments));
            ModelTurn::ToolCall {
                id: tc.id,
                name: tc.function.name,
                arguments,
            }
        } else {
            ModelTurn::Text(choice.message.content.unwrap_or_default())
        };
        Ok(ProviderResponse { turn, usage })
    }
}

impl EmbeddingProvider for OpenAiProvider {
    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        #[derive(Deserialize)]
        struct WireEmbeddings {
            data: Vec<WireEmbedding>,
        }
        #[derive(Deserialize)]
        struct WireEmbedding {
            embedding: Vec<f64>,
        }
        let body = json!({"model": model_id, "input": texts});
        let raw = self.post("/embeddings", &body, Duration::from_secs(120))?;
        let parsed: WireEmbeddings = serde_json::from_value(raw)
            .map_err(|e| GatewayError::Provider(format!("malformed embeddings: {}", e)))?;
        if parsed.data.len() != texts.len() {
            return Err(GatewayError::Provider(format!(
                "embedding count mismatch: sent {}, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
