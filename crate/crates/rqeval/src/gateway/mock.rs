//! Deterministic scripted providers. Every offline test and mock experiment
//! runs against these: replies are selected by substring rules over the
//! conversation, embeddings come from a table with a hash fallback, and
//! search serves canned fixtures.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::provider::{ChatProvider, EmbeddingProvider, ModelTurn, ProviderResponse};
use super::search::{FixtureSearchClient, SearchHit};
use super::{GatewayError, Message, Role, ToolSpec, Usage};

/// A complete mock configuration, loadable from the JSON file behind the
/// CLI's `--mock-script` flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    /// Reply when no rule matches. Without it, unmatched requests error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_reply: Option<String>,
    /// Checked in order; the first rule whose substrings all appear in the
    /// conversation wins.
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Exact-text embedding table. Texts not listed get a deterministic
    /// hash-derived vector of `embedding_dim` components.
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Canned search results by exact query.
    #[serde(default)]
    pub search_results: BTreeMap<String, Vec<SearchHit>>,
    /// Queries that simulate a search-service outage.
    #[serde(default)]
    pub search_failures: Vec<String>,
}

fn default_embedding_dim() -> usize {
    8
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRule {
    /// Substrings that must all appear in the rendered conversation.
    pub when_contains: Vec<String>,
    #[serde(default)]
    pub reply: String,
    /// Search queries issued before the reply, one per model turn. Progress
    /// is tracked by counting tool-result messages in the conversation.
    #[serde(default)]
    pub tool_calls: Vec<String>,
    /// Keep requesting tool calls forever (for round-cap tests).
    #[serde(default)]
    pub repeat_tool_calls: bool,
    /// Fail this many invocations with a retryable transport error before
    /// behaving normally.
    #[serde(default)]
    pub fail_times: u32,
}

impl MockScript {
    pub fn from_file(path: &Path) -> Result<MockScript, GatewayError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GatewayError::InvalidRequest(format!("{}: {}", path.display(), e)))?;
        serde_json::from_slice(&bytes).map_err(|e| {
            GatewayError::InvalidRequest(format!("mock script {}: {}", path.display(), e))
        })
    }

    pub fn search_client(&self) -> FixtureSearchClient {
        FixtureSearchClient {
            results: self.search_results.clone(),
            failures: self.search_failures.clone(),
        }
    }
}

/// Rule-driven chat backend. Interior counters make scripted transient
/// failures and call accounting work across worker threads.
pub struct MockChatProvider {
    script: MockScript,
    failures_used: Mutex<Vec<u32>>,
    rule_hits: Mutex<Vec<u64>>,
    calls: AtomicU64,
    /// Conversations observed, for substring assertions in tests.
    transcript: Mutex<Vec<String>>,
}

impl MockChatProvider {
    pub fn new(script: MockScript) -> Arc<MockChatProvider> {
        let n = script.rules.len();
        Arc::new(MockChatProvider {
            script,
            failures_used: Mutex::new(vec![0; n]),
            rule_hits: Mutex::new(vec![0; n]),
            calls: AtomicU64::new(0),
        transcript: Mutex::new(Vec::new()),
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn rule_hits(&self, idx: usize) -> u64 {
        self.rule_hits.lock().expect("rule hits")[idx]
    }

    /// Number of observed conversations containing `needle`.
    pub fn calls_matching(&self, needle: &str) -> u64 {
        self.transcript
            .lock()
            .expect("transcript")
            .iter()
            .filter(|c| c.contains(needle))
            .count() as u64
    }

    fn render_conversation(model_id: &str, messages: &[Message]) -> String {
        let mut out = format!("[model {}]\n", model_id);
        for m in messages {
            out.push_str(m.role.as_str());
            out.push_str(": ");
            if let Some(tc) = &m.tool_call {
                out.push_str(&format!("[tool_call {} {}]", tc.name, tc.arguments));
            }
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }
}

impl ChatProvider for MockChatProvider {
    fn chat(
        &self,
        model_id: &str,
        messages: &[Message],
        _tools: &[ToolSpec],
        _temperature: f64,
        _timeout: Duration,
    ) -> Result<ProviderResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let convo = Self::render_conversation(model_id, messages);
        self.transcript
            .lock()
            .expect("transcript")
            .push(convo.clone());

        let matched = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.when_contains.iter().all(|s| convo.contains(s.as_str())));

        let (turn, reply_len) = match matched {
            Some((idx, rule)) => {
                self.rule_hits.lock().expect("rule hits")[idx] += 1;
                {
                    let mut used = self.failures_used.lock().expect("failure counters");
                    if used[idx] < rule.fail_times {
                        used[idx] += 1;
                        return Err(GatewayError::Transport(format!(
                            "scripted transient failure {}/{}",
                            used[idx], rule.fail_times
                        )));
                    }
                }
                let tools_done = messages.iter().filter(|m| m.role == Role::Tool).count();
                let next_query = if rule.repeat_tool_calls {
                    rule.tool_calls
                        .get(tools_done % rule.tool_calls.len().max(1))
                        .cloned()
                        .or(Some("anything".to_string()))
                } else {
                    rule.tool_calls.get(tools_done).cloned()
                };
                match next_query {
                    Some(q) => (
                        ModelTurn::ToolCall {
                            id: None,
                            name: "web_search".to_string(),
                            arguments: serde_json::json!({ "query": q }),
                        },
                        0,
                    ),
                    None => (ModelTurn::Text(rule.reply.clone()), rule.reply.len()),
                }
            }
            None => match &self.script.default_reply {
                Some(d) => (ModelTurn::Text(d.clone()), d.len()),
                None => {
                    return Err(GatewayError::Provider(format!(
                        "no mock rule matched conversation:\n{}",
                        convo
                    )))
                }
            },
        };

        Ok(ProviderResponse {
            turn,
            usage: Usage {
                prompt_tokens: (convo.len() / 4) as u64,
                completion_tokens: (reply_len / 4) as u64,
            },
        })
    }
}

/// Table-backed embedder with a hash fallback so any text embeds
/// deterministically.
pub struct MockEmbeddingProvider {
    script: MockScript,
}

impl MockEmbeddingProvider {
    pub fn new(script: MockScript) -> Arc<MockEmbeddingProvider> {
        Arc::new(MockEmbeddingProvider { script })
    }

    fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(dim);
        let mut round = 0u32;
        while out.len() < dim {
            let mut hasher = Sha256::new();
            hasher.update(text.as_bytes());
            hasher.update(round.to_le_bytes());
            let digest = hasher.finalize();
            for chunk in digest.chunks_exact(4) {
                if out.len() == dim {
                    break;
                }
                let v = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                out.push(v as f64 / u32::MAX as f64 * 2.0 - 1.0);
            }
            round += 1;
        }
        out
    }
}

impl EmbeddingProvider for MockEmbeddingProvider {
    fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts
            .iter()
            .map(|t| {
                self.script
                    .embeddings
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| Self::hash_embedding(t, self.script.embedding_dim))
            })
            .collect())
    }
}
