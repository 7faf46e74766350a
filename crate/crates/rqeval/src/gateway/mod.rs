//! Provider-agnostic LLM access: chat completions with an optional
//! web-search tool loop, batched embeddings, transparent retries, a
//! concurrency cap, and a content-addressed response cache.
//!
//! Scoring code never talks to a provider directly. It builds a
//! [`ChatRequest`] and calls [`Gateway::complete`] or
//! [`Gateway::complete_with_search`]; retries, caching, throttling, and
//! evidence collection all happen here.

pub mod cache;
pub mod mock;
pub mod provider;
pub mod search;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::CachePolicy;
use crate::parallel::Semaphore;
use cache::ResponseCache;
use provider::{ChatProvider, EmbeddingProvider, ModelTurn};
use search::{format_hits, SearchClient};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("no JSON object found in model reply")]
    NoJsonPayload,
    #[error("cache error: {0}")]
    CacheIo(String),
    #[error("missing credentials: {0}")]
    MissingCredentials(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    /// Transient transport conditions are worth retrying; everything else
    /// (auth, malformed requests, provider rejections) is not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::Timeout(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

/// An assistant-issued tool invocation, kept so provider adapters can
/// reconstruct protocol-faithful transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub id: String,
    pub name: String,
    /// JSON-encoded arguments, as the provider expects them back.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolInvocation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Message {
        Message::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Message {
        Message::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Message {
        Message::plain(Role::Assistant, content)
    }

    fn plain(role: Role, content: impl Into<String>) -> Message {
        Message {
            role,
            content: content.into(),
            tool_call: None,
            tool_call_id: None,
        }
    }
}

/// Declaration of a callable tool, in JSON-schema form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

/// The single tool the harness ever declares.
pub fn web_search_tool() -> ToolSpec {
    ToolSpec {
        name: "web_search".to_string(),
        description: "Search the web for technical documentation and facts.".to_string(),
        parameters: serde_json::json!({
            "type": "object",
            "properties": {
                "query": {"type": "string", "description": "The search query."}
            },
            "required": ["query"],
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub tools: Vec<ToolSpec>,
    pub temperature: f64,
    pub max_tool_rounds: u32,
    pub timeout_secs: u64,
    /// Folded into the cache key. Carries the evaluator version tag and the
    /// repetition index so repeats are cached independently.
    pub cache_tag: String,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            tools: Vec::new(),
            temperature: 0.0,
            max_tool_rounds: 5,
            timeout_secs: 120,
            cache_tag: String::new(),
        }
    }

    pub fn with_cache_tag(mut self, tag: impl Into<String>) -> ChatRequest {
        self.cache_tag = tag.into();
        self
    }

    pub fn with_max_tool_rounds(mut self, rounds: u32) -> ChatRequest {
        self.max_tool_rounds = rounds;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    fn add(&mut self, other: &Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

/// One executed search: the query the judge issued and the evidence text it
/// received back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub tool: String,
    pub query: String,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCallRecord>,
    #[serde(default)]
    pub usage: Usage,
    /// Total provider invocations, including retried ones.
    pub attempts: u32,
    /// Set when the model still wanted tools after the round cap.
    #[serde(default)]
    pub truncated_by_round_cap: bool,
    pub latency_ms: u64,
}

/// Digest identifying a request for caching: model, full message list,
/// declared tools, temperature, and the caller's version/repetition tag.
pub fn cache_key(req: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        kind: &'static str,
        model_id: &'a str,
        messages: &'a [Message],
        tools: &'a [ToolSpec],
        temperature: f64,
        cache_tag: &'a str,
    }
    let material = serde_json::to_vec(&KeyMaterial {
        kind: "chat",
        model_id: &req.model_id,
        messages: &req.messages,
        tools: &req.tools,
        temperature: req.temperature,
        cache_tag: &req.cache_tag,
    })
    .expect("key material serializes");
    hex::encode(Sha256::digest(material))
}

fn embed_cache_key(model_id: &str, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"embed\x00");
    hasher.update(model_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

/// Extracts the first balanced top-level JSON object from free-form model
/// text. Handles code fences, prose prefixes, and braces inside strings.
pub fn parse_json_payload(text: &str) -> Result<serde_json::Value, GatewayError> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(open) = bytes[start..].iter().position(|&b| b == b'{') {
        let open = start + open;
        if let Some(end) = balanced_object_end(bytes, open) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text[open..=end]) {
                if v.is_object() {
                    return Ok(v);
                }
            }
        }
        start = open + 1;
    }
    Err(GatewayError::NoJsonPayload)
}

/// Index of the `}` closing the object opened at `open`, tracking strings
/// and escapes. All control bytes are ASCII, so byte indexing is safe.
fn balanced_object_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub cache_dir: Option<PathBuf>,
    pub cache_policy: CachePolicy,
    /// Cap on simultaneous provider requests.
    pub max_in_flight: usize,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> GatewayConfig {
        GatewayConfig {
            cache_dir: None,
            cache_policy: CachePolicy::ReadWrite,
            max_in_flight: 4,
            retry_attempts: 3,
            retry_base_ms: 250,
        }
    }
}

/// Point-in-time call accounting, used by the runner to prove cache-warm
/// reruns and score recombinations issue no provider traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub provider_chat_calls: u64,
    pub provider_embed_calls: u64,
    pub cache_hits: u64,
}

pub struct Gateway {
    chat: Arc<dyn ChatProvider>,
    embedder: Arc<dyn EmbeddingProvider>,
    search: Arc<dyn SearchClient>,
    cache: Option<ResponseCache>,
    cache_policy: CachePolicy,
    limiter: Semaphore,
    retry_attempts: u32,
    retry_base: Duration,
    chat_calls: AtomicU64,
    embed_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Gateway {
    pub fn new(
        chat: Arc<dyn ChatProvider>,
        embedder: Arc<dyn EmbeddingProvider>,
        search: Arc<dyn SearchClient>,
        config: GatewayConfig,
    ) -> Gateway {
        Gateway {
            chat,
            embedder,
            search,
            cache: config.cache_dir.map(ResponseCache::new),
            cache_policy: config.cache_policy,
            limiter: Semaphore::new(config.max_in_flight),
            retry_attempts: config.retry_attempts.max(1),
            retry_base: Duration::from_millis(config.retry_base_ms),
            chat_calls: AtomicU64::new(0),
            embed_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// A gateway whose chat, embeddings, and search all run from one mock
    /// script. The standard construction for offline runs and tests.
    pub fn mock(script: mock::MockScript, config: GatewayConfig) -> Gateway {
        let chat = mock::MockChatProvider::new(script.clone());
        let embedder = mock::MockEmbeddingProvider::new(script.clone());
        let search = Arc::new(script.search_client());
        Gateway::new(chat, embedder, search, config)
    }

    /// Same as [`Gateway::mock`], but hands back the chat provider so tests
    /// can assert on call counts and conversation contents.
    pub fn mock_with_handle(
        script: mock::MockScript,
        config: GatewayConfig,
    ) -> (Gateway, Arc<mock::MockChatProvider>) {
        let chat = mock::MockChatProvider::new(script.clone());
        let embedder = mock::MockEmbeddingProvider::new(script.clone());
        let search = Arc::new(script.search_client());
        (
            Gateway::new(chat.clone(), embedder, search, config),
            chat,
        )
    }

    /// Gateway over an OpenAI-compatible endpoint, with the HTTP search
    /// client when `SEARCH_API_URL` is configured.
    pub fn live_from_env(config: GatewayConfig) -> Result<Gateway, GatewayError> {
        let provider = Arc::new(provider::OpenAiProvider::from_env()?);
        let search: Arc<dyn SearchClient> = match search::HttpSearchClient::from_env() {
            Some(c) => Arc::new(c),
            None => Arc::new(NoSearchClient),
        };
        Ok(Gateway::new(provider.clone(), provider, search, config))
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            provider_chat_calls: self.chat_calls.load(Ordering::SeqCst),
            provider_embed_calls: self.embed_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    fn cache_readable(&self) -> bool {
        self.cache.is_some() && self.cache_policy != CachePolicy::Disabled
    }

    fn cache_writable(&self) -> bool {
        self.cache.is_some() && self.cache_policy == CachePolicy::ReadWrite
    }

    fn cached_response(&self, model_id: &str, key: &str) -> Option<ChatResponse> {
        if !self.cache_readable() {
            return None;
        }
        let hit = self.cache.as_ref()?.get::<ChatResponse>(model_id, key);
        if hit.is_some() {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
        }
        hit
    }

    fn store_response(&self, model_id: &str, key: &str, resp: &ChatResponse) {
        if self.cache_writable() {
            if let Err(e) = self.cache.as_ref().expect("writable cache").put(model_id, key, resp) {
                log::warn!("cache write failed for {}: {}", key, e);
            }
        }
    }

    /// One provider invocation with retry on transient failures.
    /// Returns the response and the number of attempts consumed.
    fn call_provider(
        &self,
        req: &ChatRequest,
        messages: &[Message],
        tools: &[ToolSpec],
    ) -> Result<(provider::ProviderResponse, u32), GatewayError> {
        let timeout = Duration::from_secs(req.timeout_secs);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let _permit = self.limiter.acquire();
            self.chat_calls.fetch_add(1, Ordering::SeqCst);
            match self
                .chat
                .chat(&req.model_id, messages, tools, req.temperature, timeout)
            {
                Ok(resp) => return Ok((resp, attempt)),
                Err(e) if e.is_retryable() && attempt < self.retry_attempts => {
                    let backoff = self.retry_base * 2u32.saturating_pow(attempt - 1);
                    log::debug!("retrying after {:?}: {}", backoff, e);
                    std::thread::sleep(backoff);
                }
                Err(e) if e.is_retryable() => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Single-shot completion. The model answering with a tool call is a
    /// provider error here; use [`Gateway::complete_with_search`] for the
    /// tool loop.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if req.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("empty message list".into()));
        }
        let key = cache_key(req);
        if let Some(hit) = self.cached_response(&req.model_id, &key) {
            return Ok(hit);
        }
        let started = Instant::now();
        let (resp, attempts) = self.call_provider(req, &req.messages, &req.tools)?;
        let text = match resp.turn {
            ModelTurn::Text(t) => t,
            ModelTurn::ToolCall { name, .. } => {
                return Err(GatewayError::Provider(format!(
                    "model requested tool {:?} but no tool loop is active",
                    name
                )))
            }
        };
        let out = ChatResponse {
            text,
            tool_calls: Vec::new(),
            usage: resp.usage,
            attempts,
            truncated_by_round_cap: false,
            latency_ms: started.elapsed().as_millis() as u64,
        };
        self.store_response(&req.model_id, &key, &out);
        Ok(out)
    }

    /// Completion with the web-search tool declared. Executes search
    /// requests until the model answers in text or `max_tool_rounds`
    /// searches have run; a further tool request then sets the truncation
    /// flag. Search-service failures become tool-result messages so the
    /// judge can still answer from its own knowledge.
    pub fn complete_with_search(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if req.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("empty message list".into()));
        }
        let mut keyed = req.clone();
        keyed.tools = vec![web_search_tool()];
        let key = cache_key(&keyed);
        if let Some(hit) = self.cached_response(&req.model_id, &key) {
            return Ok(hit);
        }

        let started = Instant::now();
        let tools = keyed.tools.clone();
        let mut messages = req.messages.clone();
        let mut evidence: Vec<ToolCallRecord> = Vec::new();
        let mut usage = Usage::default();
        let mut attempts = 0u32;
        let mut truncated = false;
        let text = loop {
            let (resp, used) = self.call_provider(req, &messages, &tools)?;
            attempts += used;
            usage.add(&resp.usage);
            match resp.turn {
                ModelTurn::Text(t) => break t,
                ModelTurn::ToolCall {
                    id,
                    name,
                    arguments,
                } => {
                    if evidence.len() as u32 >= req.max_tool_rounds {
                        truncated = true;
                        break String::new();
                    }
                    let query = arguments
                        .get("query")
                        .and_then(|q| q.as_str())
                        .map(str::to_string)
                        .unwrap_or_else(|| arguments.to_string());
                    let result_text = match self.search.search(&query) {
                        Ok(hits) => format_hits(&hits),
                        Err(e) => format!("web_search failed: {}", e),
                    };
                    let call_id = id.unwrap_or_else(|| format!("call_{}", evidence.len() + 1));
                    evidence.push(ToolCallRecord {
                        tool: name.clone(),
                        query: query.clone(),
                        evidence: result_text.clone(),
                    });
                    messages.push(Message {
                        role: Role::Assistant,
                        content: String::new(),
                        tool_call: Some(ToolInvocation {
                            id: call_id.clone(),
                            name,
                            arguments: arguments.to_string(),
                        }),
                        tool_call_id: None,
                    });
                    messages.push(Message {
                        role: Role::Tool,
                        content: result_text,
                        tool_call: None,
                        tool_call_id: Some(call_id),
                    });
                }
            }
        };
        let out = ChatResponse {
            text,
            tool_calls: evidence,
            usage,
            attempts,
            truncated_by_round_cap: truncated,
            latency_ms: started.elapsed().as_millis() as u64,
        };
        self.store_response(&req.model_id, &key, &out);
        Ok(out)
    }

    /// Embeds a batch of texts, reading and writing per-text cache entries
    /// so repeated labels never re-embed.
    pub fn embed(
        &self,
        model_id: &str,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, GatewayError> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing: Vec<usize> = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let key = embed_cache_key(model_id, text);
            if self.cache_readable() {
                if let Some(v) = self.cache.as_ref().expect("cache").get::<Vec<f64>>(model_id, &key) {
                    self.cache_hits.fetch_add(1, Ordering::SeqCst);
                    out[i] = Some(v);
                    continue;
                }
            }
            missing.push(i);
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let _permit = self.limiter.acquire();
            self.embed_calls.fetch_add(1, Ordering::SeqCst);
            let embedded = self.embedder.embed(model_id, &batch)?;
            if embedded.len() != batch.len() {
                return Err(GatewayError::Provider(format!(
                    "embedding batch size mismatch: {} vs {}",
                    embedded.len(),
                    batch.len()
                )));
            }
            for (&i, vector) in missing.iter().zip(embedded) {
                if self.cache_writable() {
                    let key = embed_cache_key(model_id, &texts[i]);
                    if let Err(e) = self.cache.as_ref().expect("cache").put(model_id, &key, &vector)
                    {
                        log::warn!("embedding cache write failed: {}", e);
                    }
                }
                out[i] = Some(vector);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled slot")).collect())
    }
}

/// Placeholder search client for live configurations without a search
/// endpoint: every query reports the service as unconfigured.
struct NoSearchClient;

impl SearchClient for NoSearchClient {
    fn search(&self, _query: &str) -> Result<Vec<search::SearchHit>, search::SearchError> {
        Err(search::SearchError("no search client configured".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{MockRule, MockScript};
    use super::*;

    fn fast_config() -> GatewayConfig {
        GatewayConfig {
            retry_base_ms: 0,
            ..GatewayConfig::default()
        }
    }

    fn script_with(rules: Vec<MockRule>) -> MockScript {
        MockScript {
            rules,
            ..Default::default()
        }
    }

    fn user_req(text: &str) -> ChatRequest {
        ChatRequest::new("mock-judge", vec![Message::user(text)])
    }

    #[test]
    fn parse_json_payload_handles_fences_and_prefixes() {
        let v = parse_json_payload("```json\n{\"score\": 7, \"reason\": \"x\"}\n```").unwrap();
        assert_eq!(v["score"], 7);
        let v = parse_json_payload("Sure! Here you go: {\"a\": {\"b\": 1}} trailing").unwrap();
        assert_eq!(v["a"]["b"], 1);
    }

    #[test]
    fn parse_json_payload_respects_braces_in_strings() {
        let v = parse_json_payload(r#"{"reason": "use } and { carefully", "score": 3}"#).unwrap();
        assert_eq!(v["score"], 3);
    }

    #[test]
    fn parse_json_payload_skips_unparseable_candidates() {
        let v = parse_json_payload(r#"weight {not json} then {"score": 2}"#).unwrap();
        assert_eq!(v["score"], 2);
    }

    #[test]
    fn parse_json_payload_errors_without_object() {
        assert!(matches!(
            parse_json_payload("no json here [1, 2, 3]"),
            Err(GatewayError::NoJsonPayload)
        ));
    }

    #[test]
    fn complete_retries_transient_failures() {
        let script = script_with(vec![MockRule {
            when_contains: vec!["hello".into()],
            reply: "world".into(),
            fail_times: 2,
            ..Default::default()
        }]);
        let gw = Gateway::mock(script, fast_config());
        let resp = gw.complete(&user_req("hello")).unwrap();
        assert_eq!(resp.text, "world");
        assert_eq!(resp.attempts, 3);
        assert_eq!(gw.stats().provider_chat_calls, 3);
    }

    #[test]
    fn complete_gives_up_after_attempt_budget() {
        let script = script_with(vec![MockRule {
            when_contains: vec!["hello".into()],
            reply: "never".into(),
            fail_times: 99,
            ..Default::default()
        }]);
        let gw = Gateway::mock(script, fast_config());
        match gw.complete(&user_req("hello")) {
            Err(GatewayError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected retries exhausted, got {:?}", other),
        }
    }

    #[test]
    fn search_loop_collects_evidence_then_answers() {
        let mut script = script_with(vec![MockRule {
            when_contains: vec!["check pandas".into()],
            reply: r#"{"score": 6, "reason": "verified"}"#.into(),
            tool_calls: vec!["pandas concat api".into()],
            ..Default::default()
        }]);
        script.search_results.insert(
            "pandas concat api".into(),
            vec![search::SearchHit {
                title: "pandas.concat".into(),
                snippet: "joins along an axis".into(),
                url: "https://pandas.pydata.org".into(),
            }],
        );
        let gw = Gateway::mock(script, fast_config());
        let resp = gw.complete_with_search(&user_req("check pandas please")).unwrap();
        assert_eq!(resp.tool_calls.len(), 1);
        assert_eq!(resp.tool_calls[0].query, "pandas concat api");
        assert!(resp.tool_calls[0].evidence.contains("pandas.concat"));
        assert!(!resp.truncated_by_round_cap);
        assert!(resp.text.contains("verified"));
    }

    #[test]
    fn search_failure_becomes_tool_result() {
        let mut script = script_with(vec![MockRule {
            when_contains: vec!["flaky".into()],
            reply: "answered anyway".into(),
            tool_calls: vec!["down-query".into()],
            ..Default::default()
        }]);
        script.search_failures.push("down-query".into());
        let gw = Gateway::mock(script, fast_config());
        let resp = gw.complete_with_search(&user_req("flaky search")).unwrap();
        assert_eq!(resp.tool_calls.len(), 1);
        assert!(resp.tool_calls[0].evidence.contains("web_search failed"));
        assert_eq!(resp.text, "answered anyway");
    }

    #[test]
    fn round_cap_sets_truncation_flag() {
        let script = script_with(vec![MockRule {
            when_contains: vec!["greedy".into()],
            reply: "unreached".into(),
            tool_calls: vec!["q".into()],
            repeat_tool_calls: true,
            ..Default::default()
        }]);
        let gw = Gateway::mock(script, fast_config());
        let mut req = user_req("greedy model");
        req.max_tool_rounds = 5;
        let resp = gw.complete_with_search(&req).unwrap();
        assert!(resp.truncated_by_round_cap);
        assert_eq!(resp.tool_calls.len(), 5);
        assert!(resp.text.is_empty());
    }

    #[test]
    fn zero_rounds_never_invokes_tools() {
        let script = script_with(vec![MockRule {
            when_contains: vec!["greedy".into()],
            reply: "unreached".into(),
            tool_calls: vec!["q".into()],
            repeat_tool_calls: true,
            ..Default::default()
        }]);
        let gw = Gateway::mock(script, fast_config());
        let mut req = user_req("greedy model");
        req.max_tool_rounds = 0;
        let resp = gw.complete_with_search(&req).unwrap();
        assert!(resp.truncated_by_round_cap);
        assert!(resp.tool_calls.is_empty());
    }

    #[test]
    fn cache_serves_identical_requests_without_provider_calls() {
        let dir = tempfile::tempdir().unwrap();
        let script = script_with(vec![MockRule {
            when_contains: vec!["cached".into()],
            reply: "expensive answer".into(),
            ..Default::default()
        }]);
        let mut config = fast_config();
        config.cache_dir = Some(dir.path().to_path_buf());
        let gw = Gateway::mock(script.clone(), config.clone());
        let req = user_req("cached question");
        let first = gw.complete(&req).unwrap();
        assert_eq!(gw.stats().provider_chat_calls, 1);
        let second = gw.complete(&req).unwrap();
        assert_eq!(gw.stats().provider_chat_calls, 1);
        assert_eq!(gw.stats().cache_hits, 1);
        assert_eq!(first, second);

        // A fresh gateway over the same cache directory stays warm.
        let gw2 = Gateway::mock(script, config);
        let third = gw2.complete(&req).unwrap();
        assert_eq!(gw2.stats().provider_chat_calls, 0);
        assert_eq!(third.text, first.text);
    }

    #[test]
    fn cache_tag_and_tools_change_the_key() {
        let base = user_req("same text");
        let tagged = user_req("same text").with_cache_tag("rep1");
        assert_ne!(cache_key(&base), cache_key(&tagged));
        let mut with_tool = base.clone();
        with_tool.tools = vec![web_search_tool()];
        assert_ne!(cache_key(&base), cache_key(&with_tool));
    }

    #[test]
    fn read_only_cache_never_writes() {
        let dir = tempfile::tempdir().unwrap();
        let script = script_with(vec![MockRule {
            when_contains: vec!["q".into()],
            reply: "a".into(),
            ..Default::default()
        }]);
        let mut config = fast_config();
        config.cache_dir = Some(dir.path().to_path_buf());
        config.cache_policy = CachePolicy::ReadOnly;
        let gw = Gateway::mock(script, config);
        gw.complete(&user_req("q")).unwrap();
        gw.complete(&user_req("q")).unwrap();
        assert_eq!(gw.stats().provider_chat_calls, 2);
        assert_eq!(gw.stats().cache_hits, 0);
    }

    #[test]
    fn embeddings_cache_per_text() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fast_config();
        config.cache_dir = Some(dir.path().to_path_buf());
        let gw = Gateway::mock(MockScript::default(), config);
        let a = gw
            .embed("mock-embed", &["one".to_string(), "two".to_string()])
            .unwrap();
        assert_eq!(gw.stats().provider_embed_calls, 1);
        let b = gw
            .embed("mock-embed", &["two".to_string(), "three".to_string()])
            .unwrap();
        // "two" came from cache; only "three" hit the provider.
        assert_eq!(gw.stats().provider_embed_calls, 2);
        assert_eq!(a[1], b[0]);
    }
}
