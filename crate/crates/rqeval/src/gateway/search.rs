//! Web-search clients used by the evidence-verification tool loop.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub snippet: String,
    pub url: String,
}

#[derive(Debug, Clone)]
pub struct SearchError(pub String);

impl fmt::Display for SearchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "search failed: {}", self.0)
    }
}

impl std::error::Error for SearchError {}

pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError>;
}

/// Renders hits verbatim (title, snippet, URL) for the judge's tool-result
/// message. No summarization: the judge sees what the search returned.
pub fn format_hits(hits: &[SearchHit]) -> String {
    if hits.is_empty() {
        return "No results found.".to_string();
    }
    hits.iter()
        .enumerate()
        .map(|(i, h)| format!("{}. {}\n{}\n{}", i + 1, h.title, h.snippet, h.url))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Offline client serving canned results, used by tests and mock runs.
/// Queries listed in `failures` simulate a search-service outage.
pub struct FixtureSearchClient {
    pub results: BTreeMap<String, Vec<SearchHit>>,
    pub failures: Vec<String>,
}

impl FixtureSearchClient {
    pub fn empty() -> FixtureSearchClient {
        FixtureSearchClient {
            results: BTreeMap::new(),
            failures: Vec::new(),
        }
    }
}

impl SearchClient for FixtureSearchClient {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError> {
        if self.failures.iter().any(|q| q == query) {
            return Err(SearchError(format!("scripted outage for {:?}", query)));
        }
        Ok(self.results.get(query).cloned().unwrap_or_default())
    }
}

/// Minimal HTTP search client. Posts `{"query": ..., "max_results": 5}` to
/// `SEARCH_API_URL` with `SEARCH_API_KEY` as a bearer token and expects
/// `{"results": [{"title", "snippet"|"content", "url"}]}` back.
pub struct HttpSearchClient {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpSearchClient {
    pub fn from_env() -> Option<HttpSearchClient> {
        let endpoint = std::env::var("SEARCH_API_URL").ok()?;
        let api_key = std::env::var("SEARCH_API_KEY").unwrap_or_default();
        Some(HttpSearchClient {
            endpoint,
            api_key,
            client: reqwest::blocking::Client::new(),
        })
    }
}

#[derive(Deserialize)]
struct WireSearchResponse {
    #[serde(default)]
    results: Vec<WireSearchHit>,
}

#[derive(Deserialize)]
struct WireSearchHit {
    #[serde(default)]
    title: String,
    #[serde(default)]
    snippet: Option<String>,
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    url: String,
}

impl SearchClient for HttpSearchClient {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError> {
        let body = serde_json::json!({"query": query, "max_results": 5});
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| SearchError(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(SearchError(format!("status {}", resp.status())));
        }
        let parsed: WireSearchResponse = resp.json().map_err(|e| SearchError(e.to_string()))?;
        Ok(parsed
            .results
            .into_iter()
            .map(|h| SearchHit {
                snippet: h.snippet.or(h.content).unwrap_or_default(),
                title: h.title,
                url: h.url,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_renders_title_snippet_url_verbatim() {
        let hits = vec![
            SearchHit {
                title: "pandas.concat".into(),
                snippet: "Concatenate pandas objects along an axis.".into(),
                url: "https://pandas.pydata.org/docs".into(),
            },
            SearchHit {
                title: "GIL".into(),
                snippet: "Global interpreter lock.".into(),
                url: "https://docs.python.org".into(),
            },
        ];
        let text = format_hits(&hits);
        assert!(text.starts_with("1. pandas.concat\n"));
        assert!(text.contains("2. GIL"));
        assert!(text.contains("https://docs.python.org"));
    }

    #[test]
    fn empty_results_say_so() {
        assert_eq!(format_hits(&[]), "No results found.");
    }

    #[test]
    fn fixture_client_serves_and_fails_on_script() {
        let mut results = BTreeMap::new();
        results.insert(
            "q1".to_string(),
            vec![SearchHit {
                title: "t".into(),
                snippet: "s".into(),
                url: "u".into(),
            }],
        );
        let client = FixtureSearchClient {
            results,
            failures: vec!["down".into()],
        };
        assert_eq!(client.search("q1").unwrap().len(), 1);
        assert!(client.search("missing").unwrap().is_empty());
        assert!(client.search("down").is_err());
    }
}
