//! Raw completion → five-way category mapping.
//!
//! External mode posts each text to a pluggable classifier endpoint; fallback
//! mode applies a deterministic keyword cascade so the pipeline runs offline.

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::ResponseCategory;
use crate::error::{Error, Result};
use crate::responses::ResponseRecord;

/// Env var holding the bearer token sent to the external classifier.
pub const CLASSIFIER_TOKEN_VAR: &str = "IRTBIAS_CLASSIFIER_TOKEN";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Classify the survey answer below as exactly one of \
SA, A, D, SD, PNA. Reply with the label only.\n\nAnswer: {text}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperMode {
    External,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub mode: MapperMode,
    pub endpoint: Option<String>,
    /// `{text}` is replaced with the raw completion.
    pub prompt_template: String,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            mode: MapperMode::Fallback,
            endpoint: None,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            timeout: Duration::from_secs(10),
            max_retries: 2,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.endpoint) {
            (MapperMode::External, None) => {
                return Err(Error::Validation(
                    "external mode requires an endpoint".into(),
                ))
            }
            (MapperMode::Fallback, Some(_)) => {
                return Err(Error::Validation("fallback mode takes no endpoint".into()))
            }
            _ => {}
        }
        if self.timeout.is_zero() {
            return Err(Error::Validation("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// One classified completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedResponse {
    pub category: ResponseCategory,
    pub confidence: Option<f64>,
    pub source: MapperMode,
}

/// One raw completion awaiting classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub respondent_id: String,
    #[serde(default)]
    pub group: String,
    pub item_id: u32,
    pub raw_text: String,
}

/// Per-row failure inside a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRowError {
    pub index: usize,
    pub respondent_id: String,
    pub item_id: u32,
    pub kind: String,
    pub message: String,
}

/// Batch result: records in input order plus collected row failures.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub records: Vec<ResponseRecord>,
    pub errors: Vec<BatchRowError>,
}

/// Refusal phrases checked before any agreement keyword.
const REFUSAL_PHRASES: [&str; 5] = [
    "prefer not to answer",
    "cannot take a position",
    "as an ai",
    "i won't answer",
    "both sides",
];

/// Keyword cascade on lowercased text; first match wins, no match → PNA.
fn fallback_category(text: &str) -> ResponseCategory {
    let lower = text.to_lowercase();
    if REFUSAL_PHRASES.iter().any(|p| lower.contains(p)) {
        return ResponseCategory::Pna;
    }
    if lower.contains("strongly agree") {
        return ResponseCategory::StronglyAgree;
    }
    if lower.contains("strongly disagree") {
        return ResponseCategory::StronglyDisagree;
    }
    if lower.contains("disagree") || lower.contains("do not agree") {
        return ResponseCategory::Disagree;
    }
    if lower.contains("agree") || lower.contains("support this") {
        return ResponseCategory::Agree;
    }
    ResponseCategory::Pna
}

#[derive(Deserialize)]
struct ClassifierReply {
    label: String,
    #[serde(default)]
    confidence: Option<f64>,
}

fn external_category(
    text: &str,
    cfg: &MapperConfig,
    agent: &ureq::Agent,
) -> Result<MappedResponse> {
    let url = cfg.endpoint.as_deref().expect("validated");
    let prompt = cfg.prompt_template.replace("{text}", text);
    let payload = serde_json::json!({ "prompt": prompt });
    let token = std::env::var(CLASSIFIER_TOKEN_VAR).ok();

    let attempts = cfg.max_retries + 1;
    let mut last_error = String::new();
    for _ in 0..attempts {
        let mut req = agent.post(url);
        if let Some(token) = &token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        match req.send_json(&payload) {
            Ok(mut resp) => {
                let reply: ClassifierReply = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| Error::UnparseableLabel(e.to_string()))?;
                let label = reply.label.trim().to_uppercase();
                let category: ResponseCategory = label
                    .parse()
                    .map_err(|_| Error::UnparseableLabel(reply.label.clone()))?;
                if category == ResponseCategory::Missing {
                    return Err(Error::UnparseableLabel(reply.label));
                }
                if let Some(c) = reply.confidence {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(Error::UnparseableLabel(format!(
                            "confidence {c} outside [0, 1]"
                        )));
                    }
                }
                return Ok(MappedResponse {
                    category,
                    confidence: reply.confidence,
                    source: MapperMode::External,
                });
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(Error::EndpointUnreachable {
        url: url.to_string(),
        attempts,
        last_error,
    })
}

fn agent_for(cfg: &MapperConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .build()
        .new_agent()
}

/// Classify one completion. Pure in fallback mode.
pub fn map_response(raw_text: &str, cfg: &MapperConfig) -> Result<MappedResponse> {
    cfg.validate()?;
    map_with_agent(raw_text, cfg, &agent_for(cfg))
}

fn map_with_agent(
    raw_text: &str,
    cfg: &MapperConfig,
    agent: &ureq::Agent,
) -> Result<MappedResponse> {
    let text = raw_text.trim();
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    match cfg.mode {
        MapperMode::Fallback => Ok(MappedResponse {
            category: fallback_category(text),
            confidence: None,
            source: MapperMode::Fallback,
        }),
        MapperMode::External => external_category(text, cfg, agent),
    }
}

/// Classify a batch, preserving input order. Row failures are collected;
/// the call errors only when every row fails.
pub fn batch_map(rows: &[RawCompletion], cfg: &MapperConfig) -> Result<BatchOutcome> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    let agent = agent_for(cfg);
    let outcomes: Vec<std::result::Result<ResponseRecord, BatchRowError>> = rows
        .par_iter()
        .enumerate()
        .map(|(index, row)| {
            map_with_agent(&row.raw_text, cfg, &agent)
                .map(|mapped| ResponseRecord {
                    respondent_id: row.respondent_id.clone(),
                    group: row.group.clone(),
                    item_id: row.item_id,
                    category: mapped.category,
                    raw_text: Some(row.raw_text.clone()),
                })
                .map_err(|e| BatchRowError {
                    index,
                    respondent_id: row.respondent_id.clone(),
                    item_id: row.item_id,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                })
        })
        .collect();

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => errors.push(e),
        }
    }
    if records.is_empty() {
        return Err(Error::BatchFailed(errors.len()));
    }
    Ok(BatchOutcome { records, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn fallback_cfg() -> MapperConfig {
        MapperConfig::default()
    }

    fn external_cfg(url: String) -> MapperConfig {
        MapperConfig {
            mode: MapperMode::External,
            endpoint: Some(url),
            timeout: Duration::from_secs(2),
            max_retries: 0,
            ..MapperConfig::default()
        }
    }

    /// Tiny single-use HTTP server: answers `n` requests with fixed bodies.
    fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/classify", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for body in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 1024];
                let request = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(pos) = text.find("\r\n\r\n") {
                        let len: usize = text
                            .lines()
                            .find_map(|l| {
                                l.to_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= pos + 4 + len {
                            break text;
                        }
                    }
                };
                seen.push(request);
                let reply = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            seen
        });
        (url, handle)
    }

    #[test]
    fn fallback_keyword_examples() {
        let cfg = fallback_cfg();
        let cases = [
            (
                "I strongly agree with this statement.",
                ResponseCategory::StronglyAgree,
            ),
            (
                "As an AI, I can't take a position on this.",
                ResponseCategory::Pna,
            ),
            (
                "I strongly disagree entirely.",
                ResponseCategory::StronglyDisagree,
            ),
            ("I do not agree with that.", ResponseCategory::Disagree),
            ("I would support this bill.", ResponseCategory::Agree),
            ("The weather is nice today.", ResponseCategory::Pna),
        ];
        for (text, want) in cases {
            let got = map_response(text, &cfg).unwrap();
            assert_eq!(got.category, want, "{text}");
            assert_eq!(got.source, MapperMode::Fallback);
            assert_eq!(got.confidence, None);
        }
    }

    #[test]
    fn fallback_is_pure_and_closed_over_five_labels() {
        let cfg = fallback_cfg();
        let corpus: Vec<serde_json::Value> =
            serde_json::from_str(include_str!("../tests/data/mapper_corpus.json")).unwrap();
        for entry in &corpus {
            let text = entry["text"].as_str().unwrap();
            let a = map_response(text, &cfg).unwrap();
            let b = map_response(text, &cfg).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.category, ResponseCategory::Missing);
        }
    }

    #[test]
    fn fallback_accuracy_on_labeled_corpus() {
        let cfg = fallback_cfg();
        let corpus: Vec<serde_json::Value> =
            serde_json::from_str(include_str!("../tests/data/mapper_corpus.json")).unwrap();
        assert_eq!(corpus.len(), 50);
        let mut hits = 0;
        for entry in &corpus {
            let text = entry["text"].as_str().unwrap();
            let label: ResponseCategory = entry["label"].as_str().unwrap().parse().unwrap();
            if map_response(text, &cfg).unwrap().category == label {
                hits += 1;
            }
        }
        let accuracy = hits as f64 / corpus.len() as f64;
        assert!(accuracy >= 0.8, "fallback accuracy {accuracy}");
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(
            map_response("   \n", &fallback_cfg()),
            Err(Error::EmptyText)
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = MapperConfig {
            mode: MapperMode::External,
            ..MapperConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://localhost:1/x".into());
        assert!(cfg.validate().is_ok());
        cfg.mode = MapperMode::Fallback;
        assert!(cfg.validate().is_err());
        cfg.endpoint = None;
        cfg.timeout = Duration::ZERO;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn external_mode_round_trip() {
        let (url, server) = serve(vec![r#"{"label":"sd","confidence":0.93}"#.to_string()]);
        let cfg = external_cfg(url);
        let got = map_response("The state should stay out of this.", &cfg).unwrap();
        assert_eq!(got.category, ResponseCategory::StronglyDisagree);
        assert_eq!(got.confidence, Some(0.93));
        assert_eq!(got.source, MapperMode::External);
        let requests = server.join().unwrap();
        assert!(requests[0].contains("The state should stay out of this."));
        assert!(requests[0].contains("prompt"));
    }

    #[test]
    fn external_mode_sends_bearer_token() {
        std::env::set_var(CLASSIFIER_TOKEN_VAR, "sekrit");
        let (url, server) = serve(vec![r#"{"label":"A"}"#.to_string()]);
        let got = map_response("fine by me, I agree", &external_cfg(url)).unwrap();
        std::env::remove_var(CLASSIFIER_TOKEN_VAR);
        assert_eq!(got.category, ResponseCategory::Agree);
        assert_eq!(got.confidence, None);
        let requests = server.join().unwrap();
        assert!(requests[0]
            .to_lowercase()
            .contains("authorization: bearer sekrit"));
    }

    #[test]
    fn external_bad_label_is_unparseable() {
        let (url, server) = serve(vec![r#"{"label":"MAYBE"}"#.to_string()]);
        let err = map_response("hmm", &external_cfg(url)).unwrap_err();
        assert!(matches!(err, Error::UnparseableLabel(_)), "{err}");
        server.join().unwrap();
    }

    #[test]
    fn external_missing_label_rejected() {
        let (url, server) = serve(vec![r#"{"label":"MISSING"}"#.to_string()]);
        let err = map_response("hmm", &external_cfg(url)).unwrap_err();
        assert!(matches!(err, Error::UnparseableLabel(_)), "{err}");
        server.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_reports_attempts() {
        // bind then drop to get a port that refuses connections
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let mut cfg = external_cfg(format!("http://127.0.0.1:{port}/classify"));
        cfg.max_retries = 1;
        let err = map_response("text", &cfg).unwrap_err();
        match err {
            Error::EndpointUnreachable { attempts, url, .. } => {
                assert_eq!(attempts, 2);
                assert!(url.contains(&port.to_string()));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    fn batch_rows() -> Vec<RawCompletion> {
        vec![
            RawCompletion {
                respondent_id: "m1".into(),
                group: "g".into(),
                item_id: 1,
                raw_text: "I strongly agree.".into(),
            },
            RawCompletion {
                respondent_id: "m1".into(),
                group: "g".into(),
                item_id: 2,
                raw_text: "I disagree with the premise.".into(),
            },
            RawCompletion {
                respondent_id: "m2".into(),
                group: "g".into(),
                item_id: 1,
                raw_text: "Both sides have a point.".into(),
            },
        ]
    }

    #[test]
    fn batch_fallback_preserves_order_and_source() {
        let outcome = batch_map(&batch_rows(), &fallback_cfg()).unwrap();
        assert_eq!(outcome.records.len(), 3);
        assert!(outcome.errors.is_empty());
        let cats: Vec<ResponseCategory> = outcome.records.iter().map(|r| r.category).collect();
        assert_eq!(
            cats,
            vec![
                ResponseCategory::StronglyAgree,
                ResponseCategory::Disagree,
                ResponseCategory::Pna
            ]
        );
        assert_eq!(outcome.records[1].respondent_id, "m1");
        assert_eq!(outcome.records[1].item_id, 2);
        assert_eq!(
            outcome.records[2].raw_text.as_deref(),
            Some("Both sides have a point.")
        );
    }

    #[test]
    fn batch_partial_failure_collects_row_errors() {
        let mut rows = batch_rows();
        rows[1].raw_text = "  ".into();
        let outcome = batch_map(&rows, &fallback_cfg()).unwrap();
        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.errors.len(), 1);
        assert_eq!(outcome.errors[0].index, 1);
        assert_eq!(outcome.errors[0].kind, "empty_text");
        assert_eq!(outcome.records.len() + outcome.errors.len(), rows.len());
    }

    #[test]
    fn batch_total_failure_errors() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let cfg = external_cfg(format!("http://127.0.0.1:{port}/classify"));
        let err = batch_map(&batch_rows(), &cfg).unwrap_err();
        assert!(matches!(err, Error::BatchFailed(3)), "{err}");
    }
}
