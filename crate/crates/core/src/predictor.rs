//! Prediction backends behind one interface.
//!
//! `mock` emits a deterministic, always-parseable answer for offline
//! pipeline tests. `baseline` ranks the user's own conversion history
//! first, a strong heuristic the fine-tuned model has to beat. `remote`
//! posts the rendered prompt to a chat-completions endpoint with retries.
//! In-flight request volume is bounded by the orchestrator's worker count.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::compiler::UserContext;
use crate::fnv1a64;
use crate::parsing::normalize_name;
use crate::prompting::{format_answer, RenderedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Mock,
    Baseline,
    Remote,
}

impl std::str::FromStr for PredictorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(PredictorKind::Mock),
            "baseline" => Ok(PredictorKind::Baseline),
            "remote" => Ok(PredictorKind::Remote),
            other => Err(format!("unknown predictor kind: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Name of the environment variable holding the bearer token. The
    /// value is read at request time and never logged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
}

impl PredictorSpec {
    pub fn mock(seed: u64) -> Self {
        PredictorSpec {
            kind: PredictorKind::Mock,
            endpoint_url: None,
            model_name: None,
            timeout_ms: 1_000,
            max_retries: 0,
            temperature: None,
            seed: Some(seed),
            auth_env: None,
        }
    }

    pub fn baseline() -> Self {
        PredictorSpec { kind: PredictorKind::Baseline, ..PredictorSpec::mock(0) }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("predictor failed for user {user_id}: {kind}")]
pub struct PredictError {
    pub user_id: String,
    pub kind: PredictErrorKind,
}

#[derive(Debug, thiserror::Error)]
pub enum PredictErrorKind {
    #[error("remote spec requires endpoint_url and model_name")]
    InvalidSpec,
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out")]
    Timeout,
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("unusable response body: {0}")]
    BadResponse(String),
}

/// Target list length every backend aims for.
const ANSWER_ADVERTISERS: usize = 20;
const ANSWER_INTERESTS: usize = 5;

fn dedup_by_normalized(names: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for name in names {
        if seen.insert(normalize_name(&name)) {
            out.push(name);
        }
    }
    out
}

/// Deterministic completion for offline runs: the context's advertiser
/// pools shuffled by a (user_id, seed)-keyed hash, padded to exactly 20,
/// with top categories as interests. Always parses ok.
pub fn mock_completion(context: &UserContext, seed: u64) -> String {
    let user = &context.profile.user_id;
    let mut names = dedup_by_normalized(
        context
            .past_conversion_advertisers
            .iter()
            .chain(&context.preset_pool)
            .cloned(),
    );
    names.sort_by_key(|n| fnv1a64(format!("{user}|{seed}|{n}").as_bytes()));
    names.truncate(ANSWER_ADVERTISERS);
    let mut pad = 1;
    while names.len() < ANSWER_ADVERTISERS {
        names.push(format!("Placeholder Advertiser {pad}"));
        pad += 1;
    }
    let interests: Vec<String> =
        context.top_categories.iter().take(ANSWER_INTERESTS).cloned().collect();
    format_answer(&names, &interests)
}

/// Past-conversion advertisers ranked by recency-weighted frequency
/// (occurrence at most-recent-first index i weighs exp(-i/10)), then the
/// preset pool in rank order, de-duplicated, cut to 20. Shorter output is
/// possible only when both pools run dry.
pub fn baseline_rank(context: &UserContext) -> Vec<String> {
    let mut weights: Vec<(String, String, f64, usize)> = Vec::new();
    for (idx, name) in context.past_conversion_advertisers.iter().enumerate() {
        let key = normalize_name(name);
        let w = (-(idx as f64) / 10.0).exp();
        match weights.iter_mut().find(|(k, _, _, _)| *k == key) {
            Some(entry) => entry.2 += w,
            None => weights.push((key, name.clone(), w, idx)),
        }
    }
    weights.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.3.cmp(&b.3)).then(a.1.cmp(&b.1)));
    let ranked_past = weights.into_iter().map(|(_, name, _, _)| name);
    let mut out = dedup_by_normalized(ranked_past.chain(context.preset_pool.iter().cloned()));
    out.truncate(ANSWER_ADVERTISERS);
    out
}

fn baseline_completion(context: &UserContext) -> String {
    let names = baseline_rank(context);
    let interests: Vec<String> =
        context.top_categories.iter().take(ANSWER_INTERESTS).cloned().collect();
    format_answer(&names, &interests)
}

fn remote_completion(
    spec: &PredictorSpec,
    prompt: &RenderedPrompt,
    user_id: &str,
) -> Result<String, PredictError> {
    let fail = |kind| PredictError { user_id: user_id.to_owned(), kind };
    let (Some(url), Some(model)) = (spec.endpoint_url.as_deref(), spec.model_name.as_deref())
    else {
        return Err(fail(PredictErrorKind::InvalidSpec));
    };
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(spec.timeout_ms))
        .build()
        .map_err(|e| fail(PredictErrorKind::Unreachable(e.to_string())))?;

    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt.text}],
    });
    if let Some(t) = spec.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(s) = spec.seed {
        body["seed"] = json!(s);
    }
    let token = spec.auth_env.as_deref().and_then(|name| std::env::var(name).ok());

    let mut last_kind = PredictErrorKind::InvalidSpec;
    for attempt in 0..=spec.max_retries {
        if attempt > 0 {
            let backoff = 50u64.saturating_mul(1 << (attempt - 1).min(4));
            std::thread::sleep(Duration::from_millis(backoff));
        }
        let mut request = client.post(url).json(&body);
        if let Some(token) = &token {
            request = request.bearer_auth(token);
        }
        match request.send() {
            Err(e) if e.is_timeout() => last_kind = PredictErrorKind::Timeout,
            Err(e) => last_kind = PredictErrorKind::Unreachable(e.to_string()),
            Ok(response) => {
                let status = response.status();
                if status.is_success() {
                    let parsed: serde_json::Value = response
                        .json()
                        .map_err(|e| fail(PredictErrorKind::BadResponse(e.to_string())))?;
                    let content = parsed["choices"][0]["message"]["content"].as_str();
                    return match content {
                        Some(text) => Ok(text.to_owned()),
                        None => Err(fail(PredictErrorKind::BadResponse(
                            "missing choices[0].message.content".to_owned(),
                        ))),
                    };
                }
                last_kind = PredictErrorKind::HttpStatus(status.as_u16());
                if status.is_client_error() {
                    // A 4xx repeats identically; retrying only burns quota.
                    return Err(fail(last_kind));
                }
            }
        }
    }
    Err(fail(last_kind))
}

/// Runs one prediction. Mock and baseline are pure and never fail; remote
/// retries transient faults with exponential backoff, at most
/// `max_retries + 1` attempts, each bounded by `timeout_ms`.
pub fn predict(
    spec: &PredictorSpec,
    prompt: &RenderedPrompt,
    context: &UserContext,
) -> Result<String, PredictError> {
    match spec.kind {
        PredictorKind::Mock => Ok(mock_completion(context, spec.seed.unwrap_or(0))),
        PredictorKind::Baseline => Ok(baseline_completion(context)),
        PredictorKind::Remote => remote_completion(spec, prompt, &context.profile.user_id),
    }
}
