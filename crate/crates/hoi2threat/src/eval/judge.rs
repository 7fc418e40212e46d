//! Remote judge client: scores candidate text on three 1-10 dimensions
//! over a plain HTTP chat endpoint.

use std::time::Duration;

use crate::error::{Error, Result};

/// System prompt sent with every judging request.
pub const RUBRIC_PROMPT: &str = "You grade a candidate description of a \
surveillance scene against its ground truth. Score three dimensions from 1 \
to 10: CoI, how well the entities in the candidate match the scene without \
inventions or omissions; BMA, whether each behavior is attached to the \
correct entities; TDO, how specifically threatening behavior is described \
rather than summarized. Reply with exactly three lines: 'CoI: <n>', \
'BMA: <n>', 'TDO: <n>'.";

/// Connection and retry settings for the judge endpoint.
#[derive(Debug, Clone)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub api_key: String,
    /// Model asked to do the judging.
    pub model_id: String,
    /// Model that produced the captions; must differ from `model_id`.
    pub generator_id: String,
    /// Additional attempts after the first, per item.
    pub max_retries: usize,
    /// Base delay between attempts; doubles each retry.
    pub backoff_ms: u64,
}

impl JudgeConfig {
    /// Reads endpoint, key and judge model from `JUDGE_ENDPOINT`,
    /// `JUDGE_API_KEY` and `JUDGE_MODEL_ID`.
    pub fn from_env(generator_id: &str) -> Result<Self> {
        let var = |name: &str| {
            std::env::var(name)
                .map_err(|_| Error::config(format!("environment variable {name} is not set")))
        };
        Ok(JudgeConfig {
            endpoint: var("JUDGE_ENDPOINT")?,
            api_key: var("JUDGE_API_KEY")?,
            model_id: var("JUDGE_MODEL_ID")?,
            generator_id: generator_id.to_string(),
            max_retries: 3,
            backoff_ms: 250,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::config("judge endpoint is empty"));
        }
        if self.model_id.is_empty() {
            return Err(Error::config("judge model id is empty"));
        }
        if self.model_id == self.generator_id {
            return Err(Error::config(format!(
                "judge model {:?} equals the caption generator; pick a different judge \
                 to avoid self-preference",
                self.model_id
            )));
        }
        Ok(())
    }
}

/// One judged sample.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct JudgeScore {
    pub coi: f64,
    pub bma: f64,
    pub tdo: f64,
    pub judge_id: String,
    pub raw_response: String,
}

/// Scores each (scene ground truth, candidate caption) pair, in input
/// order. Requests are sequential; each item is retried on transport or
/// parse failure up to `cfg.max_retries` extra times before failing the
/// whole batch.
pub fn judge_scores(items: &[(String, String)], cfg: &JudgeConfig) -> Result<Vec<JudgeScore>> {
    cfg.validate()?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into();
    let mut out = Vec::with_capacity(items.len());
    for (scene, candidate) in items {
        out.push(judge_one(&agent, cfg, scene, candidate)?);
    }
    Ok(out)
}

fn judge_one(
    agent: &ureq::Agent,
    cfg: &JudgeConfig,
    scene: &str,
    candidate: &str,
) -> Result<JudgeScore> {
    let body = serde_json::json!({
        "model": cfg.model_id,
        "messages": [
            {"role": "system", "content": RUBRIC_PROMPT},
            {"role": "user", "content": format!(
                "Ground truth:\n{scene}\n\nCandidate description:\n{candidate}"
            )},
        ],
    })
    .to_string();

    let mut last_failure = String::new();
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1)));
        }
        let sent = agent
            .post(&cfg.endpoint)
            .header("content-type", "application/json")
            .header("authorization", format!("Bearer {}", cfg.api_key))
            .send(body.as_str());
        let text = match sent.and_then(|mut resp| resp.body_mut().read_to_string()) {
            Ok(text) => text,
            Err(e) => {
                last_failure = format!("request failed: {e}");
                continue;
            }
        };
        match parse_scores(&text) {
            Ok((coi, bma, tdo)) => {
                return Ok(JudgeScore {
                    coi,
                    bma,
                    tdo,
                    judge_id: cfg.model_id.clone(),
                    raw_response: text,
                })
            }
            Err(e) => last_failure = format!("{e} in response {text:?}"),
        }
    }
    Err(Error::Judge(format!(
        "giving up after {} attempts: {last_failure}",
        cfg.max_retries + 1
    )))
}

/// Pulls `CoI: <n>`, `BMA: <n>`, `TDO: <n>` out of the completion text.
fn parse_scores(text: &str) -> Result<(f64, f64, f64)> {
    Ok((
        labeled_score(text, "CoI")?,
        labeled_score(text, "BMA")?,
        labeled_score(text, "TDO")?,
    ))
}

fn labeled_score(text: &str, label: &str) -> Result<f64> {
    let start = text
        .find(&format!("{label}:"))
        .ok_or_else(|| Error::Judge(format!("missing {label} score")))?;
    let rest = text[start + label.len() + 1..].trim_start();
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let value: u32 = digits
        .parse()
        .map_err(|_| Error::Judge(format!("unreadable {label} score")))?;
    if !(1..=10).contains(&value) {
        return Err(Error::Judge(format!("{label} score {value} outside 1-10")));
    }
    Ok(value as f64)
}
