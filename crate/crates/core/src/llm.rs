//! Completion backends, the extraction retry loop and usage accounting.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::context::TabularContext;
use crate::data::Label;
use crate::expert::{run_expert, ExpertConfig};
use crate::prompt::{answer_sentence, extract_prediction, PromptDoc};

pub const API_KEY_VAR: &str = "COT2_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_inflight: usize,
    pub max_consecutive_failures: usize,
    /// Price per 1K input tokens.
    pub price_in: f64,
    /// Price per 1K output tokens.
    pub price_out: f64,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.2,
            max_inflight: 4,
            max_consecutive_failures: 10,
            price_in: 0.0,
            price_out: 0.0,
            timeout_secs: 120,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_consecutive_failures == 0 {
            return Err(LlmError::Config("max_consecutive_failures must be >= 1".into()));
        }
        if self.max_inflight == 0 {
            return Err(LlmError::Config("max_inflight must be >= 1".into()));
        }
        if !(self.price_in >= 0.0 && self.price_out >= 0.0) {
            return Err(LlmError::Config("prices must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn price(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        input_tokens as f64 / 1000.0 * self.price_in + output_tokens as f64 / 1000.0 * self.price_out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub retries: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
    pub latency_ms: u64,
}

impl Usage {
    pub fn for_call(input_tokens: u64, output_tokens: u64, latency_ms: u64, config: &LlmConfig) -> Self {
        Self {
            calls: 1,
            retries: 0,
            input_tokens,
            output_tokens,
            cost: config.price(input_tokens, output_tokens),
            latency_ms,
        }
    }

    pub fn add(&mut self, other: &Usage) {
        self.calls += other.calls;
        self.retries += other.retries;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.cost += other.cost;
        self.latency_ms += other.latency_ms;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Self {
        iter.fold(Usage::default(), |mut acc, u| {
            acc.add(&u);
            acc
        })
    }
}

/// `ceil(chars / 4)`.
pub fn approx_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response carried no completion text")]
    MissingText,
    #[error("no prediction extracted after {attempts} attempts (last: {last_error})")]
    ExtractionExhausted {
        attempts: usize,
        last_error: String,
        usage: Usage,
    },
    #[error("environment variable {API_KEY_VAR} is not set")]
    MissingApiKey,
    #[error("invalid llm config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

pub trait CompletionBackend: Sync {
    /// `remote`, `stub` or `expert`.
    fn name(&self) -> &'static str;

    fn complete(
        &self,
        prompt: &PromptDoc,
        context: &TabularContext,
        config: &LlmConfig,
    ) -> Result<Completion, LlmError>;
}

fn stub_completion(prompt: &PromptDoc, text: String, config: &LlmConfig) -> Completion {
    let usage = Usage::for_call(approx_tokens(&prompt.text), approx_tokens(&text), 0, config);
    Completion { text, usage }
}

/// Answers with the deterministic expert's prediction.
#[derive(Debug, Clone, Default)]
pub struct ExpertBackend {
    pub config: ExpertConfig,
}

impl CompletionBackend for ExpertBackend {
    fn name(&self) -> &'static str {
        "expert"
    }

    fn complete(
        &self,
        prompt: &PromptDoc,
        context: &TabularContext,
        config: &LlmConfig,
    ) -> Result<Completion, LlmError> {
        let trace = run_expert(context, &self.config);
        Ok(stub_completion(prompt, answer_sentence(trace.final_prediction), config))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptStep {
    Reply(String),
    Fail { fail: String },
}

/// Replays a fixed script in call order; calls past the end fail.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    steps: Vec<ScriptStep>,
    cursor: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self {
            steps,
            cursor: AtomicUsize::new(0),
        }
    }

    pub fn replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|s| ScriptStep::Reply(s.into())).collect())
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }
}

impl CompletionBackend for ScriptedBackend {
    fn name(&self) -> &'static str {
        "stub"
    }

    fn complete(
        &self,
        prompt: &PromptDoc,
        _context: &TabularContext,
        config: &LlmConfig,
    ) -> Result<Completion, LlmError> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        match self.steps.get(i) {
            Some(ScriptStep::Reply(text)) => Ok(stub_completion(prompt, text.clone(), config)),
            Some(ScriptStep::Fail { fail }) => Err(LlmError::Transport(fail.clone())),
            None => Err(LlmError::Transport(format!("script exhausted at call {i}"))),
        }
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug)]
pub struct RemoteBackend {
    agent: ureq::Agent,
    api_key: String,
}

impl RemoteBackend {
    pub fn from_env(config: &LlmConfig) -> Result<Self, LlmError> {
        match std::env::var(API_KEY_VAR) {
            Ok(key) if !key.is_empty() => Ok(Self::with_key(config, key)),
            _ => Err(LlmError::MissingApiKey),
        }
    }

    pub fn with_key(config: &LlmConfig, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            api_key: api_key.into(),
        }
    }
}

impl CompletionBackend for RemoteBackend {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn complete(
        &self,
        prompt: &PromptDoc,
        _context: &TabularContext,
        config: &LlmConfig,
    ) -> Result<Completion, LlmError> {
        let body = json!({
            "model": config.model,
            "temperature": config.temperature,
            "messages": [{"role": "user", "content": prompt.text}],
        });
        let started = Instant::now();
        let mut response = self
            .agent
            .post(&config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let raw = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status { status, body: raw });
        }
        let value: Value = serde_json::from_str(&raw).map_err(|e| LlmError::Transport(e.to_string()))?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or(LlmError::MissingText)?
            .to_string();
        let input = value["usage"]["prompt_tokens"]
            .as_u64()
            .unwrap_or_else(|| approx_tokens(&prompt.text));
        let output = value["usage"]["completion_tokens"]
            .as_u64()
            .unwrap_or_else(|| approx_tokens(&text));
        Ok(Completion {
            text,
            usage: Usage::for_call(input, output, latency_ms, config),
        })
    }
}

/// Calls the backend until a prediction is extracted. Transport errors and
/// extraction misses share one budget of consecutive failures.
pub fn predict_with_retry(
    prompt: &PromptDoc,
    context: &TabularContext,
    config: &LlmConfig,
    backend: &dyn CompletionBackend,
) -> Result<(Label, Usage), LlmError> {
    let mut usage = Usage::default();
    let mut last_error = String::new();
    for attempt in 0..config.max_consecutive_failures {
        if attempt > 0 {
            usage.retries += 1;
        }
        match backend.complete(prompt, context, config) {
            Ok(completion) => {
                usage.add(&completion.usage);
                match extract_prediction(&completion.text, &prompt.task) {
                    Ok(label) => return Ok((label, usage)),
                    Err(e) => last_error = e.to_string(),
                }
            }
            Err(e) => {
                usage.calls += 1;
                last_error = e.to_string();
            }
        }
    }
    Err(LlmError::ExtractionExhausted {
        attempts: config.max_consecutive_failures,
        last_error,
        usage,
    })
}

#[derive(Debug, Clone)]
pub struct Job {
    pub prompt: PromptDoc,
    pub context: TabularContext,
}

/// Runs every job with at most `max_inflight` outstanding requests.
/// Results come back in job order.
pub fn predict_batch(
    jobs: &[Job],
    config: &LlmConfig,
    backend: &dyn CompletionBackend,
) -> Vec<Result<(Label, Usage), LlmError>> {
    let slots: Vec<Mutex<Option<Result<(Label, Usage), LlmError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.max_inflight.max(1).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let result = predict_with_retry(&job.prompt, &job.context, config, backend);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{model_alias, ModelRecord, TaskKind};
    use crate::prompt::{render_prompt, PromptMode};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn context() -> TabularContext {
        let records = (0..3)
            .map(|i| ModelRecord {
                model_id: format!("m{i}"),
                alias: model_alias(i),
                train_metric: Some(0.9),
                val_metric: 0.9 - i as f64 * 0.01,
            })
            .collect();
        TabularContext {
            task: TaskKind::multiclass(4).unwrap(),
            label_frequencies: Some(vec![0.25; 4]),
            label_range: None,
            model_records: records,
            neighbor_labels: vec![Label::Class(1), Label::Class(1)],
            neighbor_predictions: vec![vec![Label::Class(1); 3], vec![Label::Class(1); 3]],
            target_predictions: vec![Label::Class(1), Label::Class(1), Label::Class(0)],
        }
    }

    fn prompt(ctx: &TabularContext) -> PromptDoc {
        render_prompt(ctx, PromptMode::WithCot, true)
    }

    #[test]
    fn price_arithmetic() {
        let cfg = LlmConfig {
            price_in: 0.5,
            price_out: 1.5,
            ..Default::default()
        };
        let u = Usage::for_call(1500, 200, 0, &cfg);
        assert!((u.cost - 1.05).abs() < 1e-12);
        assert_eq!(approx_tokens("abcde"), 2);
        assert_eq!(approx_tokens(""), 0);
    }

    #[test]
    fn config_validation() {
        assert!(LlmConfig::default().validate().is_ok());
        let bad = LlmConfig {
            temperature: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LlmConfig {
            max_consecutive_failures: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scripted_replays_in_order() {
        let ctx = context();
        let p = prompt(&ctx);
        let cfg = LlmConfig::default();
        let stub = ScriptedBackend::replies(["garbage", "I predict the label of the target instance as 2"]);
        assert_eq!(stub.complete(&p, &ctx, &cfg).unwrap().text, "garbage");
        let (label, usage) = predict_with_retry(&p, &ctx, &cfg, &stub).unwrap();
        assert_eq!(label, Label::Class(2));
        assert_eq!(usage.calls, 1);
    }

    #[test]
    fn retry_budget() {
        let ctx = context();
        let p = prompt(&ctx);
        let cfg = LlmConfig::default();
        let mut steps = vec![ScriptStep::Reply("nothing here".into()); 8];
        steps.insert(3, ScriptStep::Fail { fail: "reset".into() });
        steps.push(ScriptStep::Reply(
            "I predict the label of the target instance as 3".into(),
        ));
        let (label, usage) = predict_with_retry(&p, &ctx, &cfg, &ScriptedBackend::new(steps)).unwrap();
        assert_eq!((label, usage.retries, usage.calls), (Label::Class(3), 9, 10));

        let stub = ScriptedBackend::replies(vec!["no"; 10]);
        match predict_with_retry(&p, &ctx, &cfg, &stub) {
            Err(LlmError::ExtractionExhausted { attempts, usage, .. }) => {
                assert_eq!(attempts, 10);
                assert_eq!(usage.calls, 10);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn expert_backend_answers_with_expert_prediction() {
        let ctx = context();
        let p = prompt(&ctx);
        let (label, usage) = predict_with_retry(&p, &ctx, &LlmConfig::default(), &ExpertBackend::default()).unwrap();
        assert_eq!(label, run_expert(&ctx, &ExpertConfig::default()).final_prediction);
        assert_eq!(usage.retries, 0);
        assert_eq!(usage.input_tokens, approx_tokens(&p.text));
    }

    struct Counting {
        inflight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl CompletionBackend for Counting {
        fn name(&self) -> &'static str {
            "stub"
        }

        fn complete(
            &self,
            prompt: &PromptDoc,
            context: &TabularContext,
            config: &LlmConfig,
        ) -> Result<Completion, LlmError> {
            let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            self.inflight.fetch_sub(1, Ordering::SeqCst);
            let c = context.target_predictions[0];
            Ok(stub_completion(prompt, answer_sentence(c), config))
        }
    }

    #[test]
    fn batch_is_bounded_and_ordered() {
        let base = context();
        let jobs: Vec<Job> = (0..24)
            .map(|i| {
                let mut ctx = base.clone();
                ctx.target_predictions[0] = Label::Class(i % 4);
                Job {
                    prompt: prompt(&ctx),
                    context: ctx,
                }
            })
            .collect();
        let cfg = LlmConfig {
            max_inflight: 3,
            ..Default::default()
        };
        let backend = Counting {
            inflight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let results = predict_batch(&jobs, &cfg, &backend);
        assert!(backend.peak.load(Ordering::SeqCst) <= 3);
        for (i, r) in results.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().0, Label::Class(i % 4));
        }
        let total: Usage = results.iter().map(|r| r.as_ref().unwrap().1).sum();
        let expected: u64 = jobs.iter().map(|j| approx_tokens(&j.prompt.text)).sum();
        assert_eq!(total.input_tokens, expected);
        assert_eq!(total.calls, 24);
    }

    fn serve_once(reply_status: &'static str, reply_body: String) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {reply_status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply_body}",
                reply_body.len()
            )
            .unwrap();
            head + &String::from_utf8(body).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn remote_backend_speaks_chat_completions() {
        let reply = json!({
            "choices": [{"message": {"role": "assistant", "content": "I predict the label of the target instance as 1"}}],
            "usage": {"prompt_tokens": 321, "completion_tokens": 12}
        })
        .to_string();
        let (url, handle) = serve_once("200 OK", reply);
        let cfg = LlmConfig {
            endpoint: url,
            model: "test-model".into(),
            price_in: 1.0,
            price_out: 2.0,
            ..Default::default()
        };
        let ctx = context();
        let backend = RemoteBackend::with_key(&cfg, "secret");
        let (label, usage) = predict_with_retry(&prompt(&ctx), &ctx, &cfg, &backend).unwrap();
        assert_eq!(label, Label::Class(1));
        assert_eq!((usage.input_tokens, usage.output_tokens), (321, 12));
        assert!((usage.cost - (0.321 + 0.024)).abs() < 1e-12);
        let request = handle.join().unwrap();
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request.to_ascii_lowercase().contains("authorization: bearer secret"));
        let body: Value = serde_json::from_str(&request[request.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.2);
        assert_eq!(body["messages"][0]["role"], "user");
    }

    #[test]
    fn remote_error_status_is_reported() {
        let (url, handle) = serve_once("503 Service Unavailable", "{}".into());
        let cfg = LlmConfig {
            endpoint: url,
            ..Default::default()
        };
        let ctx = context();
        let err = RemoteBackend::with_key(&cfg, "k")
            .complete(&prompt(&ctx), &ctx, &cfg)
            .unwrap_err();
        assert!(matches!(err, LlmError::Status { status: 503, .. }));
        handle.join().unwrap();
    }
}
