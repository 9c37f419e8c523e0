//! Chat-completion solver for the repair harness.
//!
//! [`ChatSolver`] speaks the JSON messages-array convention used by most
//! hosted and self-hosted gateways (`POST {base_url}/chat/completions`).
//! Every wire detail lives in this crate; nothing else in the workspace
//! touches the network.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::thread;
use std::time::Duration;

use ddi_core::harness::{Candidate, GenerateRequest, RepairRequest, Solver, SolverError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_SYSTEM_TEMPLATE: &str = "You are an expert Python programmer. \
Answer with a single complete solution in one fenced ```python code block.";

pub const DEFAULT_GENERATION_TEMPLATE: &str = "Solve the following problem.\n\n{statement}";

pub const DEFAULT_REPAIR_TEMPLATE: &str = "Your solution failed the tests with the \
following feedback:\n\n{feedback}\n\nFix the code and reply with the full corrected solution.";

/// File names read by [`PromptTemplates::load_dir`].
pub const TEMPLATE_FILES: [&str; 3] = ["system.txt", "generation.txt", "repair.txt"];

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("cannot read template {path}: {source}")]
    Template { path: String, source: io::Error },
    #[error("template {name} is missing placeholder {placeholder}")]
    Placeholder {
        name: &'static str,
        placeholder: &'static str,
    },
    #[error("cannot build HTTP client: {0}")]
    Http(#[from] reqwest::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. Empty means
    /// no `Authorization` header is sent.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    /// Maximum number of problems served concurrently.
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: String::new(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            max_output_tokens: 2048,
            request_timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(ClientError::Config(format!(
                "base url must be http(s): {}",
                self.base_url
            )));
        }
        if self.model_name.trim().is_empty() {
            return Err(ClientError::Config("model name is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ClientError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(ClientError::Config(
                "max output tokens must be positive".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(ClientError::Config(
                "max in-flight requests must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// System, generation and repair prompts. The generation template must
/// contain `{statement}` and the repair template `{feedback}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub system: String,
    pub generation: String,
    pub repair: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM_TEMPLATE.into(),
            generation: DEFAULT_GENERATION_TEMPLATE.into(),
            repair: DEFAULT_REPAIR_TEMPLATE.into(),
        }
    }
}

impl PromptTemplates {
    /// Reads `system.txt`, `generation.txt` and `repair.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, ClientError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| ClientError::Template {
                path: path.display().to_string(),
                source,
            })
        };
        let templates = Self {
            system: read(TEMPLATE_FILES[0])?,
            generation: read(TEMPLATE_FILES[1])?,
            repair: read(TEMPLATE_FILES[2])?,
        };
        templates.validate()?;
        Ok(templates)
    }

    /// Writes the templates in the layout expected by [`Self::load_dir`].
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, body) in
            TEMPLATE_FILES
                .iter()
                .zip([&self.system, &self.generation, &self.repair])
        {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if !self.generation.contains("{statement}") {
            return Err(ClientError::Placeholder {
                name: "generation",
                placeholder: "{statement}",
            });
        }
        if !self.repair.contains("{feedback}") {
            return Err(ClientError::Placeholder {
                name: "repair",
                placeholder: "{feedback}",
            });
        }
        Ok(())
    }

    /// Hex sha256 over the three templates, length-prefixed.
    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [&self.system, &self.generation, &self.repair] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn render_generation(&self, statement: &str) -> String {
        self.generation.replace("{statement}", statement)
    }

    pub fn render_repair(&self, feedback: &str) -> String {
        self.repair.replace("{feedback}", feedback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

/// Messages for a generation or fresh start: the system prompt and one
/// user message carrying the problem statement.
pub fn generation_messages(templates: &PromptTemplates, statement: &str) -> Vec<Message> {
    vec![
        Message::new(Role::System, &templates.system),
        Message::new(Role::User, templates.render_generation(statement)),
    ]
}

/// Messages for a repair: the generation exchange followed by one
/// assistant/user pair per prior attempt since the last generation.
pub fn repair_messages(templates: &PromptTemplates, request: &RepairRequest<'_>) -> Vec<Message> {
    let mut messages = generation_messages(templates, &request.context.statement);
    for turn in &request.context.turns {
        messages.push(Message::new(Role::Assistant, fence(&turn.candidate)));
        messages.push(Message::new(
            Role::User,
            templates.render_repair(&turn.feedback),
        ));
    }
    messages
}

fn fence(code: &str) -> String {
    format!("```python\n{}\n```", code.trim_end_matches('\n'))
}

/// Body of the first fenced code block, if any. An unterminated fence
/// runs to the end of the text.
pub fn extract_code(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // skip the info string
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(
        body[..end]
            .trim_end_matches([' ', '\t'])
            .trim_end_matches('\n')
            .to_string(),
    )
}

/// Rough token estimate used when the endpoint reports no usage.
pub fn estimate_tokens(chars: usize) -> u64 {
    (chars as u64).div_ceil(4)
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

pub struct ChatSolver {
    config: EndpointConfig,
    templates: PromptTemplates,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for ChatSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatSolver")
            .field("config", &self.config)
            .field("templates", &self.templates.sha256())
            .finish()
    }
}

pub fn chat_solver(
    config: EndpointConfig,
    templates: PromptTemplates,
) -> Result<ChatSolver, ClientError> {
    ChatSolver::new(config, templates)
}

impl ChatSolver {
    pub fn new(config: EndpointConfig, templates: PromptTemplates) -> Result<Self, ClientError> {
        config.validate()?;
        templates.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()?;
        Ok(Self {
            config,
            templates,
            client,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    fn api_key(&self) -> Result<Option<String>, SolverError> {
        if self.config.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.config.api_key_env) {
            Ok(key) if !key.is_empty() => Ok(Some(key)),
            _ => Err(SolverError::Failed(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))),
        }
    }

    fn send_once(
        &self,
        body: &ChatRequest<'_>,
        key: Option<&str>,
    ) -> Result<ChatResponse, Failure> {
        let mut request = self.client.post(self.config.completions_url()).json(body);
        if let Some(key) = key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| Failure::Retryable(format!("request failed: {}", e.without_url())))?;
        let status = response.status();
        if status.is_success() {
            return response.json::<ChatResponse>().map_err(|e| {
                Failure::Retryable(format!("malformed response: {}", e.without_url()))
            });
        }
        let text = response.text().unwrap_or_default();
        let snippet: String = text.chars().take(200).collect();
        let message = format!("HTTP {}: {}", status.as_u16(), snippet.trim());
        if status.as_u16() == 429 || status.is_server_error() || status.as_u16() == 408 {
            Err(Failure::Retryable(message))
        } else {
            Err(Failure::Fatal(message))
        }
    }

    fn complete(&self, messages: &[Message]) -> Result<Candidate, SolverError> {
        let key = self.api_key()?;
        let body = ChatRequest {
            model: &self.config.model_name,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
        };
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let factor = 1u32.checked_shl(attempt - 1).unwrap_or(u32::MAX);
                thread::sleep(self.config.backoff_base.saturating_mul(factor));
            }
            match self.send_once(&body, key.as_deref()) {
                Ok(response) => return Ok(self.candidate_from(messages, response)),
                Err(Failure::Fatal(message)) => return Err(SolverError::Transport(message)),
                Err(Failure::Retryable(message)) => last = message,
            }
        }
        Err(SolverError::Transport(format!(
            "giving up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }

    fn candidate_from(&self, messages: &[Message], response: ChatResponse) -> Candidate {
        let text = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let prompt_chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
        let usage = response.usage.unwrap_or(Usage {
            prompt_tokens: None,
            completion_tokens: None,
        });
        Candidate {
            code: extract_code(&text).unwrap_or_default(),
            tokens_in: usage
                .prompt_tokens
                .unwrap_or_else(|| estimate_tokens(prompt_chars)),
            tokens_out: usage
                .completion_tokens
                .unwrap_or_else(|| estimate_tokens(text.chars().count())),
        }
    }
}

impl Solver for ChatSolver {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Candidate, SolverError> {
        self.complete(&generation_messages(&self.templates, request.statement))
    }

    fn repair(&self, request: &RepairRequest<'_>) -> Result<Candidate, SolverError> {
        self.complete(&repair_messages(&self.templates, request))
    }

    fn concurrency_limit(&self) -> Option<usize> {
        Some(self.config.max_in_flight)
    }

    fn descriptor(&self) -> String {
        format!(
            "solver=chat model={} temperature={} max_tokens={} templates_sha256={}",
            self.config.model_name,
            self.config.temperature,
            self.config.max_output_tokens,
            self.templates.sha256()
        )
    }
}
