//! End-to-end tests against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ddi_core::harness::{
    run_benchmark, FreshStartPolicy, RunConfig, VerdictEvaluator, PASS_VERDICT,
};
use ddi_core::trace::{AttemptKind, ProblemRecord};
use ddi_llm::{ChatSolver, EndpointConfig, PromptTemplates};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Captured {
    authorization: Option<String>,
    body: Value,
}

struct Stub {
    url: String,
    captured: Arc<Mutex<Vec<Captured>>>,
}

impl Stub {
    /// Serves `responses` in order, repeating the last one.
    fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let captured = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&captured);
        thread::spawn(move || {
            for (served, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { continue };
                let (status, body) = responses[served.min(responses.len() - 1)].clone();
                if let Some(request) = handle(stream, status, &body) {
                    sink.lock().unwrap().push(request);
                }
            }
        });
        Self { url, captured }
    }

    fn requests(&self) -> Vec<Captured> {
        self.captured.lock().unwrap().clone()
    }
}

fn handle(mut stream: TcpStream, status: u16, body: &str) -> Option<Captured> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut length = 0usize;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            match name.to_ascii_lowercase().as_str() {
                "content-length" => length = value.trim().parse().ok()?,
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut raw = vec![0u8; length];
    reader.read_exact(&mut raw).ok()?;
    let response = format!(
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes()).ok()?;
    Some(Captured {
        authorization,
        body: serde_json::from_slice(&raw).ok()?,
    })
}

fn completion(content: &str, usage: Option<(u64, u64)>) -> (u16, String) {
    let mut body = json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
    });
    if let Some((p, c)) = usage {
        body["usage"] = json!({"prompt_tokens": p, "completion_tokens": c, "total_tokens": p + c});
    }
    (200, body.to_string())
}

fn config(url: &str, key_env: &str) -> EndpointConfig {
    EndpointConfig {
        base_url: url.into(),
        model_name: "stub-model".into(),
        api_key_env: key_env.into(),
        request_timeout: Duration::from_secs(5),
        max_retries: 2,
        backoff_base: Duration::from_millis(1),
        max_in_flight: 1,
        ..EndpointConfig::default()
    }
}

fn problem() -> ProblemRecord {
    ProblemRecord {
        problem_id: "P0".into(),
        statement: "Return the sum of two integers.".into(),
        test_suite_id: "suite-0".into(),
        dataset_id: "toy".into(),
    }
}

fn run_config(policy: FreshStartPolicy, budget: u32) -> RunConfig {
    RunConfig {
        model_id: "stub-model".into(),
        dataset_id: "toy".into(),
        policy,
        budget,
        parallelism: 1,
        ..RunConfig::default()
    }
}

#[test]
fn passing_solution_gives_single_attempt() {
    let answer =
        format!("Sure.\n```python\ndef add(a, b):\n    return a + b\n{PASS_VERDICT}\n```\n");
    let stub = Stub::start(vec![completion(&answer, Some((42, 17)))]);
    let solver = ChatSolver::new(config(&stub.url, ""), PromptTemplates::default()).unwrap();
    let out = run_benchmark(
        &[problem()],
        &solver,
        &VerdictEvaluator,
        &run_config(FreshStartPolicy::none(), 6),
        None,
    )
    .unwrap();
    assert_eq!(out.trace.records.len(), 1);
    let r = &out.trace.records[0];
    assert!(r.passed);
    assert_eq!((r.tokens_in, r.tokens_out), (42, 17));
    assert!(out.trace.policy_descriptor.contains("templates_sha256="));
    let requests = stub.requests();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].body["model"], "stub-model");
    assert_eq!(requests[0].authorization, None);
}

#[test]
fn exhausted_retries_become_failed_attempt() {
    let stub = Stub::start(vec![(500, r#"{"error":"overloaded"}"#.into())]);
    let solver = ChatSolver::new(config(&stub.url, ""), PromptTemplates::default()).unwrap();
    let out = run_benchmark(
        &[problem()],
        &solver,
        &VerdictEvaluator,
        &run_config(FreshStartPolicy::none(), 1),
        None,
    )
    .unwrap();
    assert_eq!(out.trace.records.len(), 1);
    let r = &out.trace.records[0];
    assert!(!r.passed);
    assert!(r.feedback.contains("HTTP 500"), "{}", r.feedback);
    assert!(r.feedback.contains("3 attempts"), "{}", r.feedback);
    assert_eq!(stub.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![(400, r#"{"error":"bad model"}"#.into())]);
    let solver = ChatSolver::new(config(&stub.url, ""), PromptTemplates::default()).unwrap();
    let out = run_benchmark(
        &[problem()],
        &solver,
        &VerdictEvaluator,
        &run_config(FreshStartPolicy::none(), 1),
        None,
    )
    .unwrap();
    assert!(out.trace.records[0].feedback.contains("HTTP 400"));
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn fresh_start_request_contains_only_the_statement() {
    let responses = (0..4)
        .map(|i| completion(&format!("```python\nv = {i}\n```"), None))
        .collect();
    let stub = Stub::start(responses);
    let solver = ChatSolver::new(config(&stub.url, ""), PromptTemplates::default()).unwrap();
    let out = run_benchmark(
        &[problem()],
        &solver,
        &VerdictEvaluator,
        &run_config(FreshStartPolicy::fixed(1), 4),
        None,
    )
    .unwrap();
    let kinds: Vec<_> = out.trace.records.iter().map(|r| r.attempt_kind).collect();
    assert_eq!(
        kinds,
        [
            AttemptKind::Generation,
            AttemptKind::Debug,
            AttemptKind::FreshGeneration,
            AttemptKind::Debug
        ]
    );

    let bodies: Vec<Value> = stub.requests().into_iter().map(|c| c.body).collect();
    let roles = |b: &Value| -> Vec<String> {
        b["messages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["role"].as_str().unwrap().to_string())
            .collect()
    };
    assert_eq!(bodies.len(), 4);
    assert_eq!(roles(&bodies[0]), ["system", "user"]);
    assert_eq!(roles(&bodies[1]), ["system", "user", "assistant", "user"]);

    // the fresh start is byte-identical to the original generation request
    assert_eq!(bodies[2], bodies[0]);
    assert!(bodies[2]["messages"][1]["content"]
        .as_str()
        .unwrap()
        .contains("Return the sum of two integers."));

    // the repair after it sees only the fresh candidate
    assert_eq!(roles(&bodies[3]), ["system", "user", "assistant", "user"]);
    let history = bodies[3]["messages"][2]["content"].as_str().unwrap();
    assert!(history.contains("v = 2"), "{history}");
    assert!(!bodies[3].to_string().contains("v = 0"));
    assert!(!bodies[3].to_string().contains("v = 1"));
}

#[test]
fn missing_usage_falls_back_to_estimate() {
    let content = "```python\nx = 1\n```";
    let stub = Stub::start(vec![completion(content, None)]);
    let templates = PromptTemplates {
        system: "abcd".into(),
        generation: "{statement}".into(),
        repair: "{feedback}".into(),
    };
    let solver = ChatSolver::new(config(&stub.url, ""), templates).unwrap();
    let mut p = problem();
    p.statement = "12345678".into();
    let out = run_benchmark(
        &[p],
        &solver,
        &VerdictEvaluator,
        &run_config(FreshStartPolicy::none(), 1),
        None,
    )
    .unwrap();
    let r = &out.trace.records[0];
    assert_eq!(r.tokens_in, 3);
    assert_eq!(r.tokens_out, (content.len() as u64).div_ceil(4));
}

#[test]
fn key_read_at_call_time_and_kept_out_of_trace() {
    let var = "DDI_LLM_STUB_TEST_KEY";
    let stub = Stub::start(vec![completion("no code", None)]);
    let solver = ChatSolver::new(config(&stub.url, var), PromptTemplates::default()).unwrap();
    let cfg = run_config(FreshStartPolicy::none(), 1);

    // SAFETY: no other test touches this variable.
    unsafe { std::env::remove_var(var) };
    let out = run_benchmark(&[problem()], &solver, &VerdictEvaluator, &cfg, None).unwrap();
    assert!(out.trace.records[0].feedback.contains(var));
    assert!(stub.requests().is_empty());

    unsafe { std::env::set_var(var, "sk-secret-value") };
    let out = run_benchmark(&[problem()], &solver, &VerdictEvaluator, &cfg, None).unwrap();
    let requests = stub.requests();
    assert_eq!(requests.len(), 1);
    assert_eq!(
        requests[0].authorization.as_deref(),
        Some("Bearer sk-secret-value")
    );
    let r = &out.trace.records[0];
    assert!(!r.passed, "a reply without a code block must fail");
    let mut buf = Vec::new();
    out.trace.write_to(&mut buf).unwrap();
    assert!(!String::from_utf8(buf).unwrap().contains("sk-secret-value"));
}
