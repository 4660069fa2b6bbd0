//! Line-delimited JSON bridge to external model processes.
//!
//! Each request is one JSON object on the child's stdin tagged by `kind`; the
//! child answers with one JSON object per line on stdout. A response carrying
//! an `error` string is a model-side failure. Transport failures are retried
//! with a fresh process up to `max_attempts` times.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::Record;
use crate::label::LabelKey;
use crate::synthesis::{GenerationAgent, KnowledgeUnit, Triplet};
use crate::verification::{normalize_text, Embedder, Judge};
use crate::weights::{Response, ResponseModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    50
}

impl ProcessSpec {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

struct Live {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Live {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A long-lived child process speaking one JSON object per line.
pub struct LineProcess {
    spec: ProcessSpec,
    live: Mutex<Option<Live>>,
}

enum Failure {
    Transport(String),
    Model(String),
}

impl LineProcess {
    pub fn new(spec: ProcessSpec) -> Self {
        Self {
            spec,
            live: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<Live, String> {
        let mut child = Command::new(&self.spec.program)
            .args(&self.spec.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("cannot start {}: {e}", self.spec.program))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Live { child, stdin, stdout })
    }

    fn exchange(live: &mut Live, request: &Value) -> Result<Value, Failure> {
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        live.stdin
            .write_all(line.as_bytes())
            .and_then(|_| live.stdin.flush())
            .map_err(|e| Failure::Transport(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = live
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Failure::Transport(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Failure::Transport("process closed its output".into()));
        }
        let value: Value =
            serde_json::from_str(reply.trim()).map_err(|e| Failure::Transport(format!("malformed reply: {e}")))?;
        if let Some(err) = value.get("error").and_then(Value::as_str) {
            return Err(Failure::Model(err.to_string()));
        }
        Ok(value)
    }

    /// Sends `request` and returns the reply object.
    pub fn call(&self, request: &Value) -> Result<Value, String> {
        let mut guard = self.live.lock().unwrap_or_else(|p| p.into_inner());
        let attempts = self.spec.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.spec.backoff_ms << (attempt - 1)));
            }
            if guard.is_none() {
                match self.spawn() {
                    Ok(live) => *guard = Some(live),
                    Err(e) => {
                        last = e;
                        continue;
                    }
                }
            }
            match Self::exchange(guard.as_mut().expect("spawned"), request) {
                Ok(v) => return Ok(v),
                Err(Failure::Model(e)) => return Err(e),
                Err(Failure::Transport(e)) => {
                    log::warn!("{}: {e}; restarting (attempt {})", self.spec.program, attempt + 1);
                    *guard = None;
                    last = e;
                }
            }
        }
        Err(format!(
            "{} unreachable after {attempts} attempts: {last}",
            self.spec.program
        ))
    }

    pub fn call_as<T: DeserializeOwned>(&self, request: &Value) -> Result<T, String> {
        let v = self.call(request)?;
        serde_json::from_value(v).map_err(|e| format!("unexpected reply shape: {e}"))
    }
}

/// `{"kind":"generate","unit":…,"label":…}` → `{"query","thinking","answer"}`.
pub struct SubprocessGenerationAgent(pub LineProcess);

impl GenerationAgent for SubprocessGenerationAgent {
    fn generate(&self, unit: &KnowledgeUnit, label: &LabelKey) -> Result<Triplet, String> {
        self.0
            .call_as(&json!({"kind": "generate", "unit": unit, "label": label}))
    }
}

/// `{"kind":"judge","record":…}` → `{"valid": bool}`.
pub struct SubprocessJudge(pub LineProcess);

#[derive(Deserialize)]
struct JudgeReply {
    valid: bool,
}

impl Judge for SubprocessJudge {
    fn judge(&self, record: &Record) -> Result<bool, String> {
        let reply: JudgeReply = self.0.call_as(&json!({"kind": "judge", "record": record}))?;
        Ok(reply.valid)
    }
}

/// `{"kind":"embed","text":…}` → `{"vector":[…]}`. Failures embed as the
/// empty vector, which scores zero similarity.
pub struct SubprocessEmbedder(pub LineProcess);

#[derive(Deserialize)]
struct EmbedReply {
    vector: Vec<f64>,
}

impl Embedder for SubprocessEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        match self.0.call_as::<EmbedReply>(&json!({"kind": "embed", "text": text})) {
            Ok(r) => r.vector,
            Err(e) => {
                log::warn!("embedding failed: {e}");
                Vec::new()
            }
        }
    }
}

/// `{"kind":"sample","model":…,"record":…,"count":n,"seed":s}` →
/// `{"responses":[…]}`. A response is correct when it matches the record's
/// answer after normalization.
pub struct SubprocessEvaluator {
    pub model_id: String,
    pub process: LineProcess,
}

#[derive(Deserialize)]
struct SampleReply {
    responses: Vec<String>,
}

impl ResponseModel for SubprocessEvaluator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn respond(&self, record: &Record, count: usize, seed: u64) -> Result<Vec<Response>, String> {
        let reply: SampleReply = self.process.call_as(&json!({
            "kind": "sample",
            "model": self.model_id,
            "record": record,
            "count": count,
            "seed": seed,
        }))?;
        if reply.responses.len() != count {
            return Err(format!("asked for {count} responses, got {}", reply.responses.len()));
        }
        let gold = normalize_text(&record.answer);
        Ok(reply
            .responses
            .into_iter()
            .map(|text| Response {
                correct: normalize_text(&text) == gold,
                text,
            })
            .collect())
    }
}
