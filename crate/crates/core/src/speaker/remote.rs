//! Chat-completion HTTP backend with mandatory transcript capture.
//!
//! In record mode every exchange is appended to a JSON-lines transcript
//! (`{chunk_index, request_hash, raw_reply}`); replay mode serves those replies back,
//! byte for byte, keyed by the hash of the request, without touching the network.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{BackendError, BackendRequest, Capabilities, SpeakerBackend};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub chunk_index: usize,
    pub request_hash: String,
    pub raw_reply: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranscriptMode {
    Record(PathBuf),
    Replay(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub auth_token: Option<String>,
    pub model: String,
    pub retry_budget: usize,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            auth_token: None,
            model: "gpt-4-0314".into(),
            retry_budget: super::DEFAULT_RETRY_BUDGET,
            timeout_secs: 300,
        }
    }
}

enum Transport {
    Record {
        client: reqwest::blocking::Client,
        transcript: File,
    },
    Replay {
        replies: HashMap<String, VecDeque<String>>,
    },
}

pub struct RemoteBackend {
    config: RemoteConfig,
    transport: Transport,
}

/// Hex SHA-256 over the model name and both prompts.
pub fn request_hash(model: &str, system_prompt: &str, user_prompt: &str) -> String {
    let mut h = Sha256::new();
    for part in [model, system_prompt, user_prompt] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, BackendError> {
    let content =
        fs::read_to_string(path).map_err(|e| BackendError::Transcript(format!("{}: {}", path.display(), e)))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| BackendError::Transcript(format!("{}:{}: {}", path.display(), i + 1, e)))
        })
        .collect()
}

fn is_loopback(endpoint: &str) -> bool {
    let rest = endpoint.split_once("://").map_or(endpoint, |(_, r)| r);
    let host = rest.split(['/', ':']).next().unwrap_or("");
    matches!(host, "localhost" | "127.0.0.1")
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, mode: TranscriptMode) -> Result<Self, BackendError> {
        let transport = match mode {
            TranscriptMode::Record(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)
                        .map_err(|e| BackendError::Transcript(format!("{}: {}", dir.display(), e)))?;
                }
                let transcript = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&path)
                    .map_err(|e| BackendError::Transcript(format!("{}: {}", path.display(), e)))?;
                let mut builder =
                    reqwest::blocking::Client::builder().timeout(Duration::from_secs(config.timeout_secs));
                if is_loopback(&config.endpoint) {
                    builder = builder.no_proxy();
                }
                let client = builder.build().map_err(|e| BackendError::Config(e.to_string()))?;
                Transport::Record { client, transcript }
            }
            TranscriptMode::Replay(path) => {
                let mut replies: HashMap<String, VecDeque<String>> = HashMap::new();
                for rec in read_transcript(&path)? {
                    replies.entry(rec.request_hash).or_default().push_back(rec.raw_reply);
                }
                Transport::Replay { replies }
            }
        };
        Ok(RemoteBackend { config, transport })
    }

    fn post(&self, client: &reqwest::blocking::Client, request: &BackendRequest) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        });
        let mut req = client.post(&self.config.endpoint).json(&body);
        if let Some(token) = &self.config.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {}: {}", status, text)));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("invalid JSON response: {}", e)))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response lacks choices[0].message.content".into()))
    }
}

impl SpeakerBackend for RemoteBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_context: true,
            supports_candidates: true,
        }
    }

    fn retry_budget(&self) -> usize {
        self.config.retry_budget
    }

    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError> {
        let hash = request_hash(&self.config.model, &request.system_prompt, &request.user_prompt);
        match &mut self.transport {
            Transport::Replay { replies } => {
                replies
                    .get_mut(&hash)
                    .and_then(VecDeque::pop_front)
                    .ok_or(BackendError::MissingRecording {
                        chunk_index: request.chunk_index,
                        request_hash: hash,
                    })
            }
            Transport::Record { client, .. } => {
                let client = client.clone();
                let mut last = None;
                for _ in 0..=self.config.retry_budget {
                    match self.post(&client, request) {
                        Ok(reply) => {
                            let rec = TranscriptRecord {
                                chunk_index: request.chunk_index,
                                request_hash: hash,
                                raw_reply: reply.clone(),
                            };
                            if let Transport::Record { transcript, .. } = &mut self.transport {
                                let line = serde_json::to_string(&rec).expect("serializable record");
                                writeln!(transcript, "{}", line)
                                    .and_then(|_| transcript.flush())
                                    .map_err(|e| BackendError::Transcript(e.to_string()))?;
                            }
                            return Ok(reply);
                        }
                        Err(e) => last = Some(e),
                    }
                }
                Err(last.expect("at least one attempt"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NameRoster;
    use crate::speaker::TaskKind;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::thread;

    /// Serves `(status, body)` responses in order, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<serde_json::Value>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(serde_json::from_slice(&buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    status,
                    body.len(),
                    body
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn completion(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    fn request(user: &str) -> BackendRequest {
        BackendRequest {
            task: TaskKind::PredictSpeakers,
            chunk_index: 3,
            attempt: 0,
            system_prompt: "sys".into(),
            user_prompt: user.into(),
            text_ids: vec![],
            candidates: vec![],
            roster: NameRoster::from_names(["Keitaro"]).unwrap(),
        }
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let (url, server) = serve(vec![(500, "{}".into()), (200, completion("1 | Keitaro | A | 5"))]);
        let cfg = RemoteConfig {
            endpoint: url,
            auth_token: Some("tok".into()),
            retry_budget: 1,
            ..RemoteConfig::default()
        };
        let mut rec = RemoteBackend::new(cfg.clone(), TranscriptMode::Record(path.clone())).unwrap();
        assert_eq!(rec.complete(&request("u")).unwrap(), "1 | Keitaro | A | 5");
        let bodies = server.join().unwrap();
        assert_eq!(bodies[1]["messages"][1]["content"], "u");
        assert_eq!(bodies[1]["temperature"], 0);

        let records = read_transcript(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].chunk_index, 3);

        let mut replay = RemoteBackend::new(cfg, TranscriptMode::Replay(path)).unwrap();
        assert_eq!(replay.complete(&request("u")).unwrap(), "1 | Keitaro | A | 5");
        assert!(matches!(
            replay.complete(&request("other")),
            Err(BackendError::MissingRecording { chunk_index: 3, .. })
        ));
    }

    #[test]
    fn transport_failure_exhausts_budget() {
        let dir = tempfile::tempdir().unwrap();
        let (url, server) = serve(vec![(503, "{}".into())]);
        let cfg = RemoteConfig {
            endpoint: url,
            retry_budget: 0,
            ..RemoteConfig::default()
        };
        let mut rec = RemoteBackend::new(cfg, TranscriptMode::Record(dir.path().join("t.jsonl"))).unwrap();
        assert!(matches!(rec.complete(&request("u")), Err(BackendError::Transport(_))));
        server.join().unwrap();
    }

    #[test]
    fn hash_separates_fields() {
        assert_ne!(request_hash("m", "ab", "c"), request_hash("m", "a", "bc"));
        assert_eq!(request_hash("m", "a", "b").len(), 64);
    }

    #[test]
    fn loopback_detection() {
        assert!(is_loopback("http://127.0.0.1:80/x"));
        assert!(is_loopback("http://localhost/x"));
        assert!(!is_loopback("https://api.example.com/v1"));
    }
}
