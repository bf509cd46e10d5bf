//! Program generators: a live chat-completions endpoint or scripted replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patch::EditScript;

/// Separator line between records of a scripted reply file.
pub const RECORD_SEPARATOR: &str = "%%%";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenError {
    #[error("scripted generator exhausted after {0} replies")]
    Exhausted(usize),
    #[error("transport: {0}")]
    Transport(String),
    #[error("generator spec: {0}")]
    Spec(String),
}

pub trait Generator: Send {
    fn complete(&mut self, prompt: &str) -> Result<String, GenError>;

    /// Replay position, saved in checkpoints.
    fn cursor(&self) -> u64 {
        0
    }

    fn seek(&mut self, _cursor: u64) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedGenerator {
    records: Vec<String>,
    next: usize,
}

impl ScriptedGenerator {
    pub fn new(records: Vec<String>) -> Self {
        Self { records, next: 0 }
    }

    /// Records are separated by lines holding only `%%%`.
    pub fn parse(text: &str) -> Self {
        let mut records = vec![String::new()];
        for line in text.split_inclusive('\n') {
            if line.trim_end_matches(['\n', '\r']) == RECORD_SEPARATOR {
                records.push(String::new());
            } else {
                records.last_mut().expect("nonempty").push_str(line);
            }
        }
        if text.starts_with(RECORD_SEPARATOR) {
            records.remove(0);
        }
        if records.len() > 1 && records.last().is_some_and(String::is_empty) {
            records.pop();
        }
        if records.len() == 1 && records[0].is_empty() {
            records.clear();
        }
        Self::new(records)
    }

    pub fn from_file(path: &Path) -> Result<Self, GenError> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|e| GenError::Spec(format!("{}: {e}", path.display())))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Generator for ScriptedGenerator {
    fn complete(&mut self, _prompt: &str) -> Result<String, GenError> {
        let reply = self
            .records
            .get(self.next)
            .cloned()
            .ok_or(GenError::Exhausted(self.records.len()))?;
        self.next += 1;
        Ok(reply)
    }

    fn cursor(&self) -> u64 {
        self.next as u64
    }

    fn seek(&mut self, cursor: u64) {
        self.next = cursor as usize;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorSpec {
    HttpChat {
        endpoint: String,
        model: String,
        /// Passed through verbatim in the request body.
        options: BTreeMap<String, serde_json::Value>,
    },
    Scripted {
        script_path: PathBuf,
    },
}

impl GeneratorSpec {
    /// `scripted:<path>` or `http-chat:<url>`; `model` applies to the latter.
    pub fn parse(spec: &str, model: Option<&str>, options: BTreeMap<String, serde_json::Value>) -> Result<Self, GenError> {
        match spec.split_once(':') {
            Some(("scripted", path)) if !path.is_empty() => {
                if model.is_some() || !options.is_empty() {
                    return Err(GenError::Spec("scripted generators take no model or options".into()));
                }
                Ok(Self::Scripted {
                    script_path: PathBuf::from(path),
                })
            }
            Some(("http-chat", url)) if !url.is_empty() => Ok(Self::HttpChat {
                endpoint: url.to_string(),
                model: model.unwrap_or("default").to_string(),
                options,
            }),
            _ => Err(GenError::Spec(format!(
                "`{spec}`: expected scripted:<path> or http-chat:<url>"
            ))),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Generator>, GenError> {
        match self {
            Self::Scripted { script_path } => Ok(Box::new(ScriptedGenerator::from_file(script_path)?)),
            #[cfg(feature = "host")]
            Self::HttpChat {
                endpoint,
                model,
                options,
            } => Ok(Box::new(http::HttpChatGenerator::new(endpoint, model, options.clone())?)),
            #[cfg(not(feature = "host"))]
            Self::HttpChat { .. } => Err(GenError::Spec("built without HTTP support".into())),
        }
    }
}

#[cfg(feature = "host")]
pub mod http {
    use std::collections::BTreeMap;
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::{GenError, Generator};

    const ATTEMPTS: u32 = 3;

    /// One chat-completions request per call: `{"model", "messages", ..options}`,
    /// reply read from `choices[0].message.content`. The bearer token, if any,
    /// comes from `ADRS_API_KEY`.
    pub struct HttpChatGenerator {
        client: reqwest::blocking::Client,
        endpoint: String,
        model: String,
        options: BTreeMap<String, Value>,
        backoff: Duration,
    }

    impl HttpChatGenerator {
        pub fn new(endpoint: &str, model: &str, options: BTreeMap<String, Value>) -> Result<Self, GenError> {
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(600))
                .build()
                .map_err(|e| GenError::Transport(e.to_string()))?;
            Ok(Self {
                client,
                endpoint: endpoint.into(),
                model: model.into(),
                options,
                backoff: Duration::from_millis(500),
            })
        }

        pub fn with_backoff(mut self, backoff: Duration) -> Self {
            self.backoff = backoff;
            self
        }

        fn request(&self, prompt: &str) -> Result<String, GenError> {
            let mut body = json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
            });
            for (k, v) in &self.options {
                body[k] = v.clone();
            }
            let mut req = self.client.post(&self.endpoint).json(&body);
            if let Ok(key) = std::env::var("ADRS_API_KEY") {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| GenError::Transport(e.to_string()))?;
            let status = resp.status();
            if !status.is_success() {
                return Err(GenError::Transport(format!("HTTP {status}")));
            }
            let v: Value = resp.json().map_err(|e| GenError::Transport(e.to_string()))?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| GenError::Transport("reply has no choices[0].message.content".into()))
        }
    }

    impl Generator for HttpChatGenerator {
        fn complete(&mut self, prompt: &str) -> Result<String, GenError> {
            let mut wait = self.backoff;
            let mut last = None;
            for attempt in 0..ATTEMPTS {
                match self.request(prompt) {
                    Ok(text) => return Ok(text),
                    Err(e) => {
                        log::warn!("generator request {} failed: {e}", attempt + 1);
                        last = Some(e);
                    }
                }
                if attempt + 1 < ATTEMPTS {
                    std::thread::sleep(wait);
                    wait *= 2;
                }
            }
            Err(last.expect("at least one attempt"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub script: EditScript,
    /// Generator calls made, including unparseable replies.
    pub attempts: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("generation failed after {attempts} calls: {reason}")]
pub struct GenerationFailed {
    pub attempts: usize,
    pub reason: String,
    /// The generator itself failed (transport, exhausted script) rather than
    /// replying with something unparseable.
    pub fatal: bool,
}

/// Calls the generator until a reply parses, at most `resamples` times.
pub fn generate(generator: &mut dyn Generator, prompt: &str, resamples: usize) -> Result<Generated, GenerationFailed> {
    let mut last: Option<String> = None;
    for attempt in 1..=resamples.max(1) {
        let reply = generator.complete(prompt).map_err(|e| GenerationFailed {
            attempts: attempt,
            reason: e.to_string(),
            fatal: true,
        })?;
        match EditScript::parse(&reply) {
            Ok(script) => {
                return Ok(Generated {
                    script,
                    attempts: attempt,
                })
            }
            Err(e) => last = Some(e.to_string()),
        }
    }
    Err(GenerationFailed {
        attempts: resamples.max(1),
        reason: last.unwrap_or_default(),
        fatal: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_replay_in_order_then_exhausted() {
        let mut g = ScriptedGenerator::parse("a\n%%%\nb\n%%%\nc\n");
        assert_eq!(g.len(), 3);
        assert_eq!(g.complete("p").unwrap(), "a\n");
        assert_eq!(g.complete("p").unwrap(), "b\n");
        assert_eq!(g.complete("p").unwrap(), "c\n");
        assert_eq!(g.complete("p"), Err(GenError::Exhausted(3)));
        g.seek(1);
        assert_eq!(g.complete("p").unwrap(), "b\n");
        assert_eq!(g.cursor(), 2);
    }

    #[test]
    fn script_edges() {
        assert_eq!(ScriptedGenerator::parse("%%%\nx\n%%%\n").len(), 1);
        assert!(ScriptedGenerator::parse("").is_empty());
        // An empty record between separators is kept.
        assert_eq!(ScriptedGenerator::parse("x\n%%%\n%%%\ny\n").len(), 3);
    }

    #[test]
    fn resampling_stops_at_first_parseable_reply() {
        let ok = "<<<<<<< SEARCH\na\n=======\nb\n>>>>>>> REPLACE\n";
        let mut g = ScriptedGenerator::new(vec!["no code".into(), ok.into(), ok.into()]);
        let got = generate(&mut g, "p", 3).unwrap();
        assert_eq!(got.attempts, 2);
        assert_eq!(g.cursor(), 2);
        let mut g = ScriptedGenerator::new(vec!["x".into(), "y".into(), "z".into(), ok.into()]);
        let err = generate(&mut g, "p", 3).unwrap_err();
        assert_eq!(err.attempts, 3);
        assert!(!err.fatal);
        let mut g = ScriptedGenerator::new(vec![]);
        let err = generate(&mut g, "p", 3).unwrap_err();
        assert_eq!(err.attempts, 1);
        assert!(err.fatal);
    }

    #[test]
    fn spec_strings() {
        assert_eq!(
            GeneratorSpec::parse("scripted:r.txt", None, BTreeMap::new()).unwrap(),
            GeneratorSpec::Scripted {
                script_path: "r.txt".into()
            }
        );
        let http = GeneratorSpec::parse("http-chat:http://h:1/v1/chat/completions", Some("m"), BTreeMap::new()).unwrap();
        assert!(matches!(http, GeneratorSpec::HttpChat { ref model, .. } if model == "m"));
        assert!(GeneratorSpec::parse("magic:x", None, BTreeMap::new()).is_err());
        assert!(GeneratorSpec::parse("scripted:", None, BTreeMap::new()).is_err());
    }
}
