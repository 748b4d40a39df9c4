//! Equivalence annotation: the labeling prompt, its response parser, a
//! remote judge, a synthetic judge, and a content-addressed cache.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::http::{excerpt, ChatClient, ChatMessage, EndpointConfig};
use super::synthetic::Canonicalizer;
use super::AdapterError;

/// Labeling prompt with two few-shot exemplars; `{sentence1}` and
/// `{sentence2}` are the only substitution slots.
pub const JUDGE_TEMPLATE: &str = include_str!("judge_prompt.txt");

pub const SLOT_1: &str = "{sentence1}";
pub const SLOT_2: &str = "{sentence2}";

pub const REPAIR_INSTRUCTION: &str = "Your previous reply could not be parsed. Reply again with only the Python \
dictionary, with keys \"reasoning_step\" (string) and \"result\" (integer 0-4).";

/// Fills the two slots in one pass, so slot-like text inside the first
/// sentence is never substituted again.
pub fn render_judge_prompt(sentence1: &str, sentence2: &str) -> String {
    let (head, rest) = JUDGE_TEMPLATE.split_once(SLOT_1).expect("template has sentence1 slot");
    let (mid, tail) = rest.split_once(SLOT_2).expect("template has sentence2 slot");
    let mut out = String::with_capacity(JUDGE_TEMPLATE.len() + sentence1.len() + sentence2.len());
    out.push_str(head);
    out.push_str(sentence1);
    out.push_str(mid);
    out.push_str(sentence2);
    out.push_str(tail);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub reasoning_step: String,
    pub result: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseFailure {
    /// No dictionary-shaped content; worth a repair attempt.
    Unparseable(String),
    /// A dictionary with a result outside 0..=4.
    OutOfRange(i64),
}

static INVALID_ESCAPE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"\\([^"\\/bfnrtu])"#).unwrap());
static RESULT_FIELD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"["']result["']\s*:\s*["']?(-?\d+)"#).unwrap());
static REASON_FIELD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?s)["']reasoning_step["']\s*:\s*["'](.*?)["']\s*,\s*["']result["']"#).unwrap());

fn result_value(v: &serde_json::Value) -> Option<i64> {
    match v {
        serde_json::Value::Number(n) => n.as_i64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Parses a judge reply: the outermost `{...}` as JSON (tolerating LaTeX
/// backslashes inside strings), else a field-level regex scan.
pub fn parse_annotation(reply: &str) -> Result<Annotation, ParseFailure> {
    let unparseable = || ParseFailure::Unparseable(excerpt(reply));
    let (Some(open), Some(close)) = (reply.find('{'), reply.rfind('}')) else { return Err(unparseable()) };
    if close < open {
        return Err(unparseable());
    }
    let dict = &reply[open..=close];
    let fixed = INVALID_ESCAPE.replace_all(dict, r"\\$1");
    let (reasoning, result) = match serde_json::from_str::<serde_json::Value>(&fixed) {
        Ok(v) => {
            let result = v.get("result").and_then(result_value).ok_or_else(unparseable)?;
            let reasoning = v.get("reasoning_step").and_then(|r| r.as_str()).unwrap_or_default().to_owned();
            (reasoning, result)
        }
        Err(_) => {
            let caps = RESULT_FIELD.captures(dict).ok_or_else(unparseable)?;
            let result: i64 = caps[1].parse().map_err(|_| unparseable())?;
            let reasoning = REASON_FIELD.captures(dict).map(|c| c[1].to_owned()).unwrap_or_default();
            (reasoning, result)
        }
    };
    if !(0..=4).contains(&result) {
        return Err(ParseFailure::OutOfRange(result));
    }
    Ok(Annotation { reasoning_step: reasoning, result: result as u8 })
}

/// Labels a step pair on the five-level scale.
pub trait Annotator: Send + Sync {
    fn annotate(&self, sentence1: &str, sentence2: &str) -> Result<Annotation, AdapterError>;

    /// Identifies the annotator in build manifests.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    pub endpoint: EndpointConfig,
    #[serde(default = "default_repairs")]
    pub max_repairs: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_judge_tokens")]
    pub max_tokens: usize,
}

fn default_repairs() -> u32 {
    2
}
fn default_judge_tokens() -> usize {
    1024
}

impl JudgeConfig {
    pub fn new(endpoint: EndpointConfig) -> Self {
        JudgeConfig { endpoint, max_repairs: default_repairs(), temperature: 0.0, max_tokens: default_judge_tokens() }
    }
}

pub struct JudgeClient {
    client: ChatClient,
    config: JudgeConfig,
}

impl JudgeClient {
    pub fn new(config: JudgeConfig) -> Result<Self, AdapterError> {
        Ok(JudgeClient { client: ChatClient::new(config.endpoint.clone())?, config })
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }

    /// Renders the labeling prompt, parses the reply, and re-asks with a
    /// repair instruction up to `max_repairs` times.
    pub fn judge_annotate(&self, sentence1: &str, sentence2: &str) -> Result<Annotation, AdapterError> {
        let mut messages = vec![ChatMessage::user(render_judge_prompt(sentence1, sentence2))];
        let mut last = String::new();
        for _ in 0..=self.config.max_repairs {
            let req = self.client.request(messages.clone(), 1, self.config.temperature, self.config.max_tokens);
            let resp = self.client.complete(&req)?;
            let reply = resp.choices.first().map(|c| c.text().to_owned()).unwrap_or_default();
            match parse_annotation(&reply) {
                Ok(a) => return Ok(a),
                Err(ParseFailure::OutOfRange(r)) => {
                    return Err(AdapterError::Annotation(format!("result {r} outside 0..=4")));
                }
                Err(ParseFailure::Unparseable(ex)) => last = ex,
            }
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(REPAIR_INSTRUCTION));
        }
        Err(AdapterError::Annotation(format!(
            "unparseable judge reply after {} attempt(s): {last}",
            self.config.max_repairs + 1
        )))
    }
}

impl Annotator for JudgeClient {
    fn annotate(&self, sentence1: &str, sentence2: &str) -> Result<Annotation, AdapterError> {
        self.judge_annotate(sentence1, sentence2)
    }

    fn fingerprint(&self) -> String {
        format!("judge:{}:{}", self.config.endpoint.fingerprint(), self.config.max_repairs)
    }
}

/// Ground-truth labels for synthetic-domain steps: 4 for the same canonical
/// operation, 0 for different ones, 2 when either step is not recognized.
#[derive(Default)]
pub struct SyntheticJudge {
    canon: Canonicalizer,
}

impl SyntheticJudge {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Annotator for SyntheticJudge {
    fn annotate(&self, sentence1: &str, sentence2: &str) -> Result<Annotation, AdapterError> {
        let (a, b) = (self.canon.canonicalize(sentence1), self.canon.canonicalize(sentence2));
        let (result, reasoning_step) = match (a, b) {
            (Some(a), Some(b)) if a == b => (4, "Both steps apply the same operation to the same value."),
            (Some(_), Some(_)) => (0, "The steps apply different operations or operands."),
            _ => (2, "At least one step is not a recognized operation."),
        };
        Ok(Annotation { reasoning_step: reasoning_step.into(), result })
    }

    fn fingerprint(&self) -> String {
        "synthetic".into()
    }
}

/// SHA-256 over the length-prefixed pair, hex encoded.
pub fn pair_key(sentence1: &str, sentence2: &str) -> String {
    let mut h = Sha256::new();
    for s in [sentence1, sentence2] {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    #[serde(flatten)]
    annotation: Annotation,
}

/// Annotation cache keyed by [`pair_key`]. With a backing file, every new
/// annotation is appended as one JSON line, so interrupted builds resume.
pub struct CachedAnnotator<A> {
    inner: A,
    entries: Mutex<HashMap<String, Annotation>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl<A: Annotator> CachedAnnotator<A> {
    pub fn in_memory(inner: A) -> Self {
        CachedAnnotator { inner, entries: Mutex::new(HashMap::new()), file: None }
    }

    pub fn with_file(inner: A, path: &Path) -> Result<Self, AdapterError> {
        let io = |e: std::io::Error| AdapterError::Config(format!("judge cache {}: {e}", path.display()));
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(c) => {
                        entries.insert(c.key, c.annotation);
                    }
                    // a torn final line from an interrupted run
                    Err(e) => log::warn!("judge cache {} line {}: {e}; skipped", path.display(), i + 1),
                }
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if fs::read(path).map_err(io)?.last().is_some_and(|&b| b != b'\n') {
            file.write_all(b"\n").map_err(io)?;
        }
        Ok(CachedAnnotator { inner, entries: Mutex::new(entries), file: Some((path.to_path_buf(), Mutex::new(file))) })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }
}

impl<A: Annotator> Annotator for CachedAnnotator<A> {
    fn annotate(&self, sentence1: &str, sentence2: &str) -> Result<Annotation, AdapterError> {
        let key = pair_key(sentence1, sentence2);
        if let Some(hit) = self.entries.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let annotation = self.inner.annotate(sentence1, sentence2)?;
        if let Some((path, file)) = &self.file {
            let line = serde_json::to_string(&CacheLine { key: key.clone(), annotation: annotation.clone() })
                .expect("cache line serializes");
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            writeln!(f, "{line}").map_err(|e| AdapterError::Config(format!("judge cache {}: {e}", path.display())))?;
        }
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).insert(key, annotation.clone());
        Ok(annotation)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_has_exactly_two_slots() {
        assert_eq!(JUDGE_TEMPLATE.matches(SLOT_1).count(), 1);
        assert_eq!(JUDGE_TEMPLATE.matches(SLOT_2).count(), 1);
        assert!(JUDGE_TEMPLATE.starts_with("Please determine whether the following two sentences"));
        assert_eq!(JUDGE_TEMPLATE.matches("Question:").count(), 3);
        assert_eq!(JUDGE_TEMPLATE.matches("\"result\": 0").count(), 2);
    }

    #[test]
    fn rendering_substitutes_only_the_slots() {
        let s1 = "x {sentence2} y";
        let out = render_judge_prompt(s1, "B");
        let (head, rest) = JUDGE_TEMPLATE.split_once(SLOT_1).unwrap();
        let (mid, tail) = rest.split_once(SLOT_2).unwrap();
        assert_eq!(out, format!("{head}{s1}{mid}B{tail}"));
        assert!(out.contains("x {sentence2} y\nSentence2:\nB\n"));
    }

    #[test]
    fn parses_reply_shapes() {
        let a = parse_annotation(r#"{"reasoning_step": "same", "result": 4}"#).unwrap();
        assert_eq!(a, Annotation { reasoning_step: "same".into(), result: 4 });
        // LaTeX escapes and a fenced block
        let a = parse_annotation("```json\n{\n \"reasoning_step\": \"uses \\(a+b\\)\",\n \"result\": \"3\"\n}\n```")
            .unwrap();
        assert_eq!((a.reasoning_step.as_str(), a.result), ("uses \\(a+b\\)", 3));
        // python-style quotes fall back to the field scan
        let a = parse_annotation("{'reasoning_step': 'differs', 'result': 1}").unwrap();
        assert_eq!((a.reasoning_step.as_str(), a.result), ("differs", 1));
        assert_eq!(parse_annotation(r#"{"result": 7}"#), Err(ParseFailure::OutOfRange(7)));
        assert!(matches!(parse_annotation("They are equivalent."), Err(ParseFailure::Unparseable(_))));
        assert!(matches!(parse_annotation(r#"{"reasoning_step": "?"}"#), Err(ParseFailure::Unparseable(_))));
    }

    #[test]
    fn pair_key_is_order_and_boundary_sensitive() {
        assert_ne!(pair_key("ab", "c"), pair_key("a", "bc"));
        assert_ne!(pair_key("a", "b"), pair_key("b", "a"));
        assert_eq!(pair_key("a", "b").len(), 64);
    }

    struct Counting(std::sync::atomic::AtomicUsize);

    impl Annotator for Counting {
        fn annotate(&self, a: &str, _: &str) -> Result<Annotation, AdapterError> {
            self.0.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Ok(Annotation { reasoning_step: a.into(), result: 1 })
        }
        fn fingerprint(&self) -> String {
            "counting".into()
        }
    }

    #[test]
    fn file_cache_persists_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.jsonl");
        let c = CachedAnnotator::with_file(Counting(Default::default()), &path).unwrap();
        c.annotate("a", "b").unwrap();
        c.annotate("a", "b").unwrap();
        c.annotate("c", "d").unwrap();
        assert_eq!(c.inner().0.load(std::sync::atomic::Ordering::Relaxed), 2);
        drop(c);
        fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"key\": \"tor").unwrap();
        let c = CachedAnnotator::with_file(Counting(Default::default()), &path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.annotate("c", "d").unwrap().reasoning_step, "c");
        assert_eq!(c.inner().0.load(std::sync::atomic::Ordering::Relaxed), 0);
        c.annotate("e", "f").unwrap();
        drop(c);
        let c = CachedAnnotator::with_file(Counting(Default::default()), &path).unwrap();
        assert_eq!(c.len(), 3);
    }
}
