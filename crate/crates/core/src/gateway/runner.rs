use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{CompletionEndpoint, GatewayError, GenerationParams};
use crate::cohort::sha256_hex;
use crate::prompt::PromptVariant;

pub const HEADER_FILE: &str = "run.json";
pub const CASES_FILE: &str = "cases.jsonl";

/// A fully rendered prompt for one test encounter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedCase {
    pub encounter_id: String,
    pub prompt: String,
}

/// Run-level configuration. The run id is a digest of every field that can
/// change outputs, so it is stable across worker counts and reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub variant: PromptVariant,
    pub model: String,
    pub params: GenerationParams,
    pub corpus_digest: String,
    pub split_seed: Option<u64>,
    pub case_count: usize,
}

impl RunHeader {
    pub fn new(
        variant: PromptVariant,
        model: &str,
        params: GenerationParams,
        corpus_digest: &str,
        split_seed: Option<u64>,
        cases: &[PreparedCase],
    ) -> Self {
        let mut ids: Vec<(&str, String)> = cases
            .iter()
            .map(|c| (c.encounter_id.as_str(), prompt_hash(&c.prompt)))
            .collect();
        ids.sort();
        let material = serde_json::json!({
            "variant": variant,
            "model": model,
            "params": params,
            "corpus": corpus_digest,
            "split_seed": split_seed,
            "cases": ids,
        });
        let run_id = sha256_hex(material.to_string().as_bytes())[..16].to_string();
        RunHeader {
            run_id,
            variant,
            model: model.to_string(),
            params,
            corpus_digest: corpus_digest.to_string(),
            split_seed,
            case_count: cases.len(),
        }
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// Outcome of one endpoint call. Exactly one of `output` and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub encounter_id: String,
    pub prompt_hash: String,
    pub output: Option<String>,
    pub latency_ms: u64,
    pub attempts: u32,
    pub error: Option<GatewayError>,
}

impl CaseEntry {
    pub fn succeeded(&self) -> bool {
        self.output.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub header: RunHeader,
    /// Sorted by encounter id.
    pub cases: Vec<CaseEntry>,
}

impl RunManifest {
    pub fn failed(&self) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(|c| !c.succeeded())
    }

    pub fn failure_count(&self) -> usize {
        self.failed().count()
    }

    /// Reads a run directory written by [`RunStore`].
    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let header = read_header(dir)?.ok_or_else(|| RunError::Missing(dir.join(HEADER_FILE)))?;
        let mut cases: Vec<CaseEntry> = read_entries(&dir.join(CASES_FILE))?.into_values().collect();
        cases.sort_by(|a, b| a.encounter_id.cmp(&b.encounter_id));
        Ok(RunManifest { header, cases })
    }

    /// Outputs with latency zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunManifest {
        let mut m = self.clone();
        for c in &mut m.cases {
            c.latency_ms = 0;
        }
        m
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0} not found")]
    Missing(PathBuf),
    #[error("run directory belongs to run {found}, not {expected}; use a fresh directory")]
    HeaderMismatch { expected: String, found: String },
    #[error("duplicate case `{0}`")]
    DuplicateCase(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

fn read_header(dir: &Path) -> Result<Option<RunHeader>, RunError> {
    let path = dir.join(HEADER_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| RunError::Format { path, message: e.to_string() }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(RunError::Io { path, source: e }),
    }
}

/// Later lines win. An unparsable final line is a torn write and is ignored;
/// an unparsable line elsewhere is an error.
fn read_entries(path: &Path) -> Result<BTreeMap<String, CaseEntry>, RunError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(RunError::Io { path: path.to_path_buf(), source: e }),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CaseEntry>(line) {
            Ok(e) => {
                out.insert(e.encounter_id.clone(), e);
            }
            Err(_) if i == last => log::warn!("{}: ignoring truncated final line", path.display()),
            Err(e) => {
                return Err(RunError::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

/// Durable, append-only record of a run: `run.json` plus one JSON line per
/// finished case, flushed as each case completes.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    header: RunHeader,
    previous: BTreeMap<String, CaseEntry>,
    writer: Option<BufWriter<File>>,
}

impl RunStore {
    /// Opens `dir` for `header`, creating it if needed. An existing directory
    /// must belong to the same run id; its successful cases are kept.
    pub fn open(dir: &Path, header: &RunHeader) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        match read_header(dir)? {
            Some(found) if found.run_id != header.run_id => {
                return Err(RunError::HeaderMismatch {
                    expected: header.run_id.clone(),
                    found: found.run_id,
                })
            }
            Some(_) => {}
            None => {
                let path = dir.join(HEADER_FILE);
                let text = serde_json::to_string_pretty(header).expect("header serializes");
                fs::write(&path, text + "\n").map_err(io_err(&path))?;
            }
        }
        let previous = read_entries(&dir.join(CASES_FILE))?;
        Ok(RunStore {
            dir: dir.to_path_buf(),
            header: header.clone(),
            previous,
            writer: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Successful entries already on disk.
    pub fn completed(&self) -> impl Iterator<Item = &CaseEntry> {
        self.previous.values().filter(|e| e.succeeded())
    }

    fn rewrite(&mut self, entries: &[&CaseEntry]) -> Result<(), RunError> {
        let path = self.dir.join(CASES_FILE);
        let tmp = self.dir.join(format!("{CASES_FILE}.tmp"));
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
            for e in entries {
                serde_json::to_writer(&mut w, e).expect("entry serializes");
                w.write_all(b"\n").map_err(io_err(&tmp))?;
            }
            w.into_inner()
                .map_err(|e| RunError::Io { path: tmp.clone(), source: e.into_error() })?
                .sync_all()
                .map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Starts appending, dropping failed and torn entries from disk so only
    /// completed cases remain before new work begins.
    fn begin(&mut self) -> Result<(), RunError> {
        let kept: Vec<CaseEntry> = self.completed().cloned().collect();
        self.rewrite(&kept.iter().collect::<Vec<_>>())?;
        let path = self.dir.join(CASES_FILE);
        let file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        self.writer = Some(BufWriter::new(file));
        Ok(())
    }

    pub fn append(&mut self, entry: &CaseEntry) -> Result<(), RunError> {
        if self.writer.is_none() {
            self.begin()?;
        }
        let path = self.dir.join(CASES_FILE);
        let w = self.writer.as_mut().expect("writer opened");
        serde_json::to_writer(&mut *w, entry).expect("entry serializes");
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(&path))
    }

    /// Rewrites the case log sorted by encounter id.
    pub fn finalize(&mut self, manifest: &RunManifest) -> Result<(), RunError> {
        self.writer = None;
        debug_assert_eq!(manifest.header.run_id, self.header.run_id);
        self.rewrite(&manifest.cases.iter().collect::<Vec<_>>())
    }
}

/// Splits `n` items into at most `workers` contiguous, non-empty ranges whose
/// sizes differ by at most one.
pub fn shard_ranges(n: usize, workers: usize) -> Vec<Range<usize>> {
    let shards = workers.max(1).min(n);
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = n / shards + usize::from(s < n % shards);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn run_case(endpoint: &dyn CompletionEndpoint, params: &GenerationParams, case: &PreparedCase) -> CaseEntry {
    let started = Instant::now();
    let result = endpoint.complete(&case.prompt, params);
    let latency_ms = started.elapsed().as_millis() as u64;
    let (output, attempts, error) = match result {
        Ok(c) => (Some(c.text), c.attempts, None),
        Err((e, attempts)) => {
            log::warn!("case {}: {e}", case.encounter_id);
            (None, attempts, Some(e))
        }
    };
    CaseEntry {
        encounter_id: case.encounter_id.clone(),
        prompt_hash: prompt_hash(&case.prompt),
        output,
        latency_ms,
        attempts,
        error,
    }
}

/// Sends every case to `endpoint` using `workers` threads, each owning a
/// contiguous shard of the id-sorted pending cases. A failing case is
/// recorded and does not stop the others. With a store, finished cases are
/// persisted as they arrive and cases already completed with the same prompt
/// are not re-sent.
pub fn run_evaluation(
    header: &RunHeader,
    cases: &[PreparedCase],
    endpoint: &dyn CompletionEndpoint,
    workers: usize,
    mut store: Option<&mut RunStore>,
) -> Result<RunManifest, RunError> {
    let mut sorted: Vec<&PreparedCase> = cases.iter().collect();
    sorted.sort_by(|a, b| a.encounter_id.cmp(&b.encounter_id));
    let mut seen = HashSet::new();
    for c in &sorted {
        if !seen.insert(c.encounter_id.as_str()) {
            return Err(RunError::DuplicateCase(c.encounter_id.clone()));
        }
    }

    let mut done: BTreeMap<String, CaseEntry> = BTreeMap::new();
    if let Some(store) = store.as_deref() {
        for e in store.completed() {
            let current = sorted
                .binary_search_by(|c| c.encounter_id.as_str().cmp(&e.encounter_id))
                .ok()
                .map(|i| sorted[i]);
            if current.is_some_and(|c| prompt_hash(&c.prompt) == e.prompt_hash) {
                done.insert(e.encounter_id.clone(), e.clone());
            }
        }
    }
    let pending: Vec<&PreparedCase> = sorted
        .into_iter()
        .filter(|c| !done.contains_key(&c.encounter_id))
        .collect();
    if !done.is_empty() {
        log::info!("resuming: {} cases already complete, {} pending", done.len(), pending.len());
    }

    let params = &header.params;
    let mut write_error = None;
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel();
        for range in shard_ranges(pending.len(), workers) {
            let shard = &pending[range];
            let tx = tx.clone();
            s.spawn(move || {
                for case in shard {
                    if tx.send(run_case(endpoint, params, case)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for entry in rx {
            if let (Some(store), None) = (store.as_deref_mut(), &write_error) {
                if let Err(e) = store.append(&entry) {
                    write_error = Some(e);
                }
            }
            done.insert(entry.encounter_id.clone(), entry);
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }

    let manifest = RunManifest {
        header: header.clone(),
        cases: done.into_values().collect(),
    };
    if let Some(store) = store {
        store.finalize(&manifest)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Completion;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Upper {
        calls: AtomicUsize,
    }

    impl CompletionEndpoint for Upper {
        fn model(&self) -> &str {
            "upper"
        }
        fn complete(&self, prompt: &str, _: &GenerationParams) -> Result<Completion, (GatewayError, u32)> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if prompt.contains("bad") {
                Err((GatewayError::NonRetryableStatus { status: 400, body: String::new() }, 1))
            } else {
                Ok(Completion { text: prompt.to_uppercase(), attempts: 1 })
            }
        }
    }

    fn cases(n: usize) -> Vec<PreparedCase> {
        (0..n)
            .map(|i| PreparedCase {
                encounter_id: format!("e{i:02}"),
                prompt: if i == 3 { "bad".into() } else { format!("p{i}") },
            })
            .collect()
    }

    fn header(c: &[PreparedCase]) -> RunHeader {
        RunHeader::new(PromptVariant::Finetuned, "upper", GenerationParams::default(), "d", Some(1), c)
    }

    #[test]
    fn shards_are_contiguous_and_balanced() {
        assert_eq!(shard_ranges(8, 4), vec![0..2, 2..4, 4..6, 6..8]);
        assert_eq!(shard_ranges(10, 4), vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(shard_ranges(2, 4), vec![0..1, 1..2]);
        assert!(shard_ranges(0, 4).is_empty());
    }

    #[test]
    fn failures_are_isolated_and_worker_count_is_irrelevant() {
        let c = cases(8);
        let h = header(&c);
        let ep = Upper { calls: AtomicUsize::new(0) };
        let one = run_evaluation(&h, &c, &ep, 1, None).unwrap();
        let four = run_evaluation(&h, &c, &ep, 4, None).unwrap();
        assert_eq!(one.without_timing(), four.without_timing());
        assert_eq!(one.failure_count(), 1);
        assert_eq!(one.cases.iter().filter(|c| c.succeeded()).count(), 7);
        assert_eq!(one.cases[3].encounter_id, "e03");
    }

    #[test]
    fn resume_skips_completed_cases() {
        let dir = tempfile::tempdir().unwrap();
        let c = cases(6);
        let h = header(&c);
        let ep = Upper { calls: AtomicUsize::new(0) };
        let mut store = RunStore::open(dir.path(), &h).unwrap();
        let first = run_evaluation(&h, &c[..4], &ep, 2, Some(&mut store)).unwrap();
        assert_eq!(first.cases.len(), 4);
        // Simulate a crash mid-write.
        let path = dir.path().join(CASES_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"encounter_id\":\"e0").unwrap();
        drop(f);

        ep.calls.store(0, Ordering::SeqCst);
        let mut store = RunStore::open(dir.path(), &h).unwrap();
        let second = run_evaluation(&h, &c, &ep, 3, Some(&mut store)).unwrap();
        // 2 new cases plus the previously failed one.
        assert_eq!(ep.calls.load(Ordering::SeqCst), 3);
        assert_eq!(second.cases.len(), 6);
        assert_eq!(RunManifest::load(dir.path()).unwrap(), second);
    }

    #[test]
    fn store_rejects_foreign_run() {
        let dir = tempfile::tempdir().unwrap();
        let c = cases(2);
        RunStore::open(dir.path(), &header(&c)).unwrap();
        let other = header(&cases(3));
        assert!(matches!(RunStore::open(dir.path(), &other), Err(RunError::HeaderMismatch { .. })));
    }
}
