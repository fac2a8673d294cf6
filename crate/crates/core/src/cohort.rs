//! Corpus ingestion, the date-balanced train/validation/test split, cohort
//! summary tables, and operative-note token-length statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claims::{EncounterRecord, Sex};
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate encounter id `{id}` (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid split fractions {0:?}: each must be > 0 and they must sum to 1")]
    BadFractions([f64; 3]),
    #[error("no token count for encounter `{0}`")]
    MissingTokenCount(String),
    #[error("{path}:{line}: {message}")]
    Sidecar {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// An ingested corpus of encounters with a digest of its source bytes.
#[derive(Debug, Clone)]
pub struct Corpus {
    encounters: Vec<EncounterRecord>,
    index: HashMap<String, usize>,
    source_digest: String,
}

impl Corpus {
    /// Builds a corpus from records; the digest covers their canonical JSONL
    /// serialization, which is the byte stream [`Corpus::to_jsonl`] writes.
    pub fn from_records(encounters: Vec<EncounterRecord>) -> Result<Self, CohortError> {
        let jsonl = to_jsonl(&encounters);
        let mut index = HashMap::with_capacity(encounters.len());
        for (i, rec) in encounters.iter().enumerate() {
            validate_record(rec).map_err(|message| CohortError::Schema { line: i + 1, message })?;
            if let Some(first) = index.insert(rec.id.clone(), i) {
                return Err(CohortError::DuplicateId {
                    id: rec.id.clone(),
                    line: i + 1,
                    first_line: first + 1,
                });
            }
        }
        Ok(Corpus {
            encounters,
            index,
            source_digest: sha256_hex(jsonl.as_bytes()),
        })
    }

    pub fn encounters(&self) -> &[EncounterRecord] {
        &self.encounters
    }

    pub fn len(&self) -> usize {
        self.encounters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encounters.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EncounterRecord> {
        self.index.get(id).map(|&i| &self.encounters[i])
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.encounters)
    }
}

fn to_jsonl(records: &[EncounterRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("encounter serializes"));
        out.push('\n');
    }
    out
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn validate_record(rec: &EncounterRecord) -> Result<(), String> {
    if rec.id.trim().is_empty() {
        return Err("`id` is empty".into());
    }
    if rec.note.trim().is_empty() {
        return Err("`note` is empty".into());
    }
    if let Some(age) = rec.patient_age {
        if !age.is_finite() || age < 0.0 {
            return Err(format!("`age` must be a non-negative number, got {age}"));
        }
    }
    Ok(())
}

/// Reads a JSONL corpus. Each non-blank line is one encounter:
///
/// ```json
/// {"id": "...", "note": "...", "date": "YYYY-MM-DD", "service": "...",
///  "claim": {"icd10": ["K21.9"], "providers": [{"name": "...",
///            "lines": [{"cpt": "43239", "modifiers": ["59"], "description": "..."}]}]},
///  "age": 54, "sex": "F"}
/// ```
pub fn ingest(path: &Path) -> Result<Corpus, CohortError> {
    let file = fs::File::open(path).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_reader(file).map_err(|e| match e {
        CohortError::Io { source, .. } => CohortError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn ingest_reader(reader: impl Read) -> Result<Corpus, CohortError> {
    let mut hasher = Sha256::new();
    let mut encounters = Vec::new();
    let mut index = HashMap::new();
    let mut lines_of = Vec::new();
    let mut reader = BufReader::new(reader);
    let mut buf = String::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|source| CohortError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if n == 0 {
            break;
        }
        lineno += 1;
        hasher.update(buf.as_bytes());
        let line = buf.trim();
        if line.is_empty() {
            continue;
        }
        let rec: EncounterRecord = serde_json::from_str(line).map_err(|e| CohortError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        validate_record(&rec).map_err(|message| CohortError::Schema { line: lineno, message })?;
        if let Some(&first) = index.get(&rec.id) {
            return Err(CohortError::DuplicateId {
                id: rec.id,
                line: lineno,
                first_line: lines_of[first],
            });
        }
        index.insert(rec.id.clone(), encounters.len());
        lines_of.push(lineno);
        encounters.push(rec);
    }
    Ok(Corpus {
        encounters,
        index,
        source_digest: hex::encode(hasher.finalize()),
    })
}

/// Date granularity of split strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKey {
    Day,
    #[default]
    Month,
    Year,
}

impl BalanceKey {
    pub fn stratum(&self, date: NaiveDate) -> String {
        match self {
            BalanceKey::Day => date.format("%Y-%m-%d").to_string(),
            BalanceKey::Month => format!("{:04}-{:02}", date.year(), date.month()),
            BalanceKey::Year => format!("{:04}", date.year()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub balance_key: BalanceKey,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.60,
            val_frac: 0.20,
            test_frac: 0.20,
            balance_key: BalanceKey::Month,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train_frac, self.val_frac, self.test_frac]
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let f = self.fractions();
        let ok = f.iter().all(|x| x.is_finite() && *x > 0.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(CohortError::BadFractions(f))
        }
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`; ties in the
/// remainder go to the earlier bucket.
pub fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &bucket in order.iter().take(n.saturating_sub(assigned)) {
        counts[bucket] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumAllocation {
    pub key: String,
    pub total: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Split manifest: the seed, per-stratum counts, and sorted id lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub spec: SplitSpec,
    pub corpus_digest: String,
    pub strata: Vec<StratumAllocation>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Splits a corpus into train/validation/test within date strata.
///
/// Within each stratum, ids are sorted, shuffled with a ChaCha20 stream keyed
/// by (seed, stratum position), and cut by largest-remainder apportionment.
/// A single-encounter stratum always lands in train.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Split, CohortError> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(CohortError::EmptyCorpus);
    }
    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for rec in corpus.encounters() {
        strata
            .entry(spec.balance_key.stratum(rec.date))
            .or_default()
            .push(rec.id.as_str());
    }
    let mut out = Split {
        seed: spec.seed,
        spec: *spec,
        corpus_digest: corpus.source_digest().to_string(),
        strata: Vec::with_capacity(strata.len()),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (position, (key, mut ids)) in strata.into_iter().enumerate() {
        ids.sort_unstable();
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(position as u64);
        ids.shuffle(&mut rng);
        let [n_train, n_val, n_test] = allocate(ids.len(), spec.fractions());
        out.train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        out.validation
            .extend(ids[n_train..n_train + n_val].iter().map(|s| s.to_string()));
        out.test.extend(ids[n_train + n_val..].iter().map(|s| s.to_string()));
        out.strata.push(StratumAllocation {
            key,
            total: ids.len(),
            train: n_train,
            validation: n_val,
            test: n_test,
        });
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub label: String,
    pub count: usize,
    pub pct: f64,
}

/// Cohort summary in the shape of a demographics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub total: usize,
    /// Mean and sample SD of age over records that carry one; `None` when no
    /// record has an age.
    pub age: Option<(f64, f64)>,
    pub sex: Vec<CategoryCount>,
    pub year: Vec<CategoryCount>,
    pub service: Vec<CategoryCount>,
}

fn tally(total: usize, counts: BTreeMap<String, usize>) -> Vec<CategoryCount> {
    counts
        .into_iter()
        .map(|(label, count)| CategoryCount {
            label,
            count,
            pct: if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 },
        })
        .collect()
}

pub fn summarize(corpus: &Corpus) -> CohortSummary {
    let total = corpus.len();
    let mut sex = BTreeMap::new();
    let mut year = BTreeMap::new();
    let mut service = BTreeMap::new();
    let mut ages = Vec::new();
    for rec in corpus.encounters() {
        let s = match rec.sex {
            Some(Sex::F) => "F",
            Some(Sex::M) => "M",
            None => "Unknown",
        };
        *sex.entry(s.to_string()).or_insert(0) += 1;
        *year.entry(rec.date.year().to_string()).or_insert(0) += 1;
        *service.entry(rec.service.clone()).or_insert(0) += 1;
        if let Some(age) = rec.patient_age {
            ages.push(age);
        }
    }
    CohortSummary {
        total,
        age: (!ages.is_empty()).then(|| (stats::mean(&ages), stats::sample_sd(&ages))),
        sex: tally(total, sex),
        year: tally(total, year),
        service: tally(total, service),
    }
}

impl CohortSummary {
    fn dimensions(&self) -> [(&'static str, &[CategoryCount]); 3] {
        [
            ("Sex, n (%)", &self.sex),
            ("Year of Surgery, n (%)", &self.year),
            ("Service, n (%)", &self.service),
        ]
    }

    /// `dimension,category,count,percent` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dimension", "category", "count", "percent"]).unwrap();
        w.write_record(["Total Encounters", "", &self.total.to_string(), "100.0"]).unwrap();
        match self.age {
            Some((m, sd)) => w
                .write_record(["Patient Age, mean (SD)", "", &format!("{m:.1}"), &format!("{sd:.1}")])
                .unwrap(),
            None => w
                .write_record(["Patient Age, mean (SD)", "", "unavailable", ""])
                .unwrap(),
        }
        for (dim, rows) in self.dimensions() {
            for r in rows {
                w.write_record([dim, &r.label, &r.count.to_string(), &format!("{:.1}", r.pct)])
                    .unwrap();
            }
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<[String; 3]> = vec![
            ["Total Encounters".into(), String::new(), self.total.to_string()],
            [
                "Patient Age, mean (SD)".into(),
                String::new(),
                match self.age {
                    Some((m, sd)) => format!("{m:.1} ({sd:.1})"),
                    None => "unavailable".into(),
                },
            ],
        ];
        for (dim, cats) in self.dimensions() {
            for (i, r) in cats.iter().enumerate() {
                rows.push([
                    if i == 0 { dim.to_string() } else { String::new() },
                    r.label.clone(),
                    format!("{} ({:.1})", r.count, r.pct),
                ]);
            }
        }
        render_aligned(&rows)
    }
}

pub(crate) fn render_aligned<R: AsRef<[String]>>(rows: &[R]) -> String {
    let mut widths: Vec<usize> = Vec::new();
    for row in rows {
        for (i, cell) in row.as_ref().iter().enumerate() {
            if widths.len() <= i {
                widths.push(0);
            }
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.as_ref().iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{:<width$}", cell, width = widths[i]);
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Counts tokens for one encounter's operative note.
pub trait TokenCounter {
    fn count_tokens(&self, record: &EncounterRecord) -> Option<usize>;
}

/// Whitespace-delimited token count.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl TokenCounter for WhitespaceTokenizer {
    fn count_tokens(&self, record: &EncounterRecord) -> Option<usize> {
        Some(record.note.split_whitespace().count())
    }
}

/// Token counts computed elsewhere (for example with a model tokenizer),
/// read from a `id,tokens` CSV sidecar.
#[derive(Debug, Clone, Default)]
pub struct SidecarCounts {
    counts: HashMap<String, usize>,
}

impl SidecarCounts {
    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| CohortError::Sidecar {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            })?;
        let mut counts = HashMap::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let err = |message: String| CohortError::Sidecar {
                path: path.to_path_buf(),
                line,
                message,
            };
            let row = row.map_err(|e| err(e.to_string()))?;
            let (Some(id), Some(n)) = (row.get(0), row.get(1)) else {
                return Err(err("expected id,tokens".into()));
            };
            let n = n
                .trim()
                .parse::<usize>()
                .map_err(|e| err(format!("bad token count `{n}`: {e}")))?;
            counts.insert(id.trim().to_string(), n);
        }
        Ok(SidecarCounts { counts })
    }

    pub fn from_map(counts: HashMap<String, usize>) -> Self {
        SidecarCounts { counts }
    }
}

impl TokenCounter for SidecarCounts {
    fn count_tokens(&self, record: &EncounterRecord) -> Option<usize> {
        self.counts.get(&record.id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

/// Distribution of operative-note token lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub n: usize,
    pub bin_width: usize,
    pub histogram: Vec<HistogramBin>,
    pub mean: f64,
    pub sd: f64,
    pub min: usize,
    pub max: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn token_stats(
    corpus: &Corpus,
    counter: &dyn TokenCounter,
    bin_width: usize,
) -> Result<TokenStats, CohortError> {
    let counts = corpus
        .encounters()
        .iter()
        .map(|r| counter.count_tokens(r).ok_or_else(|| CohortError::MissingTokenCount(r.id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(token_stats_from_counts(&counts, bin_width))
}

pub fn token_stats_from_counts(counts: &[usize], bin_width: usize) -> TokenStats {
    let bin_width = bin_width.max(1);
    let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let sorted = stats::sorted_copy(&values);
    let min = counts.iter().copied().min().unwrap_or(0);
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut histogram = Vec::new();
    if !counts.is_empty() {
        let nbins = max / bin_width + 1;
        histogram = (0..nbins)
            .map(|b| HistogramBin {
                lo: b * bin_width,
                hi: (b + 1) * bin_width,
                count: 0,
            })
            .collect();
        for &c in counts {
            histogram[c / bin_width].count += 1;
        }
    }
    let q = |p: f64| if sorted.is_empty() { 0.0 } else { stats::quantile_sorted(&sorted, p) };
    TokenStats {
        n: counts.len(),
        bin_width,
        histogram,
        mean: stats::mean(&values),
        sd: stats::sample_sd(&values),
        min,
        max,
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::BillingClaim;

    fn rec(id: &str, date: &str, note: &str) -> EncounterRecord {
        EncounterRecord {
            id: id.into(),
            note: note.into(),
            date: date.parse().unwrap(),
            service: "General Surgery".into(),
            claim: BillingClaim::default(),
            patient_age: None,
            sex: None,
        }
    }

    const LINE: &str = r#"{"id":"a","note":"n","date":"2019-01-02","service":"S","claim":{"icd10":["K21.9"],"providers":[]}}"#;

    #[test]
    fn ingest_three_lines() {
        let text = format!("{LINE}\n{}\n{}\n", LINE.replace("\"a\"", "\"b\""), LINE.replace("\"a\"", "\"c\""));
        let c = ingest_reader(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 3);
        let again = ingest_reader(text.as_bytes()).unwrap();
        assert_eq!(c.source_digest(), again.source_digest());
        assert_eq!(c.get("b").unwrap().claim.icd10.len(), 1);
    }

    #[test]
    fn ingest_missing_note_names_line() {
        let bad = LINE.replace(r#""note":"n","#, "");
        let text = format!("{LINE}\n{bad}\n");
        match ingest_reader(text.as_bytes()).unwrap_err() {
            CohortError::Schema { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("note"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_duplicate_id() {
        let text = format!("{LINE}\n\n{LINE}\n");
        assert!(matches!(
            ingest_reader(text.as_bytes()).unwrap_err(),
            CohortError::DuplicateId { line: 3, first_line: 1, .. }
        ));
    }

    #[test]
    fn ingest_bad_code_is_schema_error() {
        let bad = LINE.replace("K21.9", "12345");
        assert!(matches!(
            ingest_reader(bad.as_bytes()).unwrap_err(),
            CohortError::Schema { line: 1, .. }
        ));
    }

    #[test]
    fn allocate_exact_and_small() {
        assert_eq!(allocate(10, [0.6, 0.2, 0.2]), [6, 2, 2]);
        assert_eq!(allocate(1, [0.6, 0.2, 0.2]), [1, 0, 0]);
        assert_eq!(allocate(0, [0.6, 0.2, 0.2]), [0, 0, 0]);
        assert_eq!(allocate(7, [0.6, 0.2, 0.2]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn ten_in_one_month_split_six_two_two() {
        let recs = (0..10).map(|i| rec(&format!("e{i}"), "2020-03-05", "x")).collect();
        let corpus = Corpus::from_records(recs).unwrap();
        let s = split(&corpus, &SplitSpec { seed: 9, ..Default::default() }).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, split(&corpus, &SplitSpec { seed: 9, ..Default::default() }).unwrap());
    }

    #[test]
    fn bad_fractions_rejected() {
        let spec = SplitSpec { train_frac: 0.7, ..Default::default() };
        assert!(matches!(spec.validate(), Err(CohortError::BadFractions(_))));
        let spec = SplitSpec { train_frac: 0.8, val_frac: 0.2, test_frac: 0.0, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn summary_two_records() {
        let mut a = rec("a", "2017-05-01", "x");
        a.sex = Some(Sex::F);
        let mut b = rec("b", "2018-05-01", "x");
        b.sex = Some(Sex::M);
        let s = summarize(&Corpus::from_records(vec![a, b]).unwrap());
        assert_eq!(s.sex.len(), 2);
        assert!(s.sex.iter().all(|c| c.count == 1 && (c.pct - 50.0).abs() < 1e-12));
        assert_eq!(s.age, None);
        assert!(s.to_text().contains("unavailable"));
        assert!(s.to_csv().contains("\"Sex, n (%)\",F,1,50.0"));
    }

    #[test]
    fn whitespace_token_stats() {
        let corpus = Corpus::from_records(vec![rec("a", "2020-01-01", "a b"), rec("b", "2020-01-01", "a b c")]).unwrap();
        let st = token_stats(&corpus, &WhitespaceTokenizer, 1).unwrap();
        assert_eq!(st.mean, 2.5);
        assert_eq!((st.min, st.max), (2, 3));
        assert_eq!(st.histogram.iter().map(|b| b.count).sum::<usize>(), 2);

        let one = Corpus::from_records(vec![rec("a", "2020-01-01", "a b")]).unwrap();
        assert_eq!(token_stats(&one, &WhitespaceTokenizer, 8).unwrap().sd, 0.0);
    }

    #[test]
    fn sidecar_missing_id_is_error() {
        let corpus = Corpus::from_records(vec![rec("a", "2020-01-01", "a b")]).unwrap();
        let side = SidecarCounts::from_map(HashMap::new());
        assert!(matches!(
            token_stats(&corpus, &side, 8),
            Err(CohortError::MissingTokenCount(_))
        ));
    }
}
