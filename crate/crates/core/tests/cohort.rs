use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use claimbench::claims::{EncounterRecord, Sex};
use claimbench::cohort::{
    ingest, ingest_reader, split, summarize, token_stats, CohortError, Corpus, SidecarCounts, SplitSpec,
    WhitespaceTokenizer,
};
use claimbench::synth::{synth_corpus, SynthConfig};
use claimbench::BillingClaim;

fn bare(id: String, date: NaiveDate) -> EncounterRecord {
    EncounterRecord {
        id,
        note: "n".into(),
        date,
        service: "General Surgery".into(),
        claim: BillingClaim::default(),
        patient_age: None,
        sex: None,
    }
}

#[test]
fn full_scale_split_matches_per_stratum_recount() {
    const N: usize = 192_585;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();
    let records: Vec<_> = (0..N)
        .map(|i| bare(format!("e{i}"), start + chrono::Days::new(rng.random_range(0..1461))))
        .collect();
    let by_id: HashMap<String, NaiveDate> = records.iter().map(|r| (r.id.clone(), r.date)).collect();
    let corpus = Corpus::from_records(records).unwrap();
    let s = split(&corpus, &SplitSpec { seed: 42, ..Default::default() }).unwrap();

    let mut per_month: BTreeMap<(i32, u32), [usize; 3]> = BTreeMap::new();
    for (bucket, ids) in [&s.train, &s.validation, &s.test].into_iter().enumerate() {
        for id in ids {
            let d = by_id[id];
            per_month.entry((d.year(), d.month())).or_default()[bucket] += 1;
        }
    }
    let strata = per_month.len();
    assert_eq!(strata, 48);
    for (month, counts) in &per_month {
        let n: usize = counts.iter().sum();
        for (c, f) in counts.iter().zip([0.6, 0.2, 0.2]) {
            assert!((*c as f64 - f * n as f64).abs() < 1.0, "{month:?}: {counts:?}");
        }
    }
    let expected_test = 38_517i64;
    assert!((s.test.len() as i64 - expected_test).abs() <= strata as i64, "test size {}", s.test.len());
    assert_eq!(s.train.len() + s.validation.len() + s.test.len(), N);
}

#[test]
fn summary_matches_hand_tally() {
    let records = synth_corpus(&SynthConfig { encounters: 300, seed: 9, first_year: 2017, last_year: 2019 });
    let corpus = Corpus::from_records(records.clone()).unwrap();
    let summary = summarize(&corpus);

    let mut sex: BTreeMap<String, usize> = BTreeMap::new();
    let mut year: BTreeMap<String, usize> = BTreeMap::new();
    let mut service: BTreeMap<String, usize> = BTreeMap::new();
    let mut ages = Vec::new();
    for r in &records {
        let label = match r.sex {
            Some(Sex::F) => "F",
            Some(Sex::M) => "M",
            None => continue,
        };
        *sex.entry(label.into()).or_default() += 1;
        *year.entry(r.date.year().to_string()).or_default() += 1;
        *service.entry(r.service.clone()).or_default() += 1;
        ages.extend(r.patient_age);
    }
    for (table, tally) in [(&summary.sex, &sex), (&summary.year, &year), (&summary.service, &service)] {
        let got: BTreeMap<String, usize> = table.iter().map(|c| (c.label.clone(), c.count)).collect();
        assert_eq!(&got, tally);
        let pct: f64 = table.iter().map(|c| c.pct).sum();
        assert!((pct - 100.0).abs() < 1e-9);
    }
    let mean = ages.iter().sum::<f64>() / ages.len() as f64;
    let (m, _) = summary.age.unwrap();
    assert!((m - mean).abs() < 1e-9);
    assert_eq!(summary.total, 300);
}

#[test]
fn sidecar_counts_drive_token_stats() {
    let records = synth_corpus(&SynthConfig { encounters: 20, ..Default::default() });
    let corpus = Corpus::from_records(records).unwrap();
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "id,tokens").unwrap();
    let mut expected = Vec::new();
    for (i, r) in corpus.encounters().iter().enumerate() {
        let n = 100 + 37 * i;
        writeln!(file, "{},{n}", r.id).unwrap();
        expected.push(n as f64);
    }
    let stats = token_stats(&corpus, &SidecarCounts::load(file.path()).unwrap(), 50).unwrap();
    let mean = expected.iter().sum::<f64>() / expected.len() as f64;
    assert!((stats.mean - mean).abs() < 1e-9);
    assert_eq!(stats.min, 100);
    assert_eq!(stats.max, 100 + 37 * 19);
    assert_eq!(stats.histogram.iter().map(|b| b.count).sum::<usize>(), 20);

    let ws = token_stats(&corpus, &WhitespaceTokenizer, 10).unwrap();
    assert!(ws.min as f64 <= ws.mean && ws.mean <= ws.max as f64);
}

#[test]
fn ingest_reports_line_numbers_and_is_deterministic() {
    let good = r#"{"id":"a","note":"x","date":"2019-01-02","service":"S","claim":{"icd10":["k219"],"providers":[]}}"#;
    let no_note = r#"{"id":"b","date":"2019-01-02","service":"S","claim":{}}"#;
    let err = ingest_reader(format!("{good}\n{no_note}\n").as_bytes()).unwrap_err();
    assert!(matches!(err, CohortError::Schema { line: 2, .. }), "{err}");

    let dup = ingest_reader(format!("{good}\n{good}\n").as_bytes()).unwrap_err();
    assert!(matches!(dup, CohortError::DuplicateId { line: 2, first_line: 1, .. }));

    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "{good}").unwrap();
    let (a, b) = (ingest(file.path()).unwrap(), ingest(file.path()).unwrap());
    assert_eq!(a.source_digest(), b.source_digest());
    assert_eq!(a.get("a").unwrap().claim.icd10.iter().next().unwrap().as_str(), "K21.9");
}

#[test]
fn bundled_corpus_loads_and_splits() {
    let corpus = ingest(format!("{}/data/corpus.jsonl", env!("CARGO_MANIFEST_DIR")).as_ref()).unwrap();
    assert_eq!(corpus.len(), 50);
    let s = split(&corpus, &SplitSpec::default()).unwrap();
    assert!(!s.test.is_empty());
}
