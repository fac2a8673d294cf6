use std::time::{Duration, Instant};

use claimbench::gateway::{
    run_evaluation, CompletionEndpoint, EmbeddingEndpoint, EndpointConfig, GatewayError, GenerationParams,
    HttpEndpoint, PreparedCase, RunHeader, RunManifest, RunStore,
};
use claimbench::prompt::PromptVariant;
use claimbench::stub::{Reply, StubConfig, StubServer};

fn fast_config(base: &str) -> EndpointConfig {
    let mut c = EndpointConfig::new(base, "stub-model");
    c.api_key_env = None;
    c.timeout = Duration::from_secs(5);
    c.retry.initial_backoff = Duration::from_millis(10);
    c.retry.max_backoff = Duration::from_millis(50);
    c
}

fn cases(n: usize) -> Vec<PreparedCase> {
    (0..n)
        .map(|i| PreparedCase { encounter_id: format!("case-{i:02}"), prompt: format!("prompt body {i}") })
        .collect()
}

fn header(cases: &[PreparedCase]) -> RunHeader {
    RunHeader::new(PromptVariant::Finetuned, "stub-model", GenerationParams::default(), "digest", Some(0), cases)
}

#[test]
fn fixed_reply_round_trips_and_sends_greedy_params() {
    let stub = StubServer::start(StubConfig::new(Reply::Fixed("ICD-10-CM Diagnoses:\n\nK21.9".into()))).unwrap();
    let ep = HttpEndpoint::new(fast_config(stub.base_url())).unwrap();
    let c = ep.complete("hello", &GenerationParams::default()).unwrap();
    assert_eq!(c.text, "ICD-10-CM Diagnoses:\n\nK21.9");
    assert_eq!(c.attempts, 1);
    let sent = &stub.completion_requests()[0];
    assert_eq!(sent["prompt"], "hello");
    assert_eq!(sent["max_tokens"], 512);
    assert_eq!(sent["temperature"], 0.0);
    assert_eq!(sent["extensions"]["repetition_penalty"], 1.1);
    assert_eq!(sent["extensions"]["do_sample"], false);
    assert_eq!(sent["extensions"]["num_beams"], 1);
}

#[test]
fn server_errors_are_retried() {
    let mut cfg = StubConfig::new(Reply::Fixed("ok".into()));
    cfg.scripted_statuses = vec![500, 500];
    let stub = StubServer::start(cfg).unwrap();
    let ep = HttpEndpoint::new(fast_config(stub.base_url())).unwrap();
    let c = ep.complete("p", &GenerationParams::default()).unwrap();
    assert_eq!(c.text, "ok");
    assert_eq!(c.attempts, 3);
    assert_eq!(stub.completion_requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let mut cfg = StubConfig::new(Reply::Fixed("ok".into()));
    cfg.scripted_statuses = vec![422];
    let stub = StubServer::start(cfg).unwrap();
    let ep = HttpEndpoint::new(fast_config(stub.base_url())).unwrap();
    let (err, attempts) = ep.complete("p", &GenerationParams::default()).unwrap_err();
    assert!(matches!(err, GatewayError::NonRetryableStatus { status: 422, .. }));
    assert_eq!(attempts, 1);
}

#[test]
fn timeouts_are_recorded_per_case_and_the_run_continues() {
    let mut cfg = StubConfig::new(Reply::Fixed("late".into()));
    cfg.delay = Duration::from_millis(400);
    let stub = StubServer::start(cfg).unwrap();
    let mut ec = fast_config(stub.base_url());
    ec.timeout = Duration::from_millis(100);
    ec.retry.max_attempts = 2;
    let ep = HttpEndpoint::new(ec).unwrap();
    let cs = cases(3);
    let m = run_evaluation(&header(&cs), &cs, &ep, 3, None).unwrap();
    assert_eq!(m.cases.len(), 3);
    for c in &m.cases {
        assert_eq!(c.error, Some(GatewayError::Timeout));
        assert_eq!(c.attempts, 2);
        assert!(c.output.is_none());
    }
}

#[test]
fn one_permanent_failure_leaves_the_rest_scored() {
    let mut cfg = StubConfig::new(Reply::Fixed("fine".into()));
    cfg.failing_markers = vec!["prompt body 5".into()];
    let stub = StubServer::start(cfg).unwrap();
    let ep = HttpEndpoint::new(fast_config(stub.base_url())).unwrap();
    let cs = cases(8);
    let m = run_evaluation(&header(&cs), &cs, &ep, 4, None).unwrap();
    assert_eq!(m.cases.len(), 8);
    assert_eq!(m.cases.iter().filter(|c| c.succeeded()).count(), 7);
    let failed: Vec<_> = m.failed().map(|c| c.encounter_id.as_str()).collect();
    assert_eq!(failed, ["case-05"]);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let pairs = (0..12).map(|i| (format!("prompt body {i}"), format!("claim {i}"))).collect();
    let stub = StubServer::start(StubConfig::new(Reply::Echo(pairs))).unwrap();
    let ep = HttpEndpoint::new(fast_config(stub.base_url())).unwrap();
    let cs = cases(12);
    let h = header(&cs);
    let one = run_evaluation(&h, &cs, &ep, 1, None).unwrap().without_timing();
    let four = run_evaluation(&h, &cs, &ep, 4, None).unwrap().without_timing();
    assert_eq!(one, four);
    assert_eq!(one.cases[3].output.as_deref(), Some("claim 3"));
}

#[test]
fn resumed_run_matches_single_pass() {
    let pairs = (0..10).map(|i| (format!("prompt body {i}"), format!("claim {i}"))).collect();
    let stub = StubServer::start(StubConfig::new(Reply::Echo(pairs))).unwrap();
    let ep = HttpEndpoint::new(fast_config(stub.base_url())).unwrap();
    let cs = cases(10);
    let h = header(&cs);

    let single_dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(single_dir.path(), &h).unwrap();
    let single = run_evaluation(&h, &cs, &ep, 2, Some(&mut store)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), &h).unwrap();
    run_evaluation(&h, &cs[..6], &ep, 2, Some(&mut store)).unwrap();
    drop(store);
    let before = stub.completion_requests().len();
    let mut store = RunStore::open(dir.path(), &h).unwrap();
    let resumed = run_evaluation(&h, &cs, &ep, 3, Some(&mut store)).unwrap();
    assert_eq!(stub.completion_requests().len() - before, 4);
    assert_eq!(resumed.without_timing(), single.without_timing());
    assert_eq!(RunManifest::load(dir.path()).unwrap().without_timing(), single.without_timing());
}

#[test]
fn bearer_token_is_sent_but_never_persisted() {
    const VAR: &str = "CLAIMBENCH_TEST_SECRET_TOKEN";
    const SECRET: &str = "sk-test-7f3a9c0e1d2b4a6f";
    std::env::set_var(VAR, SECRET);
    let mut cfg = StubConfig::new(Reply::Fixed("ok".into()));
    cfg.required_token = Some(SECRET.into());
    let stub = StubServer::start(cfg).unwrap();
    let mut ec = fast_config(stub.base_url());
    ec.api_key_env = Some(VAR.into());

    let ep = HttpEndpoint::new(ec.clone()).unwrap();
    let cs = cases(3);
    let h = header(&cs);
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), &h).unwrap();
    let m = run_evaluation(&h, &cs, &ep, 2, Some(&mut store)).unwrap();
    assert_eq!(m.failure_count(), 0);
    assert!(stub.auth_headers().iter().all(|h| h.as_deref() == Some(&*format!("Bearer {SECRET}"))));

    let mut artifacts = vec![serde_json::to_string(&ec).unwrap(), format!("{ep:?}"), format!("{m:?}")];
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        artifacts.push(std::fs::read_to_string(entry.unwrap().path()).unwrap());
    }
    for a in &artifacts {
        assert!(!a.contains(SECRET), "secret leaked into {a}");
    }

    let anonymous = HttpEndpoint::with_token(fast_config(stub.base_url()), None).unwrap();
    let (err, _) = anonymous.complete("p", &GenerationParams::default()).unwrap_err();
    assert_eq!(err, GatewayError::AuthRejected { status: 401 });
}

#[test]
fn embeddings_keep_order_and_dimension() {
    let mut cfg = StubConfig::new(Reply::Fixed(String::new()));
    cfg.embedding_dim = 16;
    let stub = StubServer::start(cfg).unwrap();
    let ep = HttpEndpoint::new(fast_config(stub.base_url())).unwrap();
    let texts: Vec<String> = ["alpha beta", "gamma", "delta epsilon zeta"].map(String::from).to_vec();
    let vs = ep.embed(&texts, 16).unwrap();
    assert_eq!(vs.len(), 3);
    assert!(vs.iter().all(|v| v.len() == 16));
    let single = ep.embed(&texts[..1], 16).unwrap();
    assert_eq!(single[0], vs[0]);
    assert_eq!(
        ep.embed(&texts, 32).unwrap_err(),
        GatewayError::DimensionMismatch { index: 0, expected: 32, got: 16 }
    );
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut c = fast_config(&format!("http://{addr}/v1"));
    c.retry.max_attempts = 2;
    let ep = HttpEndpoint::new(c).unwrap();
    let started = Instant::now();
    let (err, attempts) = ep.complete("p", &GenerationParams::default()).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { .. }), "{err:?}");
    assert_eq!(attempts, 2);
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn bad_base_url_is_a_config_error() {
    assert!(matches!(
        HttpEndpoint::new(fast_config("localhost:1")),
        Err(GatewayError::Config { .. })
    ));
}
