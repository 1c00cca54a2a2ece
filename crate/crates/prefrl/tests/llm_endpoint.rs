mod common;

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use common::{completion, tiny_config, user_message, MockEndpoint};
use prefrl::cache::PromptCache;
use prefrl::config::OracleKind;
use prefrl::formats::Artifact;
use prefrl::harness::{collect_preferences, HarnessError, OracleHandle, DATASET_FILE, PARTIAL_DATASET_FILE};
use prefrl::llm::{EndpointConfig, LlmAnswer, LlmError, LlmOracle, UreqTransport};
use prefrl::runner::ThreadedRunner;
use prefrl_core::oracle::build_prompt;
use prefrl_core::reward_model::PreferenceDataset;
use prefrl_core::sampler::TrajectorySampler;
use prefrl_core::{interpreter::render, PreferenceLabel, TaskId, TrajectorySummary};

fn endpoint(base: &str) -> EndpointConfig {
    EndpointConfig {
        endpoint: base.to_owned(),
        model: "mock-model".into(),
        base_delay_ms: 1,
        max_delay_ms: 4,
        max_attempts: 3,
        timeout_secs: 10,
        ..EndpointConfig::default()
    }
}

fn oracle(config: EndpointConfig, cache: PromptCache) -> LlmOracle {
    let transport = UreqTransport::new(std::time::Duration::from_secs(config.timeout_secs));
    LlmOracle::with_transport(config, Some("secret-token".into()), Box::new(transport), cache)
}

fn bundle(drops: u32) -> prefrl_core::oracle::PromptBundle {
    let a = TrajectorySummary::unlock(true, 40, 288, drops);
    let b = TrajectorySummary::unlock(false, 288, 288, 0);
    build_prompt(TaskId::Unlock, None, &render(&a), &render(&b))
}

#[test]
fn rate_limit_is_retried_and_token_is_sent() {
    let server = MockEndpoint::start(|i, _| if i == 0 { (429, "slow down".into()) } else { (200, completion("answer: 0")) });
    let llm = oracle(endpoint(&server.base_url), PromptCache::in_memory());
    match llm.query(&bundle(1)).unwrap() {
        LlmAnswer::Label { label, raw } => {
            assert_eq!(label, PreferenceLabel::First);
            assert_eq!(raw, "answer: 0");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.requests(), 2);
    assert_eq!(llm.network_requests(), 2);
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[1].authorization.as_deref(), Some("Bearer secret-token"));
    let body: serde_json::Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(body["model"], "mock-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockEndpoint::start(|_, _| (401, "{\"error\":\"bad token\"}".into()));
    let llm = oracle(endpoint(&server.base_url), PromptCache::in_memory());
    let err = llm.query(&bundle(1)).unwrap_err();
    assert!(matches!(err, LlmError::Unavailable { attempts: 1, .. }), "{err}");
    assert_eq!(server.requests(), 1);
}

#[test]
fn persistent_server_errors_exhaust_attempts() {
    let server = MockEndpoint::start(|_, _| (503, String::new()));
    let llm = oracle(endpoint(&server.base_url), PromptCache::in_memory());
    assert!(matches!(llm.query(&bundle(1)), Err(LlmError::Unavailable { attempts: 3, .. })));
    assert_eq!(server.requests(), 3);
}

#[test]
fn malformed_answers_are_discarded_and_cached() {
    let server = MockEndpoint::start(|_, _| (200, completion("Both look fine to me.")));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let llm = oracle(endpoint(&server.base_url), PromptCache::open(&path).unwrap());
    assert!(matches!(llm.query(&bundle(2)).unwrap(), LlmAnswer::Discarded { .. }));
    let asked = server.requests();
    assert_eq!(asked, llm.config().malformed_attempts as usize);

    let again = oracle(endpoint(&server.base_url), PromptCache::open(&path).unwrap());
    assert!(matches!(again.query(&bundle(2)).unwrap(), LlmAnswer::Discarded { .. }));
    assert_eq!(server.requests(), asked);
    assert_eq!(again.network_requests(), 0);
}

#[test]
fn concurrent_identical_prompts_share_one_request() {
    let server = MockEndpoint::start(|_, _| {
        std::thread::sleep(std::time::Duration::from_millis(50));
        (200, completion("answer:2"))
    });
    let llm = Arc::new(oracle(EndpointConfig { max_inflight: 4, ..endpoint(&server.base_url) }, PromptCache::in_memory()));
    std::thread::scope(|s| {
        for _ in 0..6 {
            let llm = llm.clone();
            s.spawn(move || assert!(matches!(llm.query(&bundle(3)).unwrap(), LlmAnswer::Label { label: PreferenceLabel::Equal, .. })));
        }
    });
    assert_eq!(server.requests(), 1);
}

/// Prompts of the pairs the collection phase will query, in order.
fn expected_prompts(config: &prefrl::config::ExperimentConfig) -> Vec<String> {
    let sampler = TrajectorySampler::random(config.env());
    (0..config.pairs)
        .map(|m| {
            let (a, b) = sampler.sample_pair(config.data_seed, m).unwrap();
            build_prompt(a.task, None, &render(&a), &render(&b)).user_message()
        })
        .collect()
}

#[test]
fn collection_discards_malformed_pairs_and_reuses_the_cache() {
    // The first two distinct prompts always get an answer-free reply.
    let bad: Arc<Mutex<Vec<String>>> = Arc::default();
    let bad_handler = bad.clone();
    let server = MockEndpoint::start(move |_, body| {
        let prompt = user_message(body);
        let mut bad = bad_handler.lock().unwrap();
        if bad.contains(&prompt) || bad.len() < 2 {
            if !bad.contains(&prompt) {
                bad.push(prompt);
            }
            return (200, completion("I would rather not say."));
        }
        (200, completion(if prompt.len() % 2 == 0 { "answer: 0" } else { "Answer: 1" }))
    });

    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.pairs = 10;
    config.data_seed = 3;
    config.oracle.kind = OracleKind::Llm;
    config.oracle.endpoint = endpoint(&server.base_url);
    config.oracle.endpoint.max_inflight = 1;
    let prompts = expected_prompts(&config);

    let runner = ThreadedRunner::new(1);
    let llm = oracle(config.oracle.endpoint.clone(), PromptCache::open(config.cache_path()).unwrap());
    let mut handle = OracleHandle::Llm(llm);
    let first = collect_preferences(&config, &mut handle, &runner).unwrap();

    let bad = bad.lock().unwrap().clone();
    assert_eq!(bad.len(), 2);
    let discarded = prompts.iter().filter(|p| bad.contains(p)).count();
    assert_eq!(first.discards.malformed as usize, discarded);
    assert_eq!(first.dataset.len() + discarded, 10);
    // With this data seed the ten pairs render to ten distinct prompts.
    assert_eq!(prompts.iter().collect::<HashSet<_>>().len(), 10);
    assert_eq!(first.dataset.len(), 8);
    for t in &first.dataset.triples {
        assert!(t.raw_response.as_deref().is_some_and(|r| r.to_lowercase().contains("answer")));
    }
    let saved = PreferenceDataset::load(&dir.path().join(DATASET_FILE)).unwrap();
    assert_eq!(saved, first.dataset);

    let before = server.requests();
    let llm = oracle(config.oracle.endpoint.clone(), PromptCache::open(config.cache_path()).unwrap());
    let mut handle = OracleHandle::Llm(llm);
    let second = collect_preferences(&config, &mut handle, &runner).unwrap();
    assert_eq!(handle.network_requests(), 0);
    assert_eq!(server.requests(), before);
    assert_eq!(second, first);
}

#[test]
fn unreachable_endpoint_keeps_a_partial_dataset() {
    // A port that was free a moment ago refuses connections.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.pairs = 5;
    config.oracle.kind = OracleKind::Llm;
    config.oracle.endpoint = EndpointConfig { max_attempts: 2, ..endpoint(&format!("http://127.0.0.1:{port}/v1")) };
    let llm = oracle(config.oracle.endpoint.clone(), PromptCache::in_memory());
    let mut handle = OracleHandle::Llm(llm);
    let err = collect_preferences(&config, &mut handle, &ThreadedRunner::new(1)).unwrap_err();
    match err {
        HarnessError::OracleUnavailable { collected, requested, partial, .. } => {
            assert_eq!((collected, requested), (0, 5));
            assert!(partial.ends_with(PARTIAL_DATASET_FILE));
            assert!(PreferenceDataset::load(&partial).unwrap().is_empty());
        }
        other => panic!("unexpected {other}"),
    }
    assert!(!dir.path().join(DATASET_FILE).exists());
}

#[test]
fn handle_must_match_the_configured_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.oracle.kind = OracleKind::Llm;
    let err = collect_preferences(&config, &mut OracleHandle::Scripted, &ThreadedRunner::new(1)).unwrap_err();
    assert!(matches!(err, HarnessError::OracleMismatch("scripted", OracleKind::Llm)));
}
