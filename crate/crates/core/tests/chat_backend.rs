mod support;

use std::sync::atomic::Ordering;
use std::time::Duration;

use equicrew_core::agents::AgentError;
use equicrew_core::config::{BackendKind, ConfigError, RunConfig, Secrets};
use equicrew_core::run::{Engine, PipelineError, RunStatus};
use support::mock_chat::{self, MockChat};


fn chat_config(base: &RunConfig, mock: &MockChat, base_delay_ms: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.backend = BackendKind::Chat;
    cfg.chat.endpoint = mock.endpoint();
    cfg.chat.retry.attempts = 3;
    cfg.chat.retry.base_delay_ms = base_delay_ms;
    cfg.chat.min_interval_ms = 0;
    cfg
}

fn secrets() -> Secrets {
    Secrets {
        chat_api_key: Some(mock_chat::TOKEN.into()),
        ..Secrets::default()
    }
}

#[test]
fn full_run_over_http_matches_server_token_counters() {
    let mock = mock_chat::start();
    let f = support::fixture(21, 120, true);
    let cfg = chat_config(&f.config, &mock, 5);
    let e = Engine::new(f.runs(), secrets());
    let run = e.create_run(&cfg).unwrap().run_id;
    let state = e.advance(&run).unwrap();
    assert_eq!(state.status, RunStatus::Completed);
    assert_eq!(state.backend, BackendKind::Chat);

    let usage = e.usage(&run).unwrap();
    let c = &mock.counters;
    assert_eq!(c.served.load(Ordering::SeqCst), 15, "five crews of three agents");
    assert_eq!(usage.input_tokens, c.prompt_tokens.load(Ordering::SeqCst));
    assert_eq!(usage.output_tokens, c.completion_tokens.load(Ordering::SeqCst));
    assert!(usage.input_tokens > 0 && usage.output_tokens > 0);
    assert!(c.models.lock().unwrap().iter().all(|m| m == &cfg.chat.model));
    let alloc = e.workspace.published_allocation(&run).unwrap().unwrap();
    assert!((15..=30).contains(&alloc.positions.len()));
}

#[test]
fn injected_server_errors_are_retried_with_backoff() {
    let mock = mock_chat::start();
    let f = support::fixture(22, 120, true);
    let cfg = chat_config(&f.config, &mock, 40);
    let e = Engine::new(f.runs(), secrets());
    let run = e.create_run(&cfg).unwrap().run_id;
    mock.counters.fail_next.store(2, Ordering::SeqCst);
    let state = e.advance(&run).unwrap();
    assert_eq!(state.status, RunStatus::Completed);
    let c = &mock.counters;
    assert_eq!(c.failures.load(Ordering::SeqCst), 2);
    assert_eq!(c.requests.load(Ordering::SeqCst), 17);
    let arrivals = c.arrivals.lock().unwrap();
    // first call: 500, wait 40ms, 500, wait 80ms, success
    let gap1 = arrivals[1] - arrivals[0];
    let gap2 = arrivals[2] - arrivals[1];
    assert!(gap1 >= Duration::from_millis(40), "{gap1:?}");
    assert!(gap2 >= Duration::from_millis(80), "{gap2:?}");
}

#[test]
fn persistent_server_errors_park_the_run_until_resumed() {
    let mock = mock_chat::start();
    let f = support::fixture(23, 120, true);
    let cfg = chat_config(&f.config, &mock, 1);
    let e = Engine::new(f.runs(), secrets());
    let run = e.create_run(&cfg).unwrap().run_id;
    mock.counters.fail_next.store(3, Ordering::SeqCst);
    let err = e.advance(&run).unwrap_err();
    match &err {
        PipelineError::Stage { source, .. } => {
            assert!(matches!(source.agent_error(), Some(AgentError::RetriesExhausted { attempts: 3, .. })), "{err}");
        }
        other => panic!("{other}"),
    }
    assert_eq!(e.workspace.state(&run).unwrap().status, RunStatus::Failed);
    assert_eq!(e.resume(&run).unwrap().status, RunStatus::Completed);
}

#[test]
fn rejected_key_is_not_retried() {
    let mock = mock_chat::start();
    let f = support::fixture(24, 120, true);
    let cfg = chat_config(&f.config, &mock, 1);
    let bad = Secrets {
        chat_api_key: Some("wrong".into()),
        ..Secrets::default()
    };
    let e = Engine::new(f.runs(), bad);
    let run = e.create_run(&cfg).unwrap().run_id;
    let err = e.advance(&run).unwrap_err();
    assert!(err.to_string().contains("401"), "{err}");
    assert_eq!(mock.counters.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn chat_backend_without_key_is_a_config_error() {
    let mock = mock_chat::start();
    let f = support::fixture(25, 60, true);
    let cfg = chat_config(&f.config, &mock, 1);
    let err = Engine::new(f.runs(), Secrets::default()).create_run(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Config(ConfigError::MissingEnv(_))), "{err}");
    assert_eq!(err.exit_code(), 1);
}
