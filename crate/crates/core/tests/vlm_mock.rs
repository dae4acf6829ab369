mod common;

use std::fs;

use common::{MockServer, Reply};
use hcvc::cue_pipeline::{build_prompt, CueError, CueKind, VlmClient, VlmConfig};
use hcvc::data_model::SyntheticSceneConfig;
use hcvc::harness::{collect_cues, load_dataset, CueConfig, CueMode, DataConfig};

fn client(url: &str, retries: usize) -> VlmClient {
    VlmClient::new(VlmConfig { retries, backoff_ms: 1, timeout_ms: 2_000, ..VlmConfig::new(url) }).unwrap()
}

fn echo() -> MockServer {
    MockServer::start(|_, req| {
        let body = req.json();
        let image = body["image_ref"].as_str().unwrap_or("?").to_string();
        Reply::ok_text(&format!("a person in {image} ({} chars of prompt)", body["prompt"].as_str().unwrap().len()))
    })
}

#[test]
fn live_mode_populates_the_cache() {
    let server = echo();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cues.jsonl");
    let data = load_dataset(&DataConfig::Synthetic(SyntheticSceneConfig { images: 5, ..Default::default() })).unwrap();
    let cfg = CueConfig {
        mode: CueMode::Live,
        endpoint: server.url.clone(),
        cache: Some(cache.clone()),
        backoff_ms: 1,
        max_in_flight: 3,
        ..Default::default()
    };
    let (cues, stats) = collect_cues(&cfg, &data).unwrap();
    assert_eq!((stats.live, stats.cache, stats.failed), (5, 0, 0));
    assert_eq!(server.count(), 15);
    assert!(cues.iter().zip(&data.annotations).all(|(c, a)| c.participant.contains(&a.id)));

    let lines = fs::read_to_string(&cache).unwrap();
    assert_eq!(lines.lines().count(), 5);
    for a in &data.annotations {
        assert!(lines.contains(&format!("\"image_id\":\"{}\"", a.id)));
    }

    // A second run is served from the cache file without any request.
    let (again, stats) = collect_cues(&cfg, &data).unwrap();
    assert_eq!(stats.cache, 5);
    assert_eq!(server.count(), 15);
    for (a, b) in cues.iter().zip(&again) {
        assert_eq!((&a.participant, &a.body_language, &a.environmental), (&b.participant, &b.body_language, &b.environmental));
    }

    // The three prompts are distinct and each image reference is sent as-is.
    let prompts: std::collections::BTreeSet<String> =
        server.requests().iter().map(|r| r.json()["prompt"].as_str().unwrap().to_string()).collect();
    assert_eq!(prompts.len(), 3);
}

#[test]
fn server_errors_are_retried() {
    let server = MockServer::start(|i, _| if i < 2 { Reply::raw(503, "busy") } else { Reply::ok_text("two people") });
    let c = client(&server.url, 3);
    let text = c.complete("img", "img.jpg", &build_prompt(CueKind::Participant)).unwrap();
    assert_eq!(text, "two people");
    assert_eq!((c.requests_made(), server.count()), (3, 3));

    let down = MockServer::start(|_, _| Reply::raw(500, "down"));
    let c = client(&down.url, 2);
    match c.complete("img", "img.jpg", &build_prompt(CueKind::Environmental)) {
        Err(CueError::Request { attempts, reason, .. }) => {
            assert_eq!(attempts, 3);
            assert!(reason.contains("500"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(down.count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(|_, _| Reply::raw(400, "bad request"));
    let c = client(&server.url, 3);
    let err = c.complete("img", "img.jpg", &build_prompt(CueKind::BodyLanguage)).unwrap_err();
    assert!(matches!(err, CueError::Request { attempts: 1, .. }), "{err:?}");
    assert_eq!(server.count(), 1);
}

#[test]
fn malformed_responses_keep_the_payload() {
    for payload in ["<html>oops</html>", r#"{"text": "   "}"#, r#"{"answer": "x"}"#] {
        let server = MockServer::start(move |_, _| Reply::raw(200, payload));
        let c = client(&server.url, 3);
        match c.complete("img7", "img.jpg", &build_prompt(CueKind::Participant)) {
            Err(CueError::MalformedResponse { image_id, raw, .. }) => {
                assert_eq!(image_id, "img7");
                assert_eq!(raw, payload);
            }
            other => panic!("{payload}: {other:?}"),
        }
        assert_eq!(server.count(), 1);
    }
}

#[test]
fn timeouts_are_retried_and_tokens_sent() {
    let server = MockServer::start(|i, _| Reply { delay_ms: if i == 0 { 1_500 } else { 0 }, ..Reply::ok_text("ok") });
    let cfg = VlmConfig {
        retries: 1,
        backoff_ms: 1,
        timeout_ms: 300,
        token: Some("s3cret".into()),
        ..VlmConfig::new(server.url.clone())
    };
    let c = VlmClient::new(cfg.clone()).unwrap();
    assert_eq!(c.complete("img", "img.jpg", &build_prompt(CueKind::Participant)).unwrap(), "ok");
    assert_eq!(server.count(), 2);
    assert_eq!(server.requests()[1].header("authorization"), Some("Bearer s3cret"));
    assert!(!serde_json::to_string(&cfg).unwrap().contains("s3cret"));
}

#[test]
fn inline_images_are_base64_encoded() {
    let server = echo();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.jpg");
    fs::write(&img, [0xffu8, 0xd8, 0xff, 0x00]).unwrap();
    let c = VlmClient::new(VlmConfig { inline_images: true, ..VlmConfig::new(server.url.clone()) }).unwrap();
    c.complete("pic", img.to_str().unwrap(), &build_prompt(CueKind::Environmental)).unwrap();
    let body = server.requests()[0].json();
    assert_eq!(body["image_base64"], "/9j/AA==");
    assert!(body.get("image_ref").is_none());
}

#[test]
fn failed_images_are_all_reported() {
    let server = MockServer::start(|_, req| {
        if req.json()["image_ref"].as_str().unwrap().ends_with('1') {
            Reply::raw(404, "no such image")
        } else {
            Reply::ok_text("fine")
        }
    });
    let data = load_dataset(&DataConfig::Synthetic(SyntheticSceneConfig { images: 3, ..Default::default() })).unwrap();
    let cfg = CueConfig { mode: CueMode::Live, endpoint: server.url.clone(), backoff_ms: 1, ..Default::default() };
    match collect_cues(&cfg, &data) {
        Err(hcvc::harness::HarnessError::MissingCues(f)) => {
            assert_eq!(f.len(), 1);
            assert_eq!(f[0].0, "synth_00001");
        }
        other => panic!("{other:?}"),
    }
}
