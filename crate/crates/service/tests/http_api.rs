//! End-to-end tests over a real socket.

use std::f32::consts::PI;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use eventsource_stream::Eventsource;
use futures::StreamExt;
use serde_json::{json, Value};
use tabletop_core::agent::mock::RulePlanner;
use tabletop_core::agent::{
    run_episode, AgentEnv, Backends, BackendError, Capabilities, ChatRequest, LoopConfig, ModelBackend, ProfileKind,
    PromptProfile,
};
use tabletop_core::config::AppConfig;
use tabletop_core::events::{read_jsonl, Clock, EventBody, SessionEvent, VecSink};
use tabletop_core::perception::{DetectorDegradation, OracleDetector};
use tabletop_core::rng;
use tabletop_core::scene::canonical_value;
use tabletop_core::skills::SimExecutor;
use tabletop_core::speech::{encode_pcm16le, ScriptedAsr};
use tabletop_service::{serve, Service, ServiceConfig};

const FRUIT: &str = "Place all the fruits into the red plate";

fn registry() -> Arc<AppConfig> {
    static REG: std::sync::OnceLock<Arc<AppConfig>> = std::sync::OnceLock::new();
    REG.get_or_init(|| Arc::new(AppConfig::builtin())).clone()
}

struct Server {
    base: String,
    http: reqwest::Client,
}

impl Server {
    async fn start(cfg: ServiceConfig) -> Server {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(serve(listener, Arc::new(Service::new(cfg))));
        Server {
            base,
            http: reqwest::Client::new(),
        }
    }

    async fn mock() -> Server {
        Server::start(ServiceConfig::mock(registry())).await
    }

    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn delete(&self, path: &str) -> (u16, Value) {
        let r = self.http.delete(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn create(&self, body: Value) -> String {
        let (status, d) = self.post("/v1/sessions", body).await;
        assert_eq!(status, 201, "{d}");
        d["id"].as_str().unwrap().to_string()
    }

    async fn history(&self, id: &str, from: u64) -> Vec<SessionEvent> {
        let (status, v) = self.get(&format!("/v1/sessions/{id}/events?from={from}&follow=false")).await;
        assert_eq!(status, 200);
        serde_json::from_value(v["events"].clone()).unwrap()
    }

    /// Opens an SSE subscription; `last` sets `Last-Event-ID`.
    async fn subscribe(&self, id: &str, from: Option<u64>, last: Option<u64>) -> Subscriber {
        let query = from.map_or(String::new(), |f| format!("?from={f}"));
        let mut req = self.http.get(format!("{}/v1/sessions/{id}/events{query}", self.base));
        if let Some(l) = last {
            req = req.header("Last-Event-ID", l.to_string());
        }
        let r = req.send().await.unwrap();
        assert_eq!(r.status(), 200);
        assert!(r.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
        Subscriber {
            inner: Box::pin(r.bytes_stream().eventsource()),
        }
    }

    /// Polls until the session awaits an instruction again.
    async fn settle(&self, id: &str) {
        for _ in 0..500 {
            let (_, d) = self.get(&format!("/v1/sessions/{id}")).await;
            if d["state"] == "awaiting_instruction" {
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("session {id} never settled");
    }
}

type EventStream = std::pin::Pin<
    Box<dyn futures::Stream<Item = Result<eventsource_stream::Event, eventsource_stream::EventStreamError<reqwest::Error>>> + Send>,
>;

struct Subscriber {
    inner: EventStream,
}

impl Subscriber {
    /// Next event; checks that the SSE id and event name agree with the payload.
    async fn next(&mut self) -> Option<SessionEvent> {
        let raw = tokio::time::timeout(Duration::from_secs(20), self.inner.next()).await.expect("stream stalled")?;
        let raw = raw.unwrap();
        let e: SessionEvent = serde_json::from_str(&raw.data).unwrap();
        assert_eq!(raw.id, e.seq.to_string());
        assert_eq!(raw.event, e.body.kind());
        Some(e)
    }

    /// Reads through the closing speech of the next episode.
    async fn through_episode(&mut self) -> Vec<SessionEvent> {
        let mut out = vec![];
        let mut verdict_seen = false;
        while let Some(e) = self.next().await {
            let end = match &e.body {
                EventBody::Verdict { outcome, .. } => {
                    verdict_seen = *outcome == tabletop_core::agent::Outcome::Success;
                    false
                }
                EventBody::SpeechOut { text, .. } => verdict_seen || text.starts_with("I could not complete"),
                _ => false,
            };
            out.push(e);
            if end {
                break;
            }
        }
        out
    }

    async fn drain(&mut self) -> Vec<SessionEvent> {
        let mut out = vec![];
        while let Some(e) = self.next().await {
            out.push(e);
        }
        out
    }
}

fn assert_gap_free(events: &[SessionEvent], first: u64) {
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, first + i as u64, "gap or duplicate at index {i}");
    }
}

/// The same episode run directly against the core loop.
fn direct_transcript(scenario: u32, seed: u64, text: &str) -> Vec<EventBody> {
    let reg = registry();
    let task = reg.task_by_instruction(text).unwrap().clone();
    let scene = reg.make_scenario(scenario, seed).unwrap();
    let detector = Arc::new(OracleDetector {
        degradation: DetectorDegradation {
            seed: rng::mix(reg.perception.degradation.seed, seed),
            ..reg.perception.degradation.clone()
        },
        occluded_confidence: reg.perception.occluded_confidence,
    });
    let mut exec = SimExecutor::with_detector(&reg, scene, 0.0, detector).unwrap();
    let backends = Backends::mock(reg.clone());
    let profile = PromptProfile::builtin(ProfileKind::Prompted);
    let env = AgentEnv {
        backends: &backends,
        profile: &profile,
        config: LoopConfig::from_agent(&reg.agent),
        tts: None,
        spoken: false,
    };
    let mut sink = VecSink::new(Clock::Logical);
    run_episode(&env, &task, &mut exec, &mut sink).unwrap();
    // Compared in the canonical encoding the log persists.
    sink.events
        .iter()
        .map(|e| serde_json::from_str::<SessionEvent>(&e.to_json_line()).unwrap().body)
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn create_publishes_initial_snapshot_at_seq_one() {
    let s = Server::mock().await;
    let (status, d) = s.post("/v1/sessions", json!({"scenario": 5, "seed": 7})).await;
    assert_eq!(status, 201);
    assert_eq!(d["v"], 1);
    assert_eq!(d["state"], "awaiting_instruction");
    assert_eq!(d["last_seq"], 1);
    let id = d["id"].as_str().unwrap();
    let h = s.history(id, 1).await;
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].seq, 1);
    let expected = canonical_value(&registry().make_scenario(5, 7).unwrap()).unwrap();
    assert_eq!(h[0].body, EventBody::SceneSnapshot { scene: expected.clone() });
    let (_, scene) = s.get(&format!("/v1/sessions/{id}/scene")).await;
    assert_eq!((scene["seq"].clone(), scene["scene"].clone()), (json!(1), expected));
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_requests_are_client_errors() {
    let s = Server::mock().await;
    for body in [
        json!({"scenario": 99}),
        json!({"scenario": "kitchen"}),
        json!({"task": "sim-99"}),
        json!({"task": "sim-05", "scenario": 3}),
        json!({"scenario": 5, "fail_prob": 2.0}),
        json!({"scenario": 5, "colour": "red"}),
        json!({}),
    ] {
        let (status, e) = s.post("/v1/sessions", body.clone()).await;
        assert_eq!(status, 400, "{body}");
        assert_eq!(e["error"]["code"], "invalid_request");
    }
    assert_eq!(s.get("/v1/sessions/nope").await.0, 404);
    assert_eq!(s.get("/v1/sessions/nope/events?follow=false").await.0, 404);
    assert_eq!(s.post("/v1/sessions/nope/instructions", json!({"text": "hi"})).await.0, 404);
    let id = s.create(json!({"scenario": 5})).await;
    let (status, _) = s.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": "  "})).await;
    assert_eq!(status, 400);
    let (status, _) = s.post(&format!("/v1/sessions/{id}/instructions"), json!({})).await;
    assert_eq!(status, 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn listings_expose_registry() {
    let s = Server::mock().await;
    let (_, t) = s.get("/v1/tasks").await;
    let tasks = t["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), registry().tasks.len());
    assert!(tasks.iter().any(|t| t["instruction"] == FRUIT && t["prompted"] == true));
    let (_, sc) = s.get("/v1/scenarios").await;
    assert_eq!(sc["scenarios"].as_array().unwrap().len(), registry().scenarios.len());
    assert_eq!(s.get("/v1/health").await.1["status"], "ok");
}

#[tokio::test(flavor = "multi_thread")]
async fn fruit_episode_streams_the_hermetic_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(ServiceConfig {
        log_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::mock(registry())
    })
    .await;
    let id = s.create(json!({"scenario": 5, "seed": 7})).await;
    let mut a = s.subscribe(&id, Some(1), None).await;
    let mut b = s.subscribe(&id, None, None).await;
    let (status, r) = s.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": FRUIT})).await;
    assert_eq!(status, 202);
    assert_eq!(r["from_seq"], 2);

    let live = a.through_episode().await;
    assert_eq!(b.through_episode().await, live);
    assert_gap_free(&live, 1);
    let kinds: Vec<&str> = live.iter().map(|e| e.body.kind()).collect();
    assert_eq!(&kinds[..3], &["scene_snapshot", "instruction", "plan"]);
    assert_eq!(kinds.last(), Some(&"speech_out"));
    let verdict = live.iter().find(|e| e.body.kind() == "verdict").unwrap();
    assert!(matches!(&verdict.body, EventBody::Verdict { outcome: tabletop_core::agent::Outcome::Success, ground_truth: Some(g), .. } if g.satisfied));
    let bodies: Vec<EventBody> = live[1..].iter().map(|e| e.body.clone()).collect();
    assert_eq!(bodies, direct_transcript(5, 7, FRUIT));

    s.settle(&id).await;
    let (status, d) = s.delete(&format!("/v1/sessions/{id}")).await;
    assert_eq!((status, d["state"].as_str()), (200, Some("closed")));
    assert!(a.drain().await.is_empty());
    assert!(b.drain().await.is_empty());

    // Replay after close: a finite stream equal to what was seen live.
    let replay = s.subscribe(&id, Some(1), None).await.drain().await;
    assert_eq!(replay, live);
    let path = dir.path().join(format!("{id}.jsonl"));
    assert_eq!(read_jsonl(&path).unwrap(), live);
    let text = s.http.get(format!("{}/v1/sessions/{id}/log", s.base)).send().await.unwrap().text().await.unwrap();
    assert_eq!(text, std::fs::read_to_string(&path).unwrap());
    let (_, scene) = s.get(&format!("/v1/sessions/{id}/scene")).await;
    let last_snapshot = live.iter().rev().find(|e| e.body.kind() == "scene_snapshot").unwrap();
    assert_eq!(scene["seq"], last_snapshot.seq);
    let (status, _) = s.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": FRUIT})).await;
    assert_eq!(status, 410);
}

#[tokio::test(flavor = "multi_thread")]
async fn resume_delivers_only_new_events() {
    let s = Server::mock().await;
    let id = s.create(json!({"task": "sim-05", "seed": 3})).await;
    s.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": FRUIT})).await;
    s.settle(&id).await;
    let first = s.history(&id, 1).await;
    let last = first.last().unwrap().seq;
    assert!(s.history(&id, last + 1).await.is_empty());

    // Reconnect as an EventSource would, then a second episode runs.
    let mut resumed = s.subscribe(&id, None, Some(last)).await;
    let mut by_query = s.subscribe(&id, Some(last + 1), None).await;
    let (status, r) = s.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": "put the apple on the red plate"})).await;
    assert_eq!(status, 202);
    assert_eq!(r["from_seq"], last + 1);
    s.settle(&id).await;
    let all = s.history(&id, 1).await;
    s.delete(&format!("/v1/sessions/{id}")).await;
    let tail = resumed.drain().await;
    assert_eq!(tail, by_query.drain().await);
    assert_eq!(tail.first().unwrap().seq, last + 1);
    assert_eq!(tail, all[last as usize..]);
    assert_gap_free(&all, 1);
    let mut joined = first.clone();
    joined.extend(tail);
    assert_eq!(joined, all);
}

/// Planner that blocks until released, to hold a session mid-episode.
struct Gate {
    inner: RulePlanner,
    open: Mutex<bool>,
    cv: std::sync::Condvar,
}

impl Gate {
    fn release(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl ModelBackend for Gate {
    fn name(&self) -> &str {
        "gate"
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
        drop(open);
        self.inner.complete(request)
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn busy_session_rejects_without_state_change() {
    let reg = registry();
    let gate = Arc::new(Gate {
        inner: RulePlanner::new(reg.clone()),
        open: Mutex::new(false),
        cv: std::sync::Condvar::new(),
    });
    let mut cfg = ServiceConfig::mock(reg.clone());
    cfg.backends.planner = gate.clone();
    let s = Server::start(cfg).await;
    let id = s.create(json!({"scenario": 5})).await;
    let other = s.create(json!({"scenario": 5, "seed": 1})).await;
    assert_eq!(s.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": FRUIT})).await.0, 202);
    let (_, before) = s.get(&format!("/v1/sessions/{id}")).await;
    assert_eq!(before["state"], "planning");
    let (status, e) = s.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": FRUIT})).await;
    assert_eq!((status, e["error"]["code"].as_str()), (409, Some("busy")));
    assert_eq!(s.delete(&format!("/v1/sessions/{id}")).await.0, 409);
    assert_eq!(s.get(&format!("/v1/sessions/{id}")).await.1, before);
    // Another session is untouched.
    let (_, o) = s.get(&format!("/v1/sessions/{other}")).await;
    assert_eq!((o["state"].as_str(), o["last_seq"].as_u64()), (Some("awaiting_instruction"), Some(1)));
    gate.release();
    s.settle(&id).await;
    assert_eq!(s.get(&format!("/v1/sessions/{other}")).await.1["last_seq"], 1);
    assert_ne!(s.history(&id, 1).await[0], s.history(&other, 1).await[0]);
}

#[tokio::test(flavor = "multi_thread")]
async fn capacity_counts_open_sessions() {
    let s = Server::start(ServiceConfig {
        capacity: 1,
        ..ServiceConfig::mock(registry())
    })
    .await;
    let id = s.create(json!({"scenario": 1})).await;
    let (status, e) = s.post("/v1/sessions", json!({"scenario": 2})).await;
    assert_eq!((status, e["error"]["code"].as_str()), (503, Some("capacity")));
    s.delete(&format!("/v1/sessions/{id}")).await;
    let again = s.create(json!({"scenario": 2})).await;
    assert_ne!(again, id);
    assert_eq!(s.get("/v1/sessions").await.1["sessions"].as_array().unwrap().len(), 2);
}

fn speech_clip() -> String {
    let sr = 16_000.0;
    let mut x = vec![0.0f32; 16_000];
    x.extend((0..24_000).map(|i| 0.5 * (2.0 * PI * 440.0 * i as f32 / sr).sin()));
    x.extend(vec![0.0; 8_000]);
    STANDARD.encode(encode_pcm16le(&x))
}

#[tokio::test(flavor = "multi_thread")]
async fn audio_requires_a_bound_recognizer() {
    let s = Server::mock().await;
    let id = s.create(json!({"scenario": 5})).await;
    let audio = json!({"audio": {"sample_rate": 16000, "pcm16le_base64": speech_clip()}});
    let (status, e) = s.post(&format!("/v1/sessions/{id}/instructions"), audio).await;
    assert_eq!(status, 400);
    assert_eq!(e["error"]["message"], "no ASR client bound");
    assert_eq!(s.history(&id, 1).await.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn audio_instruction_is_transcribed_then_run() {
    let s = Server::start(ServiceConfig {
        asr: Some(Arc::new(ScriptedAsr::new([FRUIT]))),
        ..ServiceConfig::mock(registry())
    })
    .await;
    let id = s.create(json!({"scenario": 5})).await;
    let silent = STANDARD.encode(encode_pcm16le(&[0.0; 48_000]));
    let (status, e) = s
        .post(&format!("/v1/sessions/{id}/instructions"), json!({"audio": {"sample_rate": 16000, "pcm16le_base64": silent}}))
        .await;
    assert_eq!((status, e["error"]["code"].as_str()), (422, Some("no_speech")));
    let (status, r) = s
        .post(&format!("/v1/sessions/{id}/instructions"), json!({"audio": {"sample_rate": 16000, "pcm16le_base64": speech_clip()}}))
        .await;
    assert_eq!(status, 202);
    assert_eq!(r["text"], FRUIT);
    s.settle(&id).await;
    let h = s.history(&id, 1).await;
    assert_eq!(
        h[1].body,
        EventBody::Instruction {
            text: FRUIT.into(),
            source: "audio".into()
        }
    );
}
