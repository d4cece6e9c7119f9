//! The service check, driven over a real socket.

use std::sync::Arc;

use eventsource_stream::Eventsource;
use futures::{Stream, StreamExt};
use serde_json::{json, Value};
use tabletop_core::agent::Outcome;
use tabletop_core::config::AppConfig;
use tabletop_core::events::{read_jsonl, EventBody, SessionEvent};
use tabletop_service::{serve, Service, ServiceConfig};

use crate::{check, Check, STREAM_TIMEOUT};

const FRUIT: &str = "Place all the fruits into the red plate";

type Res<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    async fn post(&self, path: &str, body: Value) -> Res<(u16, Value)> {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.map_err(err)?;
        Ok((r.status().as_u16(), r.json().await.map_err(err)?))
    }

    async fn get(&self, path: &str) -> Res<Value> {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.map_err(err)?;
        r.json().await.map_err(err)
    }

    /// SSE events, with the wire id and event name checked against the payload.
    async fn subscribe(&self, id: &str, last: Option<u64>) -> Res<impl Stream<Item = Res<SessionEvent>>> {
        let mut req = self.http.get(format!("{}/v1/sessions/{id}/events", self.base));
        if let Some(l) = last {
            req = req.header("Last-Event-ID", l.to_string());
        }
        let r = req.send().await.map_err(err)?;
        Ok(r.bytes_stream().eventsource().map(|raw| {
            let raw = raw.map_err(err)?;
            let e: SessionEvent = serde_json::from_str(&raw.data).map_err(err)?;
            if raw.id != e.seq.to_string() || raw.event != e.body.kind() {
                return Err(format!("SSE framing disagrees with payload at seq {}", e.seq));
            }
            Ok(e)
        }))
    }
}

async fn take<S: Stream<Item = Res<SessionEvent>> + Unpin>(s: &mut S, n: usize) -> Res<Vec<SessionEvent>> {
    let mut out = vec![];
    while out.len() < n {
        match tokio::time::timeout(STREAM_TIMEOUT, s.next()).await {
            Err(_) => return Err("stream stalled".into()),
            Ok(None) => break,
            Ok(Some(e)) => out.push(e?),
        }
    }
    Ok(out)
}

/// Reads until the episode's closing speech.
async fn through_episode<S: Stream<Item = Res<SessionEvent>> + Unpin>(s: &mut S) -> Res<Vec<SessionEvent>> {
    let mut out = vec![];
    let mut succeeded = false;
    loop {
        let e = take(s, 1).await?.pop().ok_or("stream ended mid-episode")?;
        let end = match &e.body {
            EventBody::Verdict { outcome, .. } => {
                succeeded = *outcome == Outcome::Success;
                false
            }
            EventBody::SpeechOut { text, .. } => succeeded || text.starts_with("I could not complete"),
            _ => false,
        };
        out.push(e);
        if end {
            return Ok(out);
        }
    }
}

fn gap_free(events: &[SessionEvent]) -> bool {
    events.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1)
}

async fn scenario(reg: &Arc<AppConfig>) -> Res<String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(err)?;
    let c = Client {
        base: format!("http://{}", listener.local_addr().map_err(err)?),
        http: reqwest::Client::new(),
    };
    let cfg = ServiceConfig {
        log_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::mock(reg.clone())
    };
    tokio::spawn(serve(listener, Arc::new(Service::new(cfg))));

    let (status, d) = c.post("/v1/sessions", json!({"scenario": 5, "seed": 7})).await?;
    if status != 201 {
        return Err(format!("create returned {status}: {d}"));
    }
    let id = d["id"].as_str().ok_or("no session id")?.to_string();

    let mut live = Box::pin(c.subscribe(&id, None).await?);
    let mut early = Box::pin(c.subscribe(&id, None).await?);
    let snapshot = take(&mut live, 1).await?;
    let (status, d) = c.post(&format!("/v1/sessions/{id}/instructions"), json!({"text": FRUIT})).await?;
    if status != 202 {
        return Err(format!("instruction returned {status}: {d}"));
    }
    let mut a = snapshot;
    a.extend(through_episode(&mut live).await?);

    // A subscriber that drops mid-episode and resumes from its last id.
    let head = take(&mut early, 6).await?;
    drop(early);
    let last = head.last().map_or(0, |e| e.seq);
    let mut resumed = Box::pin(c.subscribe(&id, Some(last)).await?);
    let mut b = head;
    b.extend(take(&mut resumed, a.len() - b.len()).await?);
    drop(resumed);

    let success = a.iter().any(|e| matches!(&e.body, EventBody::Verdict { outcome: Outcome::Success, .. }));

    let status = c.http.delete(format!("{}/v1/sessions/{id}", c.base)).send().await.map_err(err)?.status();
    if !status.is_success() {
        return Err(format!("close returned {status}"));
    }
    let mut replay = Box::pin(c.subscribe(&id, None).await?);
    let replayed = take(&mut replay, usize::MAX).await?;
    let live_rest = take(&mut live, usize::MAX).await?;
    let mut full_live = a.clone();
    full_live.extend(live_rest);

    let history: Vec<SessionEvent> =
        serde_json::from_value(c.get(&format!("/v1/sessions/{id}/events?follow=false")).await?["events"].clone()).map_err(err)?;
    let file = read_jsonl(&dir.path().join(format!("{id}.jsonl"))).map_err(err)?;

    let checks = [
        ("episode succeeded", success),
        ("live gap-free", gap_free(&full_live)),
        ("resumed equals live", b == a),
        ("replay equals live", replayed == full_live),
        ("history equals live", history == full_live),
        ("jsonl equals live", file == full_live),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    if failed.is_empty() {
        Ok(format!("{} events live, resumed after seq {last}, replay, history and JSONL identical", full_live.len()))
    } else {
        Err(format!("failed: {}", failed.join(", ")))
    }
}

pub fn service_stream(reg: &Arc<AppConfig>) -> Check {
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return check("service-stream", false, e.to_string()),
    };
    match rt.block_on(scenario(reg)) {
        Ok(detail) => check("service-stream", true, detail),
        Err(detail) => check("service-stream", false, detail),
    }
}
