//! Speech recognition and synthesis clients.
//!
//! Wire schema (JSON over HTTP POST):
//!
//! * ASR request `{"v":1,"sample_rate":16000,"pcm16le_base64":"..."}`,
//!   reply `{"v":1,"text":"..."}`.
//! * TTS request `{"v":1,"text":"..."}`, reply `{"v":1,"audio_url":"..."}`.
//!
//! A 503 reply surfaces its `Retry-After` seconds.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::audio::encode_pcm16le;

pub const SPEECH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeechError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("recognizer returned an empty transcript")]
    EmptyTranscript,
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {message}")]
    Transport {
        message: String,
        status: Option<u16>,
        /// Seconds the service asked us to wait.
        retry_after: Option<u64>,
    },
    #[error("malformed reply: {0}")]
    Protocol(String),
}

/// Playable audio, or nothing in text mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "uri")]
pub enum AudioHandle {
    NoOp,
    Uri(String),
}

pub trait AsrClient: Send + Sync {
    fn transcribe(&self, audio: &[f32], sample_rate: u32) -> Result<String, SpeechError>;
}

pub trait TtsClient: Send + Sync {
    fn synthesize(&self, text: &str) -> Result<AudioHandle, SpeechError>;
}

fn check_audio(audio: &[f32]) -> Result<(), SpeechError> {
    if audio.is_empty() {
        return Err(SpeechError::Precondition("audio segment is empty".into()));
    }
    Ok(())
}

fn check_text(text: &str) -> Result<(), SpeechError> {
    if text.trim().is_empty() {
        return Err(SpeechError::Precondition("text is empty".into()));
    }
    Ok(())
}

fn transcript(text: String) -> Result<String, SpeechError> {
    if text.trim().is_empty() {
        Err(SpeechError::EmptyTranscript)
    } else {
        Ok(text.trim().to_string())
    }
}

/// Text-mode recognizer returning scripted transcripts in order.
pub struct ScriptedAsr {
    transcripts: Mutex<VecDeque<String>>,
}

impl ScriptedAsr {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(transcripts: I) -> Self {
        ScriptedAsr {
            transcripts: Mutex::new(transcripts.into_iter().map(Into::into).collect()),
        }
    }
}

impl AsrClient for ScriptedAsr {
    fn transcribe(&self, audio: &[f32], _sample_rate: u32) -> Result<String, SpeechError> {
        check_audio(audio)?;
        let next = self.transcripts.lock().expect("script lock").pop_front().unwrap_or_default();
        transcript(next)
    }
}

/// Text-mode synthesizer: speaks nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextTts;

impl TtsClient for TextTts {
    fn synthesize(&self, text: &str) -> Result<AudioHandle, SpeechError> {
        check_text(text)?;
        Ok(AudioHandle::NoOp)
    }
}

struct HttpJson {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpJson {
    fn new(endpoint: &str, timeout: Duration) -> Result<Self, SpeechError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SpeechError::Protocol(e.to_string()))?;
        Ok(HttpJson {
            endpoint: endpoint.to_string(),
            client,
        })
    }

    fn post(&self, body: &serde_json::Value) -> Result<serde_json::Value, SpeechError> {
        let transport = |e: reqwest::Error| {
            if e.is_timeout() {
                SpeechError::Timeout
            } else {
                SpeechError::Transport {
                    message: e.to_string(),
                    status: None,
                    retry_after: None,
                }
            }
        };
        let resp = self.client.post(&self.endpoint).json(body).send().map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse().ok());
            let text = resp.text().unwrap_or_default();
            return Err(SpeechError::Transport {
                message: format!("status {}: {}", status.as_u16(), text.chars().take(200).collect::<String>()),
                status: Some(status.as_u16()),
                retry_after,
            });
        }
        resp.json().map_err(|e| SpeechError::Protocol(e.to_string()))
    }
}

pub struct HttpAsr(HttpJson);

impl HttpAsr {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, SpeechError> {
        HttpJson::new(endpoint, timeout).map(HttpAsr)
    }
}

impl AsrClient for HttpAsr {
    fn transcribe(&self, audio: &[f32], sample_rate: u32) -> Result<String, SpeechError> {
        check_audio(audio)?;
        let body = json!({
            "v": SPEECH_SCHEMA_VERSION,
            "sample_rate": sample_rate,
            "pcm16le_base64": STANDARD.encode(encode_pcm16le(audio)),
        });
        let reply = self.0.post(&body)?;
        let text = reply
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| SpeechError::Protocol("missing `text`".into()))?;
        transcript(text.to_string())
    }
}

pub struct HttpTts(HttpJson);

impl HttpTts {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, SpeechError> {
        HttpJson::new(endpoint, timeout).map(HttpTts)
    }
}

impl TtsClient for HttpTts {
    fn synthesize(&self, text: &str) -> Result<AudioHandle, SpeechError> {
        check_text(text)?;
        let reply = self.0.post(&json!({"v": SPEECH_SCHEMA_VERSION, "text": text}))?;
        reply
            .get("audio_url")
            .and_then(|u| u.as_str())
            .map(|u| AudioHandle::Uri(u.to_string()))
            .ok_or_else(|| SpeechError::Protocol("missing `audio_url`".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_asr_returns_transcripts() {
        let asr = ScriptedAsr::new(["put the apple on the plate", ""]);
        assert_eq!(asr.transcribe(&[0.1], 16_000).unwrap(), "put the apple on the plate");
        assert_eq!(asr.transcribe(&[0.1], 16_000), Err(SpeechError::EmptyTranscript));
        assert!(matches!(asr.transcribe(&[], 16_000), Err(SpeechError::Precondition(_))));
    }

    #[test]
    fn text_tts_is_a_no_op() {
        assert_eq!(TextTts.synthesize("task complete").unwrap(), AudioHandle::NoOp);
        assert!(matches!(TextTts.synthesize(" "), Err(SpeechError::Precondition(_))));
    }
}
