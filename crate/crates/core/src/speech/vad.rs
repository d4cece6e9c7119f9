//! Energy-based utterance capture.
//!
//! Frames are RMS-measured. The first `monitor_frames` frames only set the
//! threshold; after that a frame above threshold starts a segment, and
//! `end_frames` consecutive frames at or below threshold close it. The
//! segment ends at its last loud frame (inclusive).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Absolute,
    /// `max(k * median(monitor RMS), floor)`.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VadConfig {
    pub sample_rate: u32,
    pub frame_ms: u32,
    pub monitor_secs: f64,
    pub end_silence_secs: f64,
    pub mode: ThresholdMode,
    pub absolute_threshold: f64,
    pub k: f64,
    pub floor: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            sample_rate: 16_000,
            frame_ms: 30,
            monitor_secs: 1.0,
            end_silence_secs: 2.0,
            mode: ThresholdMode::Absolute,
            absolute_threshold: 0.1,
            k: 3.0,
            floor: 0.01,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VadError {
    #[error("invalid vad config: {0}")]
    Config(String),
    #[error("frame has {got} samples, expected {expected}")]
    FrameSize { expected: usize, got: usize },
}

fn ceil_frames(secs: f64, frame_ms: u32) -> usize {
    let ms = (secs * 1000.0).round() as u64;
    ms.div_ceil(frame_ms as u64) as usize
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), VadError> {
        let bad = |m: &str| Err(VadError::Config(m.into()));
        if self.sample_rate == 0 || self.frame_ms == 0 {
            return bad("sample_rate and frame_ms must be positive");
        }
        if (self.sample_rate as u64 * self.frame_ms as u64) % 1000 != 0 {
            return bad("frame_ms must cover a whole number of samples");
        }
        if !(self.monitor_secs > 0.0) || !(self.end_silence_secs > 0.0) {
            return bad("window durations must be positive");
        }
        if !(self.absolute_threshold > 0.0) || !(self.k > 0.0) || !(self.floor >= 0.0) {
            return bad("thresholds must be positive");
        }
        Ok(())
    }

    /// Samples per frame.
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as u64 * self.frame_ms as u64 / 1000) as usize
    }

    /// Frames in the monitoring window (rounded up).
    pub fn monitor_frames(&self) -> usize {
        ceil_frames(self.monitor_secs, self.frame_ms)
    }

    /// Frames of silence that confirm the end of an utterance (rounded up).
    pub fn end_frames(&self) -> usize {
        ceil_frames(self.end_silence_secs, self.frame_ms)
    }

    /// Trigger threshold for the RMS values of the monitoring window.
    pub fn threshold(&self, monitor_rms: &[f64]) -> f64 {
        match self.mode {
            ThresholdMode::Absolute => self.absolute_threshold,
            ThresholdMode::Adaptive => (self.k * median(monitor_rms)).max(self.floor),
        }
    }
}

/// Median; the mean of the middle pair for even counts, 0 when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn frame_rms(frame: &[f32]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    (frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / frame.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSegment {
    /// First loud frame.
    pub start: usize,
    /// Last loud frame, inclusive.
    pub end: usize,
    pub trigger_rms: f64,
    pub threshold: f64,
    /// RMS of frames `start..=end`.
    pub rms: Vec<f64>,
    /// Frame at which the closing silence run completed.
    pub confirmed_at: usize,
    /// Samples of frames `start..=end`.
    #[serde(skip)]
    pub audio: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Monitoring { rms: Vec<f64> },
    Armed,
    Recording {
        start: usize,
        last_loud: usize,
        trigger_rms: f64,
        silence: usize,
        rms: Vec<f64>,
        audio: Vec<f32>,
    },
}

/// Streaming detector. Feed frames in order with [`Vad::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vad {
    cfg: VadConfig,
    state: State,
    threshold: Option<f64>,
    frame: usize,
}

impl Vad {
    pub fn new(cfg: VadConfig) -> Result<Self, VadError> {
        cfg.validate()?;
        Ok(Vad {
            cfg,
            state: State::Monitoring { rms: vec![] },
            threshold: None,
            frame: 0,
        })
    }

    /// Threshold once the monitoring window has completed.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn is_recording(&self) -> bool {
        matches!(self.state, State::Recording { .. })
    }

    /// Frames consumed so far.
    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    pub fn step(&mut self, frame: &[f32]) -> Result<Option<CaptureSegment>, VadError> {
        let expected = self.cfg.frame_len();
        if frame.len() != expected {
            return Err(VadError::FrameSize {
                expected,
                got: frame.len(),
            });
        }
        let idx = self.frame;
        self.frame += 1;
        let level = frame_rms(frame);
        let end_frames = self.cfg.end_frames();
        match &mut self.state {
            State::Monitoring { rms } => {
                rms.push(level);
                if rms.len() == self.cfg.monitor_frames() {
                    self.threshold = Some(self.cfg.threshold(rms));
                    self.state = State::Armed;
                }
                Ok(None)
            }
            State::Armed => {
                if level > self.threshold.expect("armed after monitoring") {
                    self.state = State::Recording {
                        start: idx,
                        last_loud: idx,
                        trigger_rms: level,
                        silence: 0,
                        rms: vec![level],
                        audio: frame.to_vec(),
                    };
                }
                Ok(None)
            }
            State::Recording {
                start,
                last_loud,
                trigger_rms,
                silence,
                rms,
                audio,
            } => {
                let threshold = self.threshold.expect("armed after monitoring");
                rms.push(level);
                audio.extend_from_slice(frame);
                if level > threshold {
                    *last_loud = idx;
                    *silence = 0;
                    return Ok(None);
                }
                *silence += 1;
                if *silence < end_frames {
                    return Ok(None);
                }
                let len = *last_loud - *start + 1;
                rms.truncate(len);
                audio.truncate(len * expected);
                let seg = CaptureSegment {
                    start: *start,
                    end: *last_loud,
                    trigger_rms: *trigger_rms,
                    threshold,
                    rms: std::mem::take(rms),
                    confirmed_at: idx,
                    audio: std::mem::take(audio),
                };
                self.state = State::Armed;
                Ok(Some(seg))
            }
        }
    }

    /// Runs every whole frame of `samples` through a fresh detector.
    pub fn run(cfg: &VadConfig, samples: &[f32]) -> Result<Vec<CaptureSegment>, VadError> {
        let mut vad = Vad::new(cfg.clone())?;
        let mut out = vec![];
        for frame in samples.chunks_exact(cfg.frame_len()) {
            out.extend(vad.step(frame)?);
        }
        Ok(out)
    }
}

/// Batch segmentation over the full RMS trace, computed without the state
/// machine. Trailing partial frames are ignored.
pub fn segments_offline(cfg: &VadConfig, samples: &[f32]) -> Result<Vec<CaptureSegment>, VadError> {
    cfg.validate()?;
    let n = cfg.frame_len();
    let trace: Vec<f64> = samples.chunks_exact(n).map(frame_rms).collect();
    let m = cfg.monitor_frames();
    let e = cfg.end_frames();
    if trace.len() < m {
        return Ok(vec![]);
    }
    let thr = cfg.threshold(&trace[..m]);
    let loud: Vec<bool> = trace.iter().map(|&r| r > thr).collect();
    let mut out = vec![];
    let mut i = m;
    while let Some(start) = (i..trace.len()).find(|&j| loud[j]) {
        // First run of `e` quiet frames after the start.
        let Some(run) = (start + 1..=trace.len().saturating_sub(e)).find(|&j| loud[j..j + e].iter().all(|l| !l)) else {
            break;
        };
        let end = run - 1;
        out.push(CaptureSegment {
            start,
            end,
            trigger_rms: trace[start],
            threshold: thr,
            rms: trace[start..=end].to_vec(),
            confirmed_at: run + e - 1,
            audio: samples[start * n..(end + 1) * n].to_vec(),
        });
        i = run + e;
    }
    Ok(out)
}
