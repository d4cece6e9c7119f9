//! Speech capture and the recognizer / synthesizer clients.

pub mod audio;
pub mod clients;
pub mod vad;

pub use audio::{decode_pcm16le, encode_pcm16le, read_wav, read_wav_file, write_wav, AudioError};
pub use clients::{AsrClient, AudioHandle, HttpAsr, HttpTts, ScriptedAsr, SpeechError, TextTts, TtsClient};
pub use vad::{frame_rms, median, segments_offline, CaptureSegment, ThresholdMode, Vad, VadConfig, VadError};
