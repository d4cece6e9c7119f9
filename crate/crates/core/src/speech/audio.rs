//! 16-bit little-endian mono PCM input.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported audio format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn i16_to_f32(s: i16) -> f32 {
    s as f32 / 32768.0
}

pub fn f32_to_i16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Decodes raw 16-bit little-endian samples. A trailing odd byte is an error.
pub fn decode_pcm16le(bytes: &[u8]) -> Result<Vec<f32>, AudioError> {
    if bytes.len() % 2 != 0 {
        return Err(AudioError::Format(format!("{} bytes is not a whole number of samples", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| i16_to_f32(i16::from_le_bytes([b[0], b[1]])))
        .collect())
}

pub fn encode_pcm16le(samples: &[f32]) -> Vec<u8> {
    samples.iter().flat_map(|&s| f32_to_i16(s).to_le_bytes()).collect()
}

/// Reads a mono 16-bit WAV stream. Returns the sample rate and samples.
pub fn read_wav<R: Read>(reader: R) -> Result<(u32, Vec<f32>), AudioError> {
    let mut wav = hound::WavReader::new(reader)?;
    let spec = wav.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::Format(format!(
            "need mono 16-bit PCM, got {} channel(s) at {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let samples = wav
        .samples::<i16>()
        .map(|s| s.map(i16_to_f32))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((spec.sample_rate, samples))
}

pub fn read_wav_file(path: &Path) -> Result<(u32, Vec<f32>), AudioError> {
    read_wav(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Mono 16-bit WAV bytes.
pub fn write_wav(sample_rate: u32, samples: &[f32]) -> Result<Vec<u8>, AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec)?;
        for &s in samples {
            w.write_sample(f32_to_i16(s))?;
        }
        w.finalize()?;
    }
    Ok(buf.into_inner())
}
