//! Silent PCM WAV synthesis for the text-only probe.

use thiserror::Error;

pub const HEADER_LEN: usize = 44;
pub const DEFAULT_SILENT_SECONDS: f64 = 30.0;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

const MIN_RATE: u32 = 8_000;
const MAX_RATE: u32 = 192_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WavError {
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("sample rate {0} Hz outside {MIN_RATE}..={MAX_RATE}")]
    SampleRate(u32),
    #[error("clip too long for a 32-bit RIFF size field")]
    TooLong,
}

/// Mono 16-bit little-endian PCM WAV of all-zero samples. The sample count
/// is `duration_s * sample_rate` rounded to the nearest integer.
pub fn make_silent_wav(duration_s: f64, sample_rate: u32) -> Result<Vec<u8>, WavError> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(WavError::Duration(duration_s));
    }
    if !(MIN_RATE..=MAX_RATE).contains(&sample_rate) {
        return Err(WavError::SampleRate(sample_rate));
    }
    let samples = (duration_s * f64::from(sample_rate)).round();
    let data_len = samples * 2.0;
    if data_len + 36.0 > f64::from(u32::MAX) {
        return Err(WavError::TooLong);
    }
    let data_len = data_len as u32;

    let channels: u16 = 1;
    let bits: u16 = 16;
    let block_align = channels * bits / 8;
    let byte_rate = sample_rate * u32::from(block_align);

    let mut out = Vec::with_capacity(HEADER_LEN + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.resize(HEADER_LEN + data_len as usize, 0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_seconds_at_16k() {
        let wav = make_silent_wav(30.0, 16_000).unwrap();
        assert_eq!(wav.len(), 960_044);
        assert!(wav[HEADER_LEN..].iter().all(|b| *b == 0));
    }

    #[test]
    fn one_second_at_8k_data_size() {
        let wav = make_silent_wav(1.0, 8_000).unwrap();
        let data_size = u32::from_le_bytes(wav[40..44].try_into().unwrap());
        assert_eq!(data_size, 16_000);
        let riff_size = u32::from_le_bytes(wav[4..8].try_into().unwrap());
        assert_eq!(riff_size as usize, wav.len() - 8);
    }

    #[test]
    fn bad_arguments() {
        assert_eq!(make_silent_wav(0.0, 16_000), Err(WavError::Duration(0.0)));
        assert_eq!(make_silent_wav(-1.0, 16_000), Err(WavError::Duration(-1.0)));
        assert!(make_silent_wav(f64::NAN, 16_000).is_err());
        assert_eq!(make_silent_wav(1.0, 7_999), Err(WavError::SampleRate(7_999)));
        assert_eq!(make_silent_wav(1.0, 192_001), Err(WavError::SampleRate(192_001)));
    }

    #[test]
    fn readable_by_hound() {
        let wav = make_silent_wav(2.0, 22_050).unwrap();
        let reader = hound::WavReader::new(std::io::Cursor::new(wav)).unwrap();
        let spec = reader.spec();
        assert_eq!(spec.channels, 1);
        assert_eq!(spec.sample_rate, 22_050);
        assert_eq!(spec.bits_per_sample, 16);
        assert_eq!(spec.sample_format, hound::SampleFormat::Int);
        assert_eq!(reader.duration(), 44_100);
        assert!(reader.into_samples::<i16>().all(|s| s.unwrap() == 0));
    }
}
