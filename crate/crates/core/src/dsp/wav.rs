use super::{AudioClip, DspError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

const PCM: u16 = 1;
const IEEE_FLOAT: u16 = 3;
const EXTENSIBLE: u16 = 0xfffe;

struct Fmt {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE file to mono samples in `[-1, 1]`, averaging
/// channels. Fails unless the file's rate equals `expected_rate`.
pub fn read_wav(bytes: &[u8], expected_rate: u32) -> Result<AudioClip, DspError> {
    let clip = read_wav_any_rate(bytes)?;
    if clip.sample_rate != expected_rate {
        return Err(DspError::SampleRate {
            expected: expected_rate,
            found: clip.sample_rate,
        });
    }
    Ok(clip)
}

pub fn read_wav_any_rate(bytes: &[u8]) -> Result<AudioClip, DspError> {
    if bytes.len() < 12 {
        return Err(DspError::Parse {
            offset: bytes.len(),
            reason: "file shorter than the RIFF header".into(),
        });
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::Parse {
            offset: 0,
            reason: "not a RIFF/WAVE file".into(),
        });
    }
    let mut pos = 12;
    let mut fmt: Option<Fmt> = None;
    let mut data: Option<&[u8]> = None;
    while pos < bytes.len() && data.is_none() {
        if bytes.len() - pos < 8 {
            return Err(DspError::Parse {
                offset: pos,
                reason: "truncated chunk header".into(),
            });
        }
        let id = &bytes[pos..pos + 4];
        let len = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if len > bytes.len() - body {
            return Err(DspError::Parse {
                offset: pos + 4,
                reason: format!("chunk length {len} exceeds remaining {} bytes", bytes.len() - body),
            });
        }
        let chunk = &bytes[body..body + len];
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(DspError::Parse {
                        offset: pos + 4,
                        reason: "fmt chunk shorter than 16 bytes".into(),
                    });
                }
                let mut tag = le_u16(chunk, 0);
                if tag == EXTENSIBLE {
                    if len < 26 {
                        return Err(DspError::Parse {
                            offset: body,
                            reason: "extensible fmt chunk without subformat".into(),
                        });
                    }
                    tag = le_u16(chunk, 24);
                }
                fmt = Some(Fmt {
                    tag,
                    channels: le_u16(chunk, 2),
                    rate: le_u32(chunk, 4),
                    bits: le_u16(chunk, 14),
                });
            }
            b"data" => data = Some(chunk),
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    let fmt = fmt.ok_or(DspError::Parse {
        offset: bytes.len(),
        reason: "missing fmt chunk".into(),
    })?;
    let data = data.ok_or(DspError::Parse {
        offset: bytes.len(),
        reason: "missing data chunk".into(),
    })?;
    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(DspError::Unsupported(format!("{} channels", fmt.channels)));
    }
    let decode: fn(&[u8]) -> f32 = match (fmt.tag, fmt.bits) {
        (PCM, 16) => |b| f32::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0,
        (IEEE_FLOAT, 32) => |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        (tag, bits) => {
            return Err(DspError::Unsupported(format!(
                "format tag {tag} with {bits} bits per sample"
            )))
        }
    };
    let width = usize::from(fmt.bits / 8);
    let channels = usize::from(fmt.channels);
    let frame = width * channels;
    let samples = data
        .chunks_exact(frame)
        .map(|f| {
            let sum: f32 = f.chunks_exact(width).map(decode).sum();
            sum / channels as f32
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: fmt.rate,
    })
}

pub fn write_wav(clip: &AudioClip, format: SampleFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (PCM, 16u16),
        SampleFormat::Float32 => (IEEE_FLOAT, 32u16),
    };
    let width = u32::from(bits / 8);
    let data_len = clip.samples.len() as u32 * width;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * width).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        match format {
            SampleFormat::Pcm16 => {
                let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}
