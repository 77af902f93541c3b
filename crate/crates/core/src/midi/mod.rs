//! Standard MIDI File reading and writing.
//!
//! Notes come out in absolute seconds, resolved through the file's full tempo
//! map. Only metrical (ticks-per-quarter-note) timing is supported.

mod parse;
mod tempo;
mod write;

pub use parse::{parse_smf, parse_smf_with, ParseOptions};
pub use tempo::TempoMap;
pub use write::{write_smf, write_smf_with, WriteOptions};

use thiserror::Error;

pub const PIANO_LOWEST: u8 = 21;
pub const PIANO_HIGHEST: u8 = 108;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidiError {
    #[error("malformed MIDI data at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unexpected end of data at byte {offset}")]
    UnexpectedEof { offset: usize },
    #[error("unsupported MIDI file: {0}")]
    Unsupported(String),
    #[error("note {index} cannot be written: {reason}")]
    Unrepresentable { index: usize, reason: String },
}

/// One performed note.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub pitch: u8,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(onset_s: f64, offset_s: f64, pitch: u8, velocity: u8) -> Self {
        Self {
            onset_s,
            offset_s,
            pitch,
            velocity,
        }
    }

    pub fn duration(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// Header facts of the file a performance was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SourceInfo {
    pub format: u16,
    pub division: u16,
    pub tracks: u16,
}

/// A parsed performance: notes sorted by `(onset_s, pitch)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MidiPerformance {
    pub notes: Vec<NoteEvent>,
    pub duration_s: f64,
    pub source: SourceInfo,
}

impl MidiPerformance {
    /// Builds a performance from arbitrary notes, sorting them and deriving
    /// the duration from the latest offset.
    pub fn from_notes(mut notes: Vec<NoteEvent>) -> Self {
        sort_notes(&mut notes);
        let duration_s = notes.iter().map(|n| n.offset_s).fold(0.0, f64::max);
        Self {
            notes,
            duration_s,
            source: SourceInfo::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Checks the container invariants: sorted notes, positive durations and
    /// a duration covering every offset.
    pub fn validate(&self) -> Result<(), String> {
        for (i, n) in self.notes.iter().enumerate() {
            if !(n.onset_s.is_finite() && n.offset_s.is_finite()) || n.onset_s < 0.0 {
                return Err(format!("note {i} has invalid times"));
            }
            if n.offset_s <= n.onset_s {
                return Err(format!("note {i} has non-positive duration"));
            }
            if n.velocity > 127 || n.pitch > 127 {
                return Err(format!("note {i} has out-of-range pitch or velocity"));
            }
        }
        let sorted = self
            .notes
            .windows(2)
            .all(|w| note_order(&w[0], &w[1]) != std::cmp::Ordering::Greater);
        if !sorted {
            return Err("notes are not sorted by (onset, pitch)".into());
        }
        let max_off = self.notes.iter().map(|n| n.offset_s).fold(0.0, f64::max);
        if self.duration_s < max_off {
            return Err("duration shorter than the last offset".into());
        }
        Ok(())
    }
}

fn note_order(a: &NoteEvent, b: &NoteEvent) -> std::cmp::Ordering {
    a.onset_s
        .total_cmp(&b.onset_s)
        .then(a.pitch.cmp(&b.pitch))
}

pub(crate) fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by(note_order);
}

/// Reads a variable-length quantity starting at `pos`.
pub(crate) fn read_vlq(data: &[u8], pos: &mut usize) -> Result<u32, MidiError> {
    let start = *pos;
    let mut value: u32 = 0;
    for i in 0..4 {
        let byte = *data
            .get(*pos)
            .ok_or(MidiError::UnexpectedEof { offset: *pos })?;
        *pos += 1;
        value = (value << 7) | u32::from(byte & 0x7f);
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        if i == 3 {
            break;
        }
    }
    Err(MidiError::Malformed {
        offset: start,
        reason: "variable-length quantity longer than 4 bytes".into(),
    })
}

pub(crate) fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    debug_assert!(value <= 0x0fff_ffff);
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let cont = if i > 0 { 0x80 } else { 0 };
        out.push(buf[i] | cont);
    }
}
