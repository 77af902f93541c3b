//! Score features on a fixed frame grid.
//!
//! A segment is `frames` rows (time) by `keys` columns (pitch). Three binary
//! matrices are produced per segment: key attacks (`onset`), active frames
//! (`frame`) and sustain-only frames (`frame_ex = frame - onset`), plus the
//! normalized velocity target used for training.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::midi::MidiPerformance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentSpec {
    pub frames_per_second: f64,
    pub frames: usize,
    pub keys: usize,
    pub lowest_pitch: u8,
    pub start_s: f64,
}

impl Default for SegmentSpec {
    /// 1001 frames at 100 fps over the 88 piano keys.
    fn default() -> Self {
        Self {
            frames_per_second: 100.0,
            frames: 1001,
            keys: 88,
            lowest_pitch: 21,
            start_s: 0.0,
        }
    }
}

impl SegmentSpec {
    pub fn with_frames(frames: usize) -> Self {
        Self {
            frames,
            ..Self::default()
        }
    }

    pub fn at(self, start_s: f64) -> Self {
        Self { start_s, ..self }
    }

    pub fn length_s(&self) -> f64 {
        self.frames as f64 / self.frames_per_second
    }

    pub fn is_valid(&self) -> bool {
        self.frames >= 1
            && self.keys >= 1
            && self.frames_per_second > 0.0
            && self.frames_per_second.is_finite()
            && self.start_s.is_finite()
            && usize::from(self.lowest_pitch) + self.keys <= 128
    }

    /// Row index of time `t` on this segment's grid (may fall outside).
    pub fn row_of(&self, t: f64) -> i64 {
        ((t - self.start_s) * self.frames_per_second).round() as i64
    }

    pub fn key_of(&self, pitch: u8) -> Option<usize> {
        let k = usize::from(pitch).checked_sub(usize::from(self.lowest_pitch))?;
        (k < self.keys).then_some(k)
    }
}

/// Mapping between MIDI velocities and the `[0, 1]` training scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityScale {
    /// `v / 127`: 127 maps exactly to 1.0.
    #[default]
    Div127,
    /// `v / 128`.
    Div128,
}

impl VelocityScale {
    pub fn divisor(self) -> f64 {
        match self {
            Self::Div127 => 127.0,
            Self::Div128 => 128.0,
        }
    }

    pub fn normalize(self, velocity: u8) -> f64 {
        f64::from(velocity) / self.divisor()
    }

    /// Scales back, rounding half up and clamping to `0..=127`.
    pub fn denormalize(self, value: f64) -> u8 {
        if !value.is_finite() {
            return if value > 0.0 { 127 } else { 0 };
        }
        (value * self.divisor() + 0.5).floor().clamp(0.0, 127.0) as u8
    }
}

/// An onset cell and the note (index into the performance) that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OnsetCell {
    pub row: usize,
    pub key: usize,
    pub note: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFeatures {
    pub onset: Array2<u8>,
    pub frame: Array2<u8>,
    pub frame_ex: Array2<u8>,
    pub target_vel: Array2<f64>,
    /// Notes whose onset lies in this segment. Two notes may share one
    /// cell when same-pitch onsets round to the same row.
    pub onset_notes: Vec<OnsetCell>,
}

impl ScoreFeatures {
    pub fn zeros(spec: &SegmentSpec) -> Self {
        let shape = (spec.frames, spec.keys);
        Self {
            onset: Array2::zeros(shape),
            frame: Array2::zeros(shape),
            frame_ex: Array2::zeros(shape),
            target_vel: Array2::zeros(shape),
            onset_notes: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.onset.nrows()
    }

    pub fn keys(&self) -> usize {
        self.onset.ncols()
    }

    /// Checks binarity, `frame_ex = frame - onset`, onset implies frame, and
    /// that velocity targets sit only on active frames.
    pub fn check_invariants(&self) -> Result<(), String> {
        for ((idx, &o), (&f, (&fx, &v))) in self
            .onset
            .indexed_iter()
            .zip(self.frame.iter().zip(self.frame_ex.iter().zip(self.target_vel.iter())))
        {
            if o > 1 || f > 1 || fx > 1 {
                return Err(format!("non-binary value at {idx:?}"));
            }
            if o == 1 && f != 1 {
                return Err(format!("onset without frame at {idx:?}"));
            }
            if i16::from(fx) != i16::from(f) - i16::from(o) {
                return Err(format!("frame_ex != frame - onset at {idx:?}"));
            }
            if f == 0 && v != 0.0 {
                return Err(format!("velocity target outside active frames at {idx:?}"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("velocity target {v} out of range at {idx:?}"));
            }
        }
        Ok(())
    }
}

/// Rasterizes the notes of `perf` that touch the segment window.
pub fn rasterize(perf: &MidiPerformance, spec: &SegmentSpec, scale: VelocityScale) -> ScoreFeatures {
    rasterize_owned(perf, spec, scale, spec.frames)
}

/// As [`rasterize`], but onsets at rows `>= owned_rows` are treated as
/// belonging to the next segment: their frames are drawn, their onset is not.
pub fn rasterize_owned(
    perf: &MidiPerformance,
    spec: &SegmentSpec,
    scale: VelocityScale,
    owned_rows: usize,
) -> ScoreFeatures {
    let mut sf = ScoreFeatures::zeros(spec);
    let last = spec.frames as i64 - 1;
    for (idx, note) in perf.notes.iter().enumerate() {
        let Some(key) = spec.key_of(note.pitch) else {
            continue;
        };
        let on = spec.row_of(note.onset_s);
        let off = spec.row_of(note.offset_s).max(on);
        if off < 0 || on > last {
            continue;
        }
        let value = scale.normalize(note.velocity);
        let owns_onset = on >= 0 && (on as usize) < owned_rows;
        for r in on.max(0)..=off.min(last) {
            let r = r as usize;
            sf.frame[[r, key]] = 1;
            sf.target_vel[[r, key]] = value;
        }
        if owns_onset {
            let row = on as usize;
            sf.onset[[row, key]] = 1;
            sf.onset_notes.push(OnsetCell {
                row,
                key,
                note: idx,
            });
        }
    }
    // A later note's onset row wins over an earlier note's tail.
    for cell in &sf.onset_notes {
        let v = scale.normalize(perf.notes[cell.note].velocity);
        sf.target_vel[[cell.row, cell.key]] = v;
    }
    sf.frame_ex = &sf.frame - &sf.onset;
    sf
}

/// The set of cells the loss and evaluation read: the onset matrix.
pub fn onset_mask(sf: &ScoreFeatures) -> &Array2<u8> {
    &sf.onset
}

/// Tiles the performance into windows of `spec.frames` frames starting at
/// multiples of `hop_s`. Each onset is owned by exactly one window: the first
/// `round(hop_s * fps)` rows of every window but the last.
pub fn segment_performance(
    perf: &MidiPerformance,
    spec: &SegmentSpec,
    hop_s: f64,
    scale: VelocityScale,
) -> Vec<(SegmentSpec, ScoreFeatures)> {
    assert!(hop_s > 0.0, "hop must be positive");
    let count = segment_count(perf.duration_s, hop_s);
    let hop_rows = ((hop_s * spec.frames_per_second).round() as usize).max(1);
    (0..count)
        .map(|k| {
            let seg = spec.at(spec.start_s + k as f64 * hop_s);
            let owned = if k + 1 == count {
                seg.frames
            } else {
                hop_rows.min(seg.frames)
            };
            let sf = rasterize_owned(perf, &seg, scale, owned);
            (seg, sf)
        })
        .collect()
}

pub fn segment_count(duration_s: f64, hop_s: f64) -> usize {
    let n = (duration_s / hop_s - 1e-9).ceil();
    if n.is_finite() && n >= 1.0 {
        n as usize
    } else {
        1
    }
}
