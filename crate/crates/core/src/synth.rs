//! Seeded synthetic corpus: random performances with a slow dynamics curve,
//! degraded "preliminary" velocity grids, and optional proxy audio.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::AudioClip;
use crate::formats::Split;
use crate::midi::{MidiPerformance, NoteEvent, WriteOptions};
use crate::models::{GridRole, VelocityGrid};
use crate::pianoroll::{segment_performance, ScoreFeatures, SegmentSpec, VelocityScale};

/// How preliminary grids are derived from the true velocities. Values are on
/// the normalized `[0, 1]` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Degradation {
    /// Standard deviation of per-note Gaussian noise.
    pub noise_sigma: f64,
    /// Multiplicative gain applied before the velocity-dependent bias.
    pub gain: f64,
    /// Velocity-dependent bias: `pivot + compress * (v - pivot)`. A
    /// `compress` below 1 squashes dynamics toward the pivot.
    pub pivot: f64,
    pub compress: f64,
    /// Temporal smearing weight `a`: each key column becomes
    /// `(1 - 2a) g[t] + a (g[t-1] + g[t+1])`.
    pub smear: f64,
    /// Which cells carry a note's degraded value.
    pub fill: GridFill,
}

/// Cells of the preliminary grid that carry velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFill {
    /// Only each note's onset cell, like an acoustic model whose velocity
    /// output is supervised at onsets only.
    #[default]
    Onset,
    /// Every frame row of the note, like the target roll.
    Frame,
}

impl Default for Degradation {
    fn default() -> Self {
        Self {
            noise_sigma: 10.0 / 127.0,
            gain: 1.0,
            pivot: 0.5,
            compress: 1.0,
            smear: 0.0,
            fill: GridFill::Onset,
        }
    }
}

impl Degradation {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    /// Degraded value of a normalized velocity before noise.
    pub fn bias(&self, v: f64) -> f64 {
        self.pivot + self.compress * (self.gain * v - self.pivot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_pieces: usize,
    pub val_pieces: usize,
    pub test_pieces: usize,
    /// Length of every piece; the default is one 1001-frame segment.
    pub piece_seconds: f64,
    pub notes_per_second: f64,
    pub pitch_min: u8,
    pub pitch_max: u8,
    /// Note durations are log-uniform in this range.
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub dynamics_period_s: f64,
    pub dynamics_center: f64,
    pub dynamics_depth: f64,
    /// Integer jitter, uniform in `-jitter..=jitter`.
    pub jitter: u8,
    pub velocity_min: u8,
    pub velocity_max: u8,
    pub degradation: Degradation,
    pub segment: SegmentSpec,
    pub scale: VelocityScale,
    pub audio: bool,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            train_pieces: 8,
            val_pieces: 2,
            test_pieces: 2,
            piece_seconds: 10.01,
            notes_per_second: 4.0,
            pitch_min: 36,
            pitch_max: 96,
            duration_min_s: 0.1,
            duration_max_s: 1.0,
            dynamics_period_s: 8.0,
            dynamics_center: 67.5,
            dynamics_depth: 30.0,
            jitter: 6,
            velocity_min: 20,
            velocity_max: 115,
            degradation: Degradation::default(),
            segment: SegmentSpec::default(),
            scale: VelocityScale::Div127,
            audio: false,
            sample_rate: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.piece_seconds > 0.0
            && self.notes_per_second > 0.0
            && self.pitch_min <= self.pitch_max
            && self.pitch_min >= 21
            && self.pitch_max <= 108
            && self.duration_min_s > 0.0
            && self.duration_min_s <= self.duration_max_s
            && self.dynamics_period_s > 0.0
            && self.velocity_min <= self.velocity_max
            && self.velocity_max <= 127
            && self.degradation.noise_sigma >= 0.0
            && (0.0..=0.5).contains(&self.degradation.smear)
            && self.segment.is_valid()
            && self.train_pieces + self.val_pieces + self.test_pieces > 0;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid synthetic corpus configuration: {self:?}"))
        }
    }

    pub fn splits(&self) -> impl Iterator<Item = Split> {
        std::iter::repeat_n(Split::Train, self.train_pieces)
            .chain(std::iter::repeat_n(Split::Val, self.val_pieces))
            .chain(std::iter::repeat_n(Split::Test, self.test_pieces))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPiece {
    pub id: String,
    pub split: Split,
    pub performance: MidiPerformance,
    pub segments: Vec<(SegmentSpec, ScoreFeatures)>,
    /// One degraded grid per segment.
    pub preliminary: Vec<VelocityGrid<f32>>,
    pub audio: Option<AudioClip>,
}

/// Generates the whole corpus. Piece `k` draws from its own ChaCha streams,
/// so pieces do not depend on each other and the performance does not depend
/// on the degradation settings.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthPiece>, String> {
    cfg.validate()?;
    Ok(cfg
        .splits()
        .enumerate()
        .map(|(k, split)| generate_piece(cfg, k, split))
        .collect())
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate_piece(cfg: &SynthConfig, k: usize, split: Split) -> SynthPiece {
    let mut note_rng = stream(cfg.seed, 2 * k as u64 + 1);
    let performance = random_performance(cfg, &mut note_rng);
    let hop = cfg.segment.length_s();
    let segments = segment_performance(&performance, &cfg.segment, hop, cfg.scale);
    let mut deg_rng = stream(cfg.seed, 2 * k as u64 + 2);
    let degraded: Vec<f64> = performance
        .notes
        .iter()
        .map(|n| degrade(&cfg.degradation, cfg.scale.normalize(n.velocity), &mut deg_rng))
        .collect();
    let preliminary = segments
        .iter()
        .map(|(spec, sf)| paint_grid(&performance, spec, sf, &degraded, &cfg.degradation))
        .collect();
    let audio = cfg.audio.then(|| proxy_audio(&performance, cfg.sample_rate, cfg.scale));
    SynthPiece {
        id: format!("synth-{k:04}"),
        split,
        performance,
        segments,
        preliminary,
        audio,
    }
}

fn random_performance<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> MidiPerformance {
    let gaps = Exp::new(cfg.notes_per_second).expect("positive rate");
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ln_lo, ln_hi) = (cfg.duration_min_s.ln(), cfg.duration_max_s.ln());
    let last_onset = cfg.piece_seconds - cfg.duration_min_s - 1.0 / cfg.segment.frames_per_second;
    let (tick, fps) = (WriteOptions::default().tick_seconds(), cfg.segment.frames_per_second);
    let mut busy_until = [f64::NEG_INFINITY; 128];
    let mut notes = Vec::new();
    let mut t = gaps.sample(rng);
    while t < last_onset {
        let pitch = rng.random_range(cfg.pitch_min..=cfg.pitch_max);
        let dur = if ln_hi > ln_lo { rng.random_range(ln_lo..ln_hi).exp() } else { cfg.duration_min_s };
        let curve = cfg.dynamics_center + cfg.dynamics_depth * (2.0 * PI * t / cfg.dynamics_period_s + phase).sin();
        let j = i32::from(cfg.jitter);
        let jitter = rng.random_range(-j..=j);
        let vel = (curve.round() as i32 + jitter)
            .clamp(i32::from(cfg.velocity_min), i32::from(cfg.velocity_max)) as u8;
        // Skip rather than overlap a sounding note of the same pitch.
        if t >= busy_until[usize::from(pitch)] + 0.02 {
            let on = snap(t, fps);
            let off = snap((t + dur).min(cfg.piece_seconds - tick), fps);
            busy_until[usize::from(pitch)] = off;
            notes.push(NoteEvent::new(on, off, pitch, vel));
        }
        t += gaps.sample(rng);
    }
    let mut perf = MidiPerformance::from_notes(notes);
    perf.duration_s = cfg.piece_seconds;
    perf
}

/// Snaps a time to the MIDI tick grid so the score survives a write/parse
/// round trip unchanged. A tick lying exactly on a half-frame boundary moves
/// one tick later, where float noise cannot flip its frame row.
fn snap(t: f64, fps: f64) -> f64 {
    let tick = WriteOptions::default().tick_seconds();
    let mut k = (t / tick).round();
    if ((k * tick * fps).fract() - 0.5).abs() < 1e-6 {
        k += 1.0;
    }
    k * tick
}

fn degrade<R: Rng>(d: &Degradation, v: f64, rng: &mut R) -> f64 {
    let noise = if d.noise_sigma > 0.0 {
        Normal::new(0.0, d.noise_sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    };
    (d.bias(v) + noise).clamp(0.0, 1.0)
}

/// Paints each note's degraded value on its onset cell, and first over its
/// active frames when filling frames, so onset cells win; then optional
/// smearing.
fn paint_grid(
    perf: &MidiPerformance,
    spec: &SegmentSpec,
    sf: &ScoreFeatures,
    values: &[f64],
    deg: &Degradation,
) -> VelocityGrid<f32> {
    let smear = deg.smear;
    let mut g = Array2::<f64>::zeros((spec.frames, spec.keys));
    let last = spec.frames as i64 - 1;
    let sustain = if deg.fill == GridFill::Frame { &perf.notes[..] } else { &[] };
    for (note, &v) in sustain.iter().zip(values) {
        let Some(key) = spec.key_of(note.pitch) else {
            continue;
        };
        let on = spec.row_of(note.onset_s);
        let off = spec.row_of(note.offset_s).max(on);
        if off < 0 || on > last {
            continue;
        }
        for r in on.max(0)..=off.min(last) {
            g[[r as usize, key]] = v;
        }
    }
    for cell in &sf.onset_notes {
        g[[cell.row, cell.key]] = values[cell.note];
    }
    if smear > 0.0 {
        let src = g.clone();
        let rows = spec.frames;
        for key in 0..spec.keys {
            for r in 0..rows {
                let prev = if r > 0 { src[[r - 1, key]] } else { 0.0 };
                let next = if r + 1 < rows { src[[r + 1, key]] } else { 0.0 };
                g[[r, key]] = ((1.0 - 2.0 * smear) * src[[r, key]] + smear * (prev + next)).clamp(0.0, 1.0);
            }
        }
    }
    VelocityGrid::new(g.mapv(|v| v as f32), GridRole::Preliminary).expect("values clamped to [0, 1]")
}

/// Sum of decaying harmonic tones, one per note, with amplitude growing with
/// velocity. Crude, but loudness tracks velocity, which is all an acoustic
/// smoke test needs.
pub fn proxy_audio(perf: &MidiPerformance, sample_rate: u32, scale: VelocityScale) -> AudioClip {
    let sr = f64::from(sample_rate);
    let len = (perf.duration_s * sr).round() as usize;
    let mut out = vec![0.0f64; len];
    let release = 0.05;
    for n in &perf.notes {
        let f0 = 440.0 * 2f64.powf((f64::from(n.pitch) - 69.0) / 12.0);
        let amp = 0.08 * scale.normalize(n.velocity).powi(2);
        let start = (n.onset_s * sr).round() as usize;
        let end = (((n.offset_s + release) * sr).round() as usize).min(len);
        for (i, s) in out.iter_mut().enumerate().take(end).skip(start) {
            let t = (i - start) as f64 / sr;
            let tail = (t - n.duration()).max(0.0);
            let env = (-t / 0.6).exp() * (1.0 - tail / release).max(0.0);
            let mut v = 0.0;
            for h in 1..=4u32 {
                let f = f0 * f64::from(h);
                if f < sr / 2.0 {
                    v += (2.0 * PI * f * t).sin() / f64::from(h);
                }
            }
            *s += amp * env * v;
        }
    }
    AudioClip {
        samples: out.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
        sample_rate,
    }
}
