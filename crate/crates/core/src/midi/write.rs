use log::warn;

use super::{write_vlq, MidiError, MidiPerformance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub division: u16,
    pub tempo_us: u32,
}

impl Default for WriteOptions {
    /// 480 ticks per quarter at 120 bpm: one tick is about 1.04 ms.
    fn default() -> Self {
        Self {
            division: 480,
            tempo_us: 500_000,
        }
    }
}

impl WriteOptions {
    pub fn ticks_per_second(&self) -> f64 {
        f64::from(self.division) * 1e6 / f64::from(self.tempo_us)
    }

    pub fn tick_seconds(&self) -> f64 {
        1.0 / self.ticks_per_second()
    }
}

const MAX_TICK: u64 = 0x0fff_ffff;

pub fn write_smf(perf: &MidiPerformance) -> Result<Vec<u8>, MidiError> {
    write_smf_with(perf, &WriteOptions::default())
}

/// Writes a format-0 file with a single tempo. Velocity 0 cannot be encoded
/// as a note-on and is raised to 1.
pub fn write_smf_with(perf: &MidiPerformance, opts: &WriteOptions) -> Result<Vec<u8>, MidiError> {
    if opts.division == 0 || opts.division & 0x8000 != 0 || opts.tempo_us == 0 || opts.tempo_us > 0xff_ffff {
        return Err(MidiError::Unsupported(format!("write options {opts:?}")));
    }
    let tps = opts.ticks_per_second();
    let to_tick = |index: usize, s: f64| -> Result<u64, MidiError> {
        if !s.is_finite() || s < 0.0 {
            return Err(MidiError::Unrepresentable {
                index,
                reason: format!("time {s} s"),
            });
        }
        let t = (s * tps).round();
        if t > MAX_TICK as f64 {
            return Err(MidiError::Unrepresentable {
                index,
                reason: format!("time {s} s exceeds the tick range"),
            });
        }
        Ok(t as u64)
    };

    // (tick, note-off first, pitch, velocity)
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(perf.notes.len() * 2);
    let mut last_off = [0u64; 128];
    let mut order: Vec<usize> = (0..perf.notes.len()).collect();
    order.sort_by(|&a, &b| perf.notes[a].onset_s.total_cmp(&perf.notes[b].onset_s));
    for &i in &order {
        let n = &perf.notes[i];
        if n.pitch > 127 || n.velocity > 127 {
            return Err(MidiError::Unrepresentable {
                index: i,
                reason: format!("pitch {} velocity {}", n.pitch, n.velocity),
            });
        }
        let on = to_tick(i, n.onset_s)?;
        let off = to_tick(i, n.offset_s)?.max(on + 1);
        if off > MAX_TICK {
            return Err(MidiError::Unrepresentable {
                index: i,
                reason: "offset exceeds the tick range".into(),
            });
        }
        let p = usize::from(n.pitch);
        if last_off[p] > on {
            return Err(MidiError::Unrepresentable {
                index: i,
                reason: "overlaps the previous note of the same pitch after quantization".into(),
            });
        }
        last_off[p] = off;
        let vel = if n.velocity == 0 {
            warn!("note {i}: velocity 0 written as 1");
            1
        } else {
            n.velocity
        };
        events.push((on, 1, n.pitch, vel));
        events.push((off, 0, n.pitch, 0));
    }
    events.sort_by_key(|e| (e.0, e.1));

    let mut track = Vec::with_capacity(events.len() * 5 + 16);
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
    track.extend_from_slice(&opts.tempo_us.to_be_bytes()[1..]);
    let mut now = 0u64;
    for (tick, is_on, pitch, vel) in events {
        write_vlq(&mut track, (tick - now) as u32);
        now = tick;
        if is_on == 1 {
            track.extend_from_slice(&[0x90, pitch, vel]);
        } else {
            track.extend_from_slice(&[0x80, pitch, 0]);
        }
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&opts.division.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
