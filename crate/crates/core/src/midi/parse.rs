use log::warn;

use super::tempo::TempoMap;
use super::{read_vlq, sort_notes, MidiError, MidiPerformance, NoteEvent, SourceInfo};
use super::{PIANO_HIGHEST, PIANO_LOWEST};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    /// Extend note offsets through sustain-pedal (CC64) holds.
    pub pedal_extend: bool,
    /// Drop notes outside the 88-key piano range.
    pub piano_range: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            pedal_extend: false,
            piano_range: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    NoteOn { key: u8, vel: u8 },
    NoteOff { key: u8 },
    Pedal { down: bool },
    Tempo(u32),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    tick: u64,
    track: usize,
    kind: Kind,
}

#[derive(Debug, Clone, Copy)]
struct TickNote {
    on: u64,
    off: u64,
    key: u8,
    vel: u8,
}

pub fn parse_smf(bytes: &[u8]) -> Result<MidiPerformance, MidiError> {
    parse_smf_with(bytes, &ParseOptions::default())
}

pub fn parse_smf_with(bytes: &[u8], opts: &ParseOptions) -> Result<MidiPerformance, MidiError> {
    let (source, mut pos) = read_header(bytes)?;
    let mut events = Vec::new();
    let mut track_ends = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(MidiError::UnexpectedEof { offset: bytes.len() });
        }
        let id = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        if len > bytes.len() - body {
            return Err(MidiError::Malformed {
                offset: pos + 4,
                reason: format!("chunk length {len} exceeds remaining {} bytes", bytes.len() - body),
            });
        }
        if id == b"MTrk" {
            let track = track_ends.len();
            let end = read_track(&bytes[..body + len], body, track, &mut events)?;
            track_ends.push(end);
        }
        pos = body + len;
    }
    if track_ends.len() != usize::from(source.tracks) {
        warn!(
            "header declares {} tracks, found {}",
            source.tracks,
            track_ends.len()
        );
    }

    let tempos: Vec<(u64, u32)> = events
        .iter()
        .filter_map(|e| match e.kind {
            Kind::Tempo(t) => Some((e.tick, t)),
            _ => None,
        })
        .collect();
    let map = TempoMap::new(source.division, &tempos);

    // Stable: keeps per-track file order for events sharing a tick.
    events.sort_by_key(|e| e.tick);
    let mut notes = pair_notes(&events, &track_ends);
    if opts.pedal_extend {
        extend_with_pedal(&mut notes, &events, &track_ends);
    }

    let mut out = Vec::with_capacity(notes.len());
    for n in notes {
        if opts.piano_range && !(PIANO_LOWEST..=PIANO_HIGHEST).contains(&n.key) {
            warn!("dropping note with pitch {} outside the piano range", n.key);
            continue;
        }
        out.push(NoteEvent::new(map.seconds(n.on), map.seconds(n.off), n.key, n.vel));
    }
    sort_notes(&mut out);
    let end_s = track_ends
        .iter()
        .map(|&t| map.seconds(t))
        .fold(0.0, f64::max);
    let duration_s = out.iter().map(|n| n.offset_s).fold(end_s, f64::max);
    Ok(MidiPerformance {
        notes: out,
        duration_s,
        source,
    })
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn read_header(bytes: &[u8]) -> Result<(SourceInfo, usize), MidiError> {
    if bytes.len() < 14 {
        return Err(MidiError::UnexpectedEof { offset: bytes.len() });
    }
    if &bytes[0..4] != b"MThd" {
        return Err(MidiError::Malformed {
            offset: 0,
            reason: "missing MThd header".into(),
        });
    }
    let len = be_u32(&bytes[4..8]) as usize;
    if len < 6 {
        return Err(MidiError::Malformed {
            offset: 4,
            reason: format!("header length {len} < 6"),
        });
    }
    if len > bytes.len() - 8 {
        return Err(MidiError::Malformed {
            offset: 4,
            reason: "header length exceeds file".into(),
        });
    }
    let format = be_u16(&bytes[8..10]);
    let tracks = be_u16(&bytes[10..12]);
    let division = be_u16(&bytes[12..14]);
    if format > 1 {
        return Err(MidiError::Unsupported(format!("format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::Malformed {
            offset: 12,
            reason: "zero ticks per quarter note".into(),
        });
    }
    Ok((
        SourceInfo {
            format,
            division,
            tracks,
        },
        8 + len,
    ))
}

fn byte_at(data: &[u8], pos: usize) -> Result<u8, MidiError> {
    data.get(pos)
        .copied()
        .ok_or(MidiError::UnexpectedEof { offset: pos })
}

fn data_byte(data: &[u8], pos: usize) -> Result<u8, MidiError> {
    let b = byte_at(data, pos)?;
    if b & 0x80 != 0 {
        return Err(MidiError::Malformed {
            offset: pos,
            reason: format!("expected data byte, found status 0x{b:02x}"),
        });
    }
    Ok(b)
}

/// Parses one track chunk whose body ends at `data.len()`. Returns the
/// absolute tick of the track's last event.
fn read_track(
    data: &[u8],
    mut pos: usize,
    track: usize,
    events: &mut Vec<Event>,
) -> Result<u64, MidiError> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    while pos < data.len() {
        tick += u64::from(read_vlq(data, &mut pos)?);
        let first = byte_at(data, pos)?;
        let status = if first & 0x80 != 0 {
            pos += 1;
            first
        } else {
            running.ok_or(MidiError::Malformed {
                offset: pos,
                reason: "data byte without running status".into(),
            })?
        };
        match status {
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let nbytes = if kind == 0xc0 || kind == 0xd0 { 1 } else { 2 };
                let a = data_byte(data, pos)?;
                let b = if nbytes == 2 { data_byte(data, pos + 1)? } else { 0 };
                pos += nbytes;
                let ev = match kind {
                    0x90 if b > 0 => Some(Kind::NoteOn { key: a, vel: b }),
                    0x90 | 0x80 => Some(Kind::NoteOff { key: a }),
                    0xb0 if a == 64 => Some(Kind::Pedal { down: b >= 64 }),
                    _ => None,
                };
                if let Some(kind) = ev {
                    events.push(Event { tick, track, kind });
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = read_vlq(data, &mut pos)? as usize;
                pos = skip(data, pos, len)?;
            }
            0xff => {
                running = None;
                let ty = byte_at(data, pos)?;
                pos += 1;
                let len = read_vlq(data, &mut pos)? as usize;
                let body = pos;
                pos = skip(data, pos, len)?;
                match ty {
                    0x51 => {
                        if len != 3 {
                            return Err(MidiError::Malformed {
                                offset: body,
                                reason: format!("tempo meta event of length {len}"),
                            });
                        }
                        let us = u32::from_be_bytes([0, data[body], data[body + 1], data[body + 2]]);
                        events.push(Event {
                            tick,
                            track,
                            kind: Kind::Tempo(us),
                        });
                    }
                    0x2f => return Ok(tick),
                    _ => {}
                }
            }
            _ => {
                return Err(MidiError::Malformed {
                    offset: pos - 1,
                    reason: format!("status 0x{status:02x} is not valid in a file"),
                })
            }
        }
    }
    warn!("track {track} has no end-of-track event");
    Ok(tick)
}

fn skip(data: &[u8], pos: usize, len: usize) -> Result<usize, MidiError> {
    if len > data.len() - pos {
        return Err(MidiError::UnexpectedEof { offset: data.len() });
    }
    Ok(pos + len)
}

#[derive(Clone, Copy)]
struct Active {
    on: u64,
    vel: u8,
    track: usize,
}

fn pair_notes(events: &[Event], track_ends: &[u64]) -> Vec<TickNote> {
    let mut active: [Option<Active>; 128] = [None; 128];
    let mut notes = Vec::new();
    let close = |key: u8, a: Active, off: u64, notes: &mut Vec<TickNote>| {
        if off > a.on {
            notes.push(TickNote {
                on: a.on,
                off,
                key,
                vel: a.vel,
            });
        } else {
            warn!("dropping zero-length note (pitch {key}) at tick {off}");
        }
    };
    for ev in events {
        match ev.kind {
            Kind::NoteOn { key, vel } => {
                // An overlapping same-pitch note is truncated at the new onset.
                if let Some(a) = active[usize::from(key)].take() {
                    close(key, a, ev.tick, &mut notes);
                }
                active[usize::from(key)] = Some(Active {
                    on: ev.tick,
                    vel,
                    track: ev.track,
                });
            }
            Kind::NoteOff { key } => {
                if let Some(a) = active[usize::from(key)].take() {
                    close(key, a, ev.tick, &mut notes);
                }
            }
            _ => {}
        }
    }
    for (key, slot) in active.iter().enumerate() {
        if let Some(a) = slot {
            let end = track_ends.get(a.track).copied().unwrap_or(a.on);
            warn!("note-on (pitch {key}) at tick {} never released; clamping to track end", a.on);
            close(key as u8, *a, end, &mut notes);
        }
    }
    notes
}

fn extend_with_pedal(notes: &mut [TickNote], events: &[Event], track_ends: &[u64]) {
    let end = track_ends.iter().copied().max().unwrap_or(0);
    let mut holds = Vec::new();
    let mut down: Option<u64> = None;
    for ev in events {
        if let Kind::Pedal { down: is_down } = ev.kind {
            match (down, is_down) {
                (None, true) => down = Some(ev.tick),
                (Some(start), false) => {
                    holds.push((start, ev.tick));
                    down = None;
                }
                _ => {}
            }
        }
    }
    if let Some(start) = down {
        holds.push((start, end));
    }
    for n in notes.iter_mut() {
        if let Some(&(_, up)) = holds.iter().find(|&&(d, u)| d <= n.off && n.off < u) {
            n.off = up;
        }
    }
    // Re-establish at most one sounding note per pitch.
    notes.sort_by_key(|n| (n.key, n.on));
    for i in 1..notes.len() {
        if notes[i].key == notes[i - 1].key && notes[i - 1].off > notes[i].on {
            notes[i - 1].off = notes[i].on;
        }
    }
}
