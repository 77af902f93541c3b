//! Independent reference implementations and seeded property drivers for
//! the score features, note matching and MIDI round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use velocorr::eval::{mae_std, match_notes, MatchConfig};
use velocorr::midi::{parse_smf, write_smf, MidiPerformance, NoteEvent, WriteOptions};
use velocorr::pianoroll::{rasterize, SegmentSpec, VelocityScale};

pub fn rng(tag: u64, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed)
}

/// Random notes over `span_s` seconds with deliberately awkward cases mixed
/// in: sub-frame and zero-length notes, and same-pitch notes that start
/// exactly where the previous one ends.
pub fn awkward_performance(r: &mut ChaCha8Rng, span_s: f64) -> MidiPerformance {
    let n = r.random_range(0..40);
    let mut notes = Vec::with_capacity(n);
    for _ in 0..n {
        let pitch = r.random_range(21..=108);
        let onset = r.random_range(-0.5..span_s + 0.5);
        let duration = match r.random_range(0..4) {
            0 => 0.0,
            1 => r.random_range(0.0..0.01),
            _ => r.random_range(0.01..2.0),
        };
        notes.push(NoteEvent::new(onset, onset + duration, pitch, r.random_range(1..=127)));
        if r.random_bool(0.25) {
            let next = onset + duration;
            notes.push(NoteEvent::new(next, next + r.random_range(0.0..0.3), pitch, r.random_range(1..=127)));
        }
    }
    MidiPerformance::from_notes(notes)
}

/// Onset, frame and sustain-only matrices are binary and
/// `frame_ex = frame - onset` in every cell.
pub fn score_feature_identity(seed: u64) -> Result<(), String> {
    let mut r = rng(2, seed);
    let frames = r.random_range(1..300);
    let spec = SegmentSpec::with_frames(frames).at(r.random_range(-0.2..0.5));
    let perf = awkward_performance(&mut r, spec.length_s());
    let sf = rasterize(&perf, &spec, VelocityScale::Div127);
    for ((&on, &fr), &ex) in sf.onset.iter().zip(&sf.frame).zip(&sf.frame_ex) {
        if on > 1 || fr > 1 || ex > 1 {
            return Err(format!("seed {seed}: non-binary cell ({on}, {fr}, {ex})"));
        }
        if i16::from(ex) != i16::from(fr) - i16::from(on) {
            return Err(format!("seed {seed}: frame_ex {ex} != frame {fr} - onset {on}"));
        }
    }
    sf.check_invariants().map_err(|e| format!("seed {seed}: {e}"))
}

pub struct MatchInstance {
    pub reference: Vec<NoteEvent>,
    pub estimate: Vec<NoteEvent>,
    pub cfg: MatchConfig,
}

/// Up to 10 reference notes on few pitches, with estimates that jitter
/// timing and velocity, duplicate, or go missing, so ties and conflicts are
/// common.
pub fn match_instance(seed: u64) -> MatchInstance {
    let mut r = rng(3, seed);
    let n = r.random_range(1..=10);
    let pitches: Vec<u8> = (0..r.random_range(1..=3)).map(|_| r.random_range(60..64)).collect();
    let mut reference = Vec::new();
    for _ in 0..n {
        // Onsets on a 10 ms lattice keep exact onset-distance ties frequent.
        let onset = f64::from(r.random_range(0..30u32)) * 0.01;
        let duration = f64::from(r.random_range(1..40u32)) * 0.01;
        let pitch = pitches[r.random_range(0..pitches.len())];
        reference.push(NoteEvent::new(onset, onset + duration, pitch, r.random_range(1..=127)));
    }
    let mut estimate = Vec::new();
    for n in &reference {
        for _ in 0..r.random_range(0..=2) {
            let shift = f64::from(r.random_range(-7..=7i32)) * 0.01;
            let stretch = f64::from(r.random_range(-5..=5i32)) * 0.01;
            let vel = (i32::from(n.velocity) + r.random_range(-30..=30)).clamp(1, 127) as u8;
            estimate.push(NoteEvent::new(
                n.onset_s + shift,
                (n.offset_s + shift + stretch).max(n.onset_s + shift),
                n.pitch,
                vel,
            ));
        }
    }
    let cfg = MatchConfig {
        use_offset: r.random_bool(0.5),
        ..MatchConfig::default()
    };
    MatchInstance { reference, estimate, cfg }
}

/// Best one-to-one assignment by exhaustive search: most pairs, then least
/// total onset distance in microseconds, then the set whose first
/// differing pair (in `(reference, estimate)` order) comes earliest.
pub fn exhaustive_matching(inst: &MatchInstance) -> (Vec<(usize, usize)>, f64) {
    let MatchInstance { reference, estimate, cfg } = inst;
    let mut candidates = Vec::new();
    for (i, a) in reference.iter().enumerate() {
        for (j, b) in estimate.iter().enumerate() {
            let onset_ok = (a.onset_s - b.onset_s).abs() <= cfg.onset_tolerance_s + 1e-12;
            let tol = f64::max(cfg.offset_min_s, cfg.offset_ratio * (a.offset_s - a.onset_s));
            let offset_ok = !cfg.use_offset || (a.offset_s - b.offset_s).abs() <= tol + 1e-12;
            if a.pitch == b.pitch && onset_ok && offset_ok {
                candidates.push((i, j));
            }
        }
    }
    let top = reference.iter().map(|n| n.velocity).max().unwrap() as f64;
    let (num, den) = candidates.iter().fold((0.0, 0.0), |(num, den), &(i, j)| {
        let e = estimate[j].velocity as f64;
        (num + reference[i].velocity as f64 / top * e, den + e * e)
    });
    let s = if den > 0.0 { num / den } else { 0.0 };
    let edges: Vec<(usize, usize)> = candidates
        .into_iter()
        .filter(|&(i, j)| (reference[i].velocity as f64 / top - s * estimate[j].velocity as f64).abs() <= cfg.velocity_tolerance + 1e-12)
        .collect();
    let cost = |set: &[(usize, usize)]| -> i64 {
        set.iter()
            .map(|&(i, j)| ((reference[i].onset_s - estimate[j].onset_s).abs() * 1e6).round() as i64)
            .sum()
    };

    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut current = Vec::new();
    let mut used = vec![false; estimate.len()];
    fn better(a: &[(usize, usize)], b: &[(usize, usize)], cost: &dyn Fn(&[(usize, usize)]) -> i64) -> bool {
        if a.len() != b.len() {
            return a.len() > b.len();
        }
        let (ca, cb) = (cost(a), cost(b));
        if ca != cb {
            return ca < cb;
        }
        // Both lists ascend; the first differing pair decides.
        for (x, y) in a.iter().zip(b) {
            if x != y {
                return x < y;
            }
        }
        false
    }
    fn search(
        i: usize,
        n_ref: usize,
        edges: &[(usize, usize)],
        used: &mut [bool],
        current: &mut Vec<(usize, usize)>,
        best: &mut Vec<(usize, usize)>,
        cost: &dyn Fn(&[(usize, usize)]) -> i64,
    ) {
        if i == n_ref {
            if better(current, best, cost) {
                *best = current.clone();
            }
            return;
        }
        search(i + 1, n_ref, edges, used, current, best, cost);
        for &(a, b) in edges.iter().filter(|e| e.0 == i) {
            if !used[b] {
                used[b] = true;
                current.push((a, b));
                search(i + 1, n_ref, edges, used, current, best, cost);
                current.pop();
                used[b] = false;
            }
        }
    }
    search(0, reference.len(), &edges, &mut used, &mut current, &mut best, &cost);
    let recall = best.len() as f64 / reference.len() as f64;
    (best, recall)
}

/// `match_notes` against the exhaustive oracle, plus `mae_std` against a
/// plain loop.
pub fn matching_agrees(seed: u64) -> Result<(), String> {
    let inst = match_instance(seed);
    let got = match_notes(&inst.reference, &inst.estimate, &inst.cfg).map_err(|e| e.to_string())?;
    let (pairs, recall) = exhaustive_matching(&inst);
    if got.pairs != pairs || got.recall() != recall {
        return Err(format!(
            "seed {seed}: matched {:?} (recall {}), oracle {pairs:?} (recall {recall})",
            got.pairs,
            got.recall()
        ));
    }
    let r: Vec<u8> = inst.reference.iter().map(|n| n.velocity).collect();
    let e: Vec<u8> = r.iter().enumerate().map(|(k, _)| inst.estimate.get(k).map_or(64, |n| n.velocity)).collect();
    let (mae, std) = mae_std(&r, &e).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for k in 0..r.len() {
        total += (r[k] as f64 - e[k] as f64).abs();
    }
    let mean = total / r.len() as f64;
    let mut sq = 0.0;
    for k in 0..r.len() {
        let d = (r[k] as f64 - e[k] as f64).abs() - mean;
        sq += d * d;
    }
    let sd = (sq / r.len() as f64).sqrt();
    if (mae - mean).abs() > 1e-9 || (std - sd).abs() > 1e-9 {
        return Err(format!("seed {seed}: mae/std ({mae}, {std}) vs loop ({mean}, {sd})"));
    }
    Ok(())
}

/// A performance that survives quantization to whole ticks: distinct
/// velocities 1..=127, every note at least two ticks long, and same-pitch
/// notes separated by at least two ticks.
pub fn quantizable_performance(r: &mut ChaCha8Rng) -> MidiPerformance {
    let tick = WriteOptions::default().tick_seconds();
    let mut notes: Vec<NoteEvent> = Vec::new();
    for _ in 0..r.random_range(1..60) {
        let pitch = r.random_range(21..=108);
        let onset = r.random_range(0.0..20.0);
        let offset = onset + r.random_range(3.0 * tick..3.0);
        let clear = notes
            .iter()
            .filter(|n| n.pitch == pitch)
            .all(|n| offset + 2.0 * tick < n.onset_s || n.offset_s + 2.0 * tick < onset);
        if clear {
            notes.push(NoteEvent::new(onset, offset, pitch, r.random_range(1..=127)));
        }
    }
    MidiPerformance::from_notes(notes)
}

pub fn midi_round_trip(seed: u64) -> Result<(), String> {
    let mut r = rng(4, seed);
    let perf = quantizable_performance(&mut r);
    let tick = WriteOptions::default().tick_seconds();
    let bytes = write_smf(&perf).map_err(|e| e.to_string())?;
    let back = parse_smf(&bytes).map_err(|e| e.to_string())?;
    if back.notes.len() != perf.notes.len() {
        return Err(format!("seed {seed}: {} notes became {}", perf.notes.len(), back.notes.len()));
    }
    let key = |n: &NoteEvent| (n.pitch, (n.onset_s / tick).round() as i64);
    let mut a = perf.notes.clone();
    let mut b = back.notes.clone();
    a.sort_by_key(key);
    b.sort_by_key(key);
    for (x, y) in a.iter().zip(&b) {
        let close = (x.onset_s - y.onset_s).abs() <= tick && (x.offset_s - y.offset_s).abs() <= tick;
        if x.pitch != y.pitch || x.velocity != y.velocity || !close {
            return Err(format!("seed {seed}: {x:?} came back as {y:?}"));
        }
    }
    Ok(())
}
