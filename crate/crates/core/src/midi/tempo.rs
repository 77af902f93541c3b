/// Piecewise-constant tempo map converting ticks to seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoMap {
    division: u16,
    // (start tick, start seconds, microseconds per quarter note)
    segments: Vec<(u64, f64, u32)>,
}

pub const DEFAULT_TEMPO_US: u32 = 500_000;

impl TempoMap {
    /// `changes` are `(tick, microseconds per quarter)` pairs in any order;
    /// later entries at the same tick win.
    pub fn new(division: u16, changes: &[(u64, u32)]) -> Self {
        let mut sorted: Vec<(u64, u32)> = changes.to_vec();
        sorted.sort_by_key(|c| c.0);
        let mut segments: Vec<(u64, f64, u32)> = vec![(0, 0.0, DEFAULT_TEMPO_US)];
        for (tick, tempo) in sorted {
            let tempo = tempo.max(1);
            let last = *segments.last().unwrap();
            if tick == last.0 {
                segments.last_mut().unwrap().2 = tempo;
                continue;
            }
            let secs = last.1 + Self::span(division, tick - last.0, last.2);
            segments.push((tick, secs, tempo));
        }
        Self { division, segments }
    }

    fn span(division: u16, ticks: u64, tempo: u32) -> f64 {
        ticks as f64 * f64::from(tempo) / (f64::from(division) * 1e6)
    }

    pub fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (start, secs, tempo) = self.segments[idx];
        secs + Self::span(self.division, tick - start, tempo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_tempo() {
        let map = TempoMap::new(480, &[]);
        assert!((map.seconds(480) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn piecewise_change() {
        let map = TempoMap::new(480, &[(480, 250_000)]);
        assert!((map.seconds(960) - 0.75).abs() < 1e-12);
        assert!((map.seconds(720) - 0.625).abs() < 1e-12);
    }

    #[test]
    fn strictly_increasing() {
        let map = TempoMap::new(96, &[(10, 1_000_000), (30, 100), (31, 9_000_000)]);
        let mut prev = -1.0;
        for t in 0..200 {
            let s = map.seconds(t);
            assert!(s > prev);
            prev = s;
        }
    }
}
