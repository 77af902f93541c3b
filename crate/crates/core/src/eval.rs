//! Per-note velocity metrics: MAE/STD of absolute errors and note recall
//! with timing and velocity tolerances.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiPerformance, NoteEvent};
use crate::models::{map_onset_velocities, ModelError, OnsetRead, VelocityGrid};
use crate::pianoroll::{ScoreFeatures, VelocityScale};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no notes to evaluate")]
    Empty,
    #[error("{reference} reference velocities but {estimate} estimates")]
    Length { reference: usize, estimate: usize },
    #[error("notes without an estimate: {0:?}")]
    Coverage(Vec<usize>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub onset_tolerance_s: f64,
    /// Offset tolerance is `max(offset_min_s, offset_ratio * reference duration)`.
    pub offset_ratio: f64,
    pub offset_min_s: f64,
    pub use_offset: bool,
    /// Allowed `|r - s e|` after velocity rescaling, on the `[0, 1]` scale.
    pub velocity_tolerance: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            onset_tolerance_s: 0.05,
            offset_ratio: 0.2,
            offset_min_s: 0.05,
            use_offset: true,
            velocity_tolerance: 0.1,
        }
    }
}

/// Mean and population standard deviation of `|reference - estimate|`.
pub fn mae_std(reference: &[u8], estimate: &[u8]) -> Result<(f64, f64), EvalError> {
    if reference.len() != estimate.len() {
        return Err(EvalError::Length {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    if reference.is_empty() {
        return Err(EvalError::Empty);
    }
    let errs: Vec<f64> = reference
        .iter()
        .zip(estimate)
        .map(|(&r, &e)| (f64::from(r) - f64::from(e)).abs())
        .collect();
    Ok(mean_std(&errs))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Onset distance in whole microseconds, the matching cost.
pub fn onset_cost_us(a: &NoteEvent, b: &NoteEvent) -> i64 {
    ((a.onset_s - b.onset_s).abs() * 1e6).round() as i64
}

/// Pairs `(reference, estimate)` meeting the pitch and timing criteria, in
/// ascending order.
pub fn timing_candidates(reference: &[NoteEvent], estimate: &[NoteEvent], cfg: &MatchConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, r) in reference.iter().enumerate() {
        let off_tol = cfg.offset_min_s.max(cfg.offset_ratio * r.duration());
        for (j, e) in estimate.iter().enumerate() {
            if r.pitch != e.pitch || (r.onset_s - e.onset_s).abs() > cfg.onset_tolerance_s + 1e-12 {
                continue;
            }
            if cfg.use_offset && (r.offset_s - e.offset_s).abs() > off_tol + 1e-12 {
                continue;
            }
            out.push((i, j));
        }
    }
    out
}

/// Least-squares factor `s` minimizing `sum (r - s e)^2` over `pairs`, with
/// `r` the reference velocity divided by the largest reference velocity and
/// `e` the raw estimated velocity.
pub fn velocity_scale(reference: &[NoteEvent], estimate: &[NoteEvent], pairs: &[(usize, usize)]) -> f64 {
    let r_max = reference.iter().map(|n| n.velocity).max().unwrap_or(0);
    let norm = |v: u8| if r_max == 0 { 0.0 } else { f64::from(v) / f64::from(r_max) };
    let (mut re, mut ee) = (0.0, 0.0);
    for &(i, j) in pairs {
        let e = f64::from(estimate[j].velocity);
        re += norm(reference[i].velocity) * e;
        ee += e * e;
    }
    if ee == 0.0 {
        0.0
    } else {
        re / ee
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Matched `(reference, estimate)` index pairs, ascending.
    pub pairs: Vec<(usize, usize)>,
    pub scale: f64,
    pub n_reference: usize,
}

impl Matching {
    pub fn recall(&self) -> f64 {
        self.pairs.len() as f64 / self.n_reference as f64
    }
}

/// One-to-one note matching with timing and velocity criteria.
///
/// Candidate pairs need equal pitch, onsets within the tolerance and, when
/// enabled, offsets within the offset tolerance. Reference velocities are
/// divided by their maximum, one factor rescales all estimated velocities,
/// and pairs whose rescaled velocity misses by more than the tolerance are
/// dropped. The result is a maximum-cardinality matching of minimum total
/// onset distance; remaining ties go to the pairs that come first in
/// `(reference, estimate)` order.
pub fn match_notes(reference: &[NoteEvent], estimate: &[NoteEvent], cfg: &MatchConfig) -> Result<Matching, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::Empty);
    }
    let candidates = timing_candidates(reference, estimate, cfg);
    let scale = velocity_scale(reference, estimate, &candidates);
    let r_max = f64::from(reference.iter().map(|n| n.velocity).max().unwrap_or(0));
    let surviving: Vec<(usize, usize)> = candidates
        .into_iter()
        .filter(|&(i, j)| {
            let r = if r_max == 0.0 { 0.0 } else { f64::from(reference[i].velocity) / r_max };
            (r - scale * f64::from(estimate[j].velocity)).abs() <= cfg.velocity_tolerance + 1e-12
        })
        .collect();
    let costs: Vec<i64> = surviving
        .iter()
        .map(|&(i, j)| onset_cost_us(&reference[i], &estimate[j]))
        .collect();
    let mut pairs = min_cost_matching(&surviving, &costs);
    pairs.sort_unstable();
    Ok(Matching {
        pairs,
        scale,
        n_reference: reference.len(),
    })
}

/// Maximum-cardinality, minimum-cost bipartite matching over `edges`
/// (sorted ascending), solved per connected component by successive
/// shortest paths. Within a component of `K <= 63` edges, edge `k` also
/// earns a bonus `2^(K-1-k)` below the resolution of the main cost, so
/// among equal-cost matchings the one taking the earliest edges wins and the
/// optimum is unique.
pub fn min_cost_matching(edges: &[(usize, usize)], costs: &[i64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for comp in components(edges) {
        let tie_break = comp.len() <= 63;
        let weighted: Vec<i128> = comp
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                let bonus = if tie_break { 1i128 << (comp.len() - 1 - k) } else { 0 };
                (i128::from(costs[e]) << 64) - bonus
            })
            .collect();
        let local: Vec<(usize, usize)> = comp.iter().map(|&e| edges[e]).collect();
        out.extend(ssp(&local, &weighted));
    }
    out
}

/// Edge indices grouped by connected component, each group ascending.
fn components(edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let n_ref = edges.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let n_est = edges.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    let mut parent: Vec<usize> = (0..n_ref + n_est).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, n_ref + j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (k, &(i, _)) in edges.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(k);
    }
    groups.into_values().collect()
}

/// Successive shortest augmenting paths (Bellman-Ford on the residual
/// graph) for a small bipartite component.
fn ssp(edges: &[(usize, usize)], costs: &[i128]) -> Vec<(usize, usize)> {
    let mut refs: Vec<usize> = edges.iter().map(|e| e.0).collect();
    refs.sort_unstable();
    refs.dedup();
    let mut ests: Vec<usize> = edges.iter().map(|e| e.1).collect();
    ests.sort_unstable();
    ests.dedup();
    let r_of = |i: usize| refs.binary_search(&i).expect("ref node");
    let e_of = |j: usize| ests.binary_search(&j).expect("est node");
    let (nr, ne) = (refs.len(), ests.len());
    // nodes: source 0, refs 1..=nr, ests nr+1..=nr+ne
    let n = nr + ne + 1;
    let mut matched_ref: Vec<Option<usize>> = vec![None; nr];
    let mut matched_est: Vec<Option<usize>> = vec![None; ne];
    let local: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (r_of(i), e_of(j))).collect();
    loop {
        let mut dist = vec![None::<i128>; n];
        let mut prev: Vec<Option<(usize, Option<usize>)>> = vec![None; n];
        dist[0] = Some(0);
        for (r, m) in matched_ref.iter().enumerate() {
            if m.is_none() {
                dist[1 + r] = Some(0);
                prev[1 + r] = Some((0, None));
            }
        }
        // relax until stable; graphs are tiny
        let mut changed = true;
        while changed {
            changed = false;
            for (k, &(r, e)) in local.iter().enumerate() {
                let (u, v) = (1 + r, 1 + nr + e);
                if matched_ref[r] == Some(k) {
                    // residual backward edge est -> ref
                    if let Some(d) = dist[v] {
                        let nd = d - costs[k];
                        if dist[u].is_none_or(|x| nd < x) {
                            dist[u] = Some(nd);
                            prev[u] = Some((v, Some(k)));
                            changed = true;
                        }
                    }
                } else if let Some(d) = dist[u] {
                    let nd = d + costs[k];
                    if dist[v].is_none_or(|x| nd < x) {
                        dist[v] = Some(nd);
                        prev[v] = Some((u, Some(k)));
                        changed = true;
                    }
                }
            }
        }
        let best = (0..ne)
            .filter(|&e| matched_est[e].is_none())
            .filter_map(|e| dist[1 + nr + e].map(|d| (d, e)))
            .min();
        let Some((_, e_end)) = best else {
            break;
        };
        // Walk back to the free reference. Forward edges on the path become
        // matched; the backward edges between them are overwritten.
        let mut v = 1 + nr + e_end;
        while let Some((u, Some(k))) = prev[v] {
            let (r, e) = local[k];
            if u == 1 + r {
                matched_ref[r] = Some(k);
                matched_est[e] = Some(k);
            }
            v = u;
        }
    }
    matched_ref
        .iter()
        .flatten()
        .map(|&k| edges[k])
        .collect()
}

/// Per-piece evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceReport {
    pub id: String,
    pub n_reference_notes: usize,
    pub n_matched: usize,
    pub mae: f64,
    pub std: f64,
    pub recall: f64,
    /// Absolute per-note errors, kept for pooled statistics.
    #[serde(skip)]
    pub abs_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub mae: f64,
    pub std: f64,
    pub recall: f64,
    pub n_reference_notes: usize,
    pub n_matched: usize,
    pub pieces: Vec<PieceReport>,
}

impl EvalReport {
    /// Pools per-note errors and matches over all pieces.
    pub fn aggregate(source: &str, pieces: Vec<PieceReport>) -> Result<Self, EvalError> {
        let errs: Vec<f64> = pieces.iter().flat_map(|p| p.abs_errors.iter().copied()).collect();
        if errs.is_empty() {
            return Err(EvalError::Empty);
        }
        let (mae, std) = mean_std(&errs);
        let n_reference_notes = pieces.iter().map(|p| p.n_reference_notes).sum();
        let n_matched = pieces.iter().map(|p| p.n_matched).sum();
        Ok(Self {
            source: source.to_string(),
            mae,
            std,
            recall: n_matched as f64 / n_reference_notes as f64,
            n_reference_notes,
            n_matched,
            pieces,
        })
    }

    /// `key=value` summary lines, a blank line, then a tab-separated
    /// per-piece table with a header row.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "source={}", self.source);
        let _ = writeln!(s, "mae={:.6}", self.mae);
        let _ = writeln!(s, "std={:.6}", self.std);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "n_reference_notes={}", self.n_reference_notes);
        let _ = writeln!(s, "n_matched={}", self.n_matched);
        let _ = writeln!(s, "n_pieces={}", self.pieces.len());
        s.push('\n');
        s.push_str("id\tn_reference_notes\tn_matched\tmae\tstd\trecall\n");
        for p in &self.pieces {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                p.id, p.n_reference_notes, p.n_matched, p.mae, p.std, p.recall
            );
        }
        s
    }
}

/// Reads note velocities from segment grids at the reference onsets and
/// scores them against the reference, with reference timing on both sides.
pub fn evaluate_piece<T: Scalar>(
    id: &str,
    reference: &MidiPerformance,
    segments: &[(ScoreFeatures, VelocityGrid<T>)],
    scale: VelocityScale,
    read: OnsetRead,
    cfg: &MatchConfig,
) -> Result<PieceReport, EvalError> {
    let mut est: Vec<Option<u8>> = vec![None; reference.notes.len()];
    for (sf, grid) in segments {
        for (note, v) in map_onset_velocities(grid, sf, scale, read)? {
            est[note] = Some(v);
        }
    }
    let missing: Vec<usize> = est
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::Coverage(missing));
    }
    let est_notes: Vec<NoteEvent> = reference
        .notes
        .iter()
        .zip(&est)
        .map(|(n, v)| NoteEvent {
            velocity: v.expect("checked above"),
            ..*n
        })
        .collect();
    let r: Vec<u8> = reference.notes.iter().map(|n| n.velocity).collect();
    let e: Vec<u8> = est_notes.iter().map(|n| n.velocity).collect();
    let (mae, std) = mae_std(&r, &e)?;
    let matching = match_notes(&reference.notes, &est_notes, cfg)?;
    Ok(PieceReport {
        id: id.to_string(),
        n_reference_notes: r.len(),
        n_matched: matching.pairs.len(),
        mae,
        std,
        recall: matching.recall(),
        abs_errors: r
            .iter()
            .zip(&e)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .collect(),
    })
}
