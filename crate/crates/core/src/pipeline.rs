//! Glue between corpora, the correction model and evaluation.

use ndarray::{s, Array2};

use crate::eval::{evaluate_piece, EvalError, EvalReport, MatchConfig};
use crate::formats::Split;
use crate::midi::MidiPerformance;
use crate::models::{
    build_correction_input, FeatureConfig, GridRole, ModelError, OnsetRead, VelocityGrid, VelocityModel,
};
use crate::pianoroll::{segment_performance, ScoreFeatures, SegmentSpec, VelocityScale};
use crate::synth::SynthPiece;
use crate::trainer::Example;
use crate::Scalar;

/// A piece ready for correction: its score, per-segment features and
/// preliminary grids.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceData<T> {
    pub id: String,
    pub split: Split,
    pub performance: MidiPerformance,
    pub segments: Vec<(ScoreFeatures, VelocityGrid<T>)>,
}

impl<T: Scalar> PieceData<T> {
    pub fn from_synth(p: &SynthPiece) -> Self {
        Self {
            id: p.id.clone(),
            split: p.split,
            performance: p.performance.clone(),
            segments: p
                .segments
                .iter()
                .zip(&p.preliminary)
                .map(|((_, sf), g)| {
                    let grid = VelocityGrid {
                        values: g.values.mapv(|v| T::lit(f64::from(v))),
                        role: g.role,
                    };
                    (sf.clone(), grid)
                })
                .collect(),
        }
    }

    pub fn examples(&self, features: &FeatureConfig) -> Result<Vec<Example<T>>, ModelError> {
        self.segments
            .iter()
            .enumerate()
            .map(|(i, (sf, g))| Example::correction(format!("{}#{i}", self.id), g, sf, features))
            .collect()
    }

    /// Runs the correction model over every segment.
    pub fn refine<M: VelocityModel<T>>(&self, model: &M, features: &FeatureConfig) -> Result<Self, ModelError> {
        let segments = self
            .segments
            .iter()
            .map(|(sf, g)| {
                let input = build_correction_input(g, sf, features)?;
                let values = model.predict(&input)?;
                Ok((sf.clone(), VelocityGrid::new(values, GridRole::Refined)?))
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self { segments, ..self.clone() })
    }
}

pub fn synth_pieces<T: Scalar>(pieces: &[SynthPiece], split: Split) -> Vec<PieceData<T>> {
    pieces
        .iter()
        .filter(|p| p.split == split)
        .map(PieceData::from_synth)
        .collect()
}

pub fn examples<T: Scalar>(pieces: &[PieceData<T>], features: &FeatureConfig) -> Result<Vec<Example<T>>, ModelError> {
    let mut out = Vec::new();
    for p in pieces {
        out.extend(p.examples(features)?);
    }
    Ok(out)
}

/// Evaluates the grids currently held by `pieces` against their scores.
pub fn evaluate<T: Scalar>(
    source: &str,
    pieces: &[PieceData<T>],
    scale: VelocityScale,
    read: OnsetRead,
    cfg: &MatchConfig,
) -> Result<EvalReport, EvalError> {
    let reports = pieces
        .iter()
        .map(|p| evaluate_piece(&p.id, &p.performance, &p.segments, scale, read, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::aggregate(source, reports)
}

/// Score features for every non-overlapping segment of `perf`.
pub fn segments(perf: &MidiPerformance, spec: &SegmentSpec, scale: VelocityScale) -> Vec<(SegmentSpec, ScoreFeatures)> {
    segment_performance(perf, spec, spec.length_s(), scale)
}

/// Cuts a piece-long roll into `count` consecutive blocks of `frames` rows,
/// zero-padding past its end.
pub fn split_rows<T: Scalar>(values: &Array2<T>, frames: usize, count: usize) -> Vec<Array2<T>> {
    (0..count)
        .map(|k| {
            let mut block = Array2::zeros((frames, values.ncols()));
            let start = (k * frames).min(values.nrows());
            let end = ((k + 1) * frames).min(values.nrows());
            block.slice_mut(s![..end - start, ..]).assign(&values.slice(s![start..end, ..]));
            block
        })
        .collect()
}

/// Inverse of [`split_rows`] for whole blocks.
pub fn join_rows<T: Scalar>(blocks: &[Array2<T>]) -> Option<Array2<T>> {
    crate::models::stack_frames(blocks)
}

/// Preliminary grids for every segment from a piece-long roll.
pub fn grids_from_roll<T: Scalar>(
    roll: &Array2<T>,
    segments: &[(SegmentSpec, ScoreFeatures)],
    role: GridRole,
) -> Result<Vec<VelocityGrid<T>>, ModelError> {
    let frames = segments.first().map_or(0, |(spec, _)| spec.frames);
    split_rows(roll, frames, segments.len())
        .into_iter()
        .map(|b| VelocityGrid::new(b, role))
        .collect()
}

/// Per-segment log-mel blocks aligned with `segments`.
pub fn mel_blocks<T: Scalar>(mel: &Array2<T>, segments: &[(SegmentSpec, ScoreFeatures)]) -> Vec<Array2<T>> {
    let frames = segments.first().map_or(0, |(spec, _)| spec.frames);
    split_rows(mel, frames, segments.len())
}

/// Acoustic-branch training examples: log-mel input, score targets.
pub fn acoustic_examples<T: Scalar>(
    id: &str,
    mel: &Array2<T>,
    segments: &[(SegmentSpec, ScoreFeatures)],
) -> Vec<Example<T>> {
    mel_blocks(mel, segments)
        .into_iter()
        .zip(segments)
        .enumerate()
        .map(|(i, (block, (_, sf)))| Example::from_input(format!("{id}#{i}"), block, sf))
        .collect()
}

/// Preliminary grids from the acoustic branch, one per segment.
pub fn acoustic_grids<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    mel: &Array2<T>,
    segments: &[(SegmentSpec, ScoreFeatures)],
) -> Result<Vec<VelocityGrid<T>>, ModelError> {
    mel_blocks(mel, segments)
        .iter()
        .map(|b| VelocityGrid::new(model.predict(b)?, GridRole::Preliminary))
        .collect()
}

impl<T: Scalar> PieceData<T> {
    /// Pairs per-segment features with grids cut from a piece-long roll.
    pub fn from_roll(
        id: &str,
        split: Split,
        performance: MidiPerformance,
        roll: &Array2<T>,
        spec: &SegmentSpec,
        scale: VelocityScale,
    ) -> Result<Self, ModelError> {
        let segs = segments(&performance, spec, scale);
        let grids = grids_from_roll(roll, &segs, GridRole::Preliminary)?;
        Ok(Self {
            id: id.to_string(),
            split,
            performance,
            segments: segs.into_iter().map(|(_, sf)| sf).zip(grids).collect(),
        })
    }

    /// The grids of all segments stacked into one piece-long roll.
    pub fn roll(&self) -> Array2<T> {
        let blocks: Vec<Array2<T>> = self.segments.iter().map(|(_, g)| g.values.clone()).collect();
        join_rows(&blocks).unwrap_or_else(|| Array2::zeros((0, crate::models::KEYS)))
    }
}
