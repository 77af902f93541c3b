//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! Criteria 5-7 train real models and take several minutes on one core.

mod support;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use velocorr::dsp::{log_mel, AudioClip, MelConfig};
use velocorr::eval::{EvalReport, MatchConfig};
use velocorr::formats::Split;
use velocorr::models::{
    AcousticConfig, AcousticModel, CorrectionConfig, CorrectionModel, FeatureConfig, OnsetRead, VelocityModel,
};
use velocorr::nn::AdamConfig;
use velocorr::pipeline::{evaluate, examples, synth_pieces, PieceData};
use velocorr::synth::{generate, Degradation, SynthConfig};
use velocorr::trainer::{dataset_loss, train, validate, Outputs, TrainConfig};
use velocorr::VelocityScale;

use support::{gradcheck, oracles};

type Outcome = Result<String, String>;

fn limit(elapsed: Duration, max: Duration) -> Result<(), String> {
    if elapsed <= max {
        Ok(())
    } else {
        Err(format!("took {:.1} s, limit {} s", elapsed.as_secs_f64(), max.as_secs()))
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    for (name, check) in gradcheck::ALL {
        check().map_err(|e| format!("{name}: {e}"))?;
    }
    limit(t0.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{} layer/loss checks x {} instances, relative error < 1e-4",
        gradcheck::ALL.len(),
        gradcheck::INSTANCES
    ))
}

fn score_features() -> Outcome {
    let t0 = Instant::now();
    for seed in 0..1000 {
        oracles::score_feature_identity(seed)?;
    }
    limit(t0.elapsed(), Duration::from_secs(60))?;
    Ok("frame_ex = frame - onset and binary on 1000 performances".into())
}

fn metric_oracle() -> Outcome {
    for seed in 0..500 {
        oracles::matching_agrees(seed)?;
    }
    Ok("500 matchings equal the exhaustive oracle; mae/std equal loop oracles".into())
}

fn midi_round_trip() -> Outcome {
    for seed in 0..200 {
        oracles::midi_round_trip(seed)?;
    }
    Ok("200 performances round-trip within one tick".into())
}

fn desk_train_config(iterations: u64, decay_steps: u64, validate_every: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        seed: 13,
        validate_every,
        adam: AdamConfig {
            base_lr: 3e-3,
            decay_steps,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

const HIDDEN: usize = 32;

fn correction_model(features: FeatureConfig) -> CorrectionModel<f32> {
    let cfg = CorrectionConfig {
        features,
        hidden: HIDDEN,
        ..CorrectionConfig::default()
    };
    CorrectionModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(13))
}

/// What a run produced, for the determinism comparison.
#[derive(PartialEq)]
struct Artifacts {
    checkpoints: Vec<Vec<u8>>,
    reports: Vec<String>,
}

fn overfit_experiment() -> Result<(String, Artifacts), String> {
    let t0 = Instant::now();
    let synth = SynthConfig {
        seed: 13,
        train_pieces: 8,
        val_pieces: 0,
        test_pieces: 0,
        ..SynthConfig::default()
    };
    let pieces = generate(&synth)?;
    let features = FeatureConfig::new(true, false, false);
    let data = examples(&synth_pieces::<f32>(&pieces, Split::Train), &features).map_err(|e| e.to_string())?;
    if data.len() != 8 {
        return Err(format!("expected 8 segments, got {}", data.len()));
    }
    let model = correction_model(features);
    let (loss0, floor) = dataset_loss(&model, &data).map_err(|e| e.to_string())?;
    let cfg = desk_train_config(2000, 500, 200);
    let out = train(model, &data, &data, &cfg, &Outputs::default()).map_err(|e| e.to_string())?;
    let mae = validate(&out.last, &data, synth.scale, OnsetRead::Exact)
        .map_err(|e| e.to_string())?
        .ok_or("no notes")?;
    let (loss1, _) = dataset_loss(&out.last, &data).map_err(|e| e.to_string())?;
    let excess_ratio = (loss1 - floor) / (loss0 - floor);
    let elapsed = t0.elapsed();
    let detail = format!(
        "final train MAE {mae:.3} (< 2.0), excess loss over entropy floor {:.3} -> {:.3} ({:.1}%), {:.0} s",
        loss0 - floor,
        loss1 - floor,
        100.0 * excess_ratio,
        elapsed.as_secs_f64()
    );
    let artifacts = Artifacts {
        checkpoints: vec![out.best_checkpoint, out.last_checkpoint],
        reports: vec![out.state.log_text()],
    };
    if !(mae < 2.0) {
        return Err(detail);
    }
    if !(excess_ratio < 0.1) {
        return Err(format!("loss did not fall below 10% of its initial excess: {detail}"));
    }
    limit(elapsed, Duration::from_secs(600))?;
    Ok((detail, artifacts))
}

struct RowResult {
    name: String,
    report: EvalReport,
}

fn refinement_experiment() -> Result<(String, Artifacts), String> {
    let t0 = Instant::now();
    // Velocity-dependent bias (compression toward the middle with a slight
    // gain loss) plus noise.
    let synth = SynthConfig {
        seed: 13,
        train_pieces: 500,
        val_pieces: 4,
        test_pieces: 8,
        degradation: Degradation {
            noise_sigma: 3.0 / 127.0,
            gain: 0.9,
            compress: 0.6,
            ..Degradation::default()
        },
        ..SynthConfig::default()
    };
    let (train_set, val_set, test_set) = {
        let pieces = generate(&synth)?;
        (
            synth_pieces::<f32>(&pieces, Split::Train),
            synth_pieces::<f32>(&pieces, Split::Val),
            synth_pieces::<f32>(&pieces, Split::Test),
        )
    };
    let m = MatchConfig::default();
    let scale = VelocityScale::Div127;
    let baseline = evaluate("preliminary", &test_set, scale, OnsetRead::Exact, &m).map_err(|e| e.to_string())?;
    let rows = [
        FeatureConfig::new(true, false, false),
        FeatureConfig::new(false, true, false),
        FeatureConfig::new(true, false, true),
    ];
    let cfg = desk_train_config(2000, 1000, 500);
    let mut results = Vec::new();
    let mut artifacts = Artifacts {
        checkpoints: Vec::new(),
        reports: vec![baseline.to_text()],
    };
    for features in rows {
        let tr = examples(&train_set, &features).map_err(|e| e.to_string())?;
        let va = examples(&val_set, &features).map_err(|e| e.to_string())?;
        let out = train(correction_model(features), &tr, &va, &cfg, &Outputs::default())
            .map_err(|e| format!("{features}: {e}"))?;
        drop(tr);
        let refined: Vec<PieceData<f32>> = test_set
            .iter()
            .map(|p| p.refine(&out.best, &features))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let report = evaluate("refined", &refined, scale, OnsetRead::Exact, &m).map_err(|e| e.to_string())?;
        artifacts.checkpoints.push(out.best_checkpoint);
        artifacts.reports.push(report.to_text());
        results.push(RowResult {
            name: features.to_string(),
            report,
        });
    }
    let elapsed = t0.elapsed();
    let best = results.iter().map(|r| r.report.mae).fold(f64::INFINITY, f64::min);
    let mut detail = format!(
        "preliminary MAE {:.3} recall {:.3}",
        baseline.mae, baseline.recall
    );
    for r in &results {
        detail += &format!("; {} MAE {:.3} recall {:.3}", r.name, r.report.mae, r.report.recall);
    }
    detail += &format!("; {:.0} s", elapsed.as_secs_f64());
    let main = &results[0].report;
    let reduction = 1.0 - main.mae / baseline.mae;
    let mut problems = Vec::new();
    if reduction < 0.3 {
        problems.push(format!("audio+onset reduces MAE by {:.1}% (< 30%)", 100.0 * reduction));
    }
    if main.recall <= baseline.recall {
        problems.push("audio+onset recall did not increase".to_string());
    }
    for r in &results {
        if r.report.mae > 1.2 * best {
            problems.push(format!("{} MAE {:.3} not within 20% of best {best:.3}", r.name, r.report.mae));
        }
    }
    if elapsed > Duration::from_secs(1800) {
        problems.push("runtime over 30 min".into());
    }
    if problems.is_empty() {
        Ok((format!("MAE reduction {:.1}%; {detail}", 100.0 * reduction), artifacts))
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

fn shape_contracts() -> Outcome {
    let mel_cfg = MelConfig::default();
    let samples: Vec<f32> = (0..160_160)
        .map(|i| (0.3 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin()) as f32)
        .collect();
    let clip = AudioClip {
        samples,
        sample_rate: 16_000,
    };
    let mel = log_mel::<f32>(&clip, &mel_cfg).map_err(|e| e.to_string())?;
    if mel.values.dim() != (1001, 229) {
        return Err(format!("mel shape {:?}", mel.values.dim()));
    }
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let acoustic = AcousticModel::<f32>::init(AcousticConfig::default(), &mut r).map_err(|e| e.to_string())?;
    let prelim = acoustic.forward(&mel.values).map_err(|e| e.to_string())?;
    if prelim.values.dim() != (1001, 88) {
        return Err(format!("acoustic grid {:?}", prelim.values.dim()));
    }
    let mut widths = Vec::new();
    for features in [FeatureConfig::new(true, false, false), FeatureConfig::new(true, false, true)] {
        let model = CorrectionModel::<f32>::init(
            CorrectionConfig {
                features,
                ..CorrectionConfig::default()
            },
            &mut r,
        );
        widths.push(model.input_width());
        let input = ndarray::Array2::<f32>::zeros((1001, model.input_width()));
        let out = model.forward(&input).map_err(|e| e.to_string())?;
        if out.values.dim() != (1001, 88) {
            return Err(format!("correction grid {:?}", out.values.dim()));
        }
    }
    if widths != [176, 264] {
        return Err(format!("input widths {widths:?}"));
    }
    Ok("10.01 s -> 1001x229 mel; both branches emit 1001x88; widths 176/264".into())
}

fn report(n: u32, name: &str, outcome: &Outcome, elapsed: Duration) -> bool {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(detail) => println!("criterion {n} [{name}]: PASS ({detail}) [{secs:.1} s]"),
        Err(why) => println!("criterion {n} [{name}]: FAIL ({why}) [{secs:.1} s]"),
    }
    outcome.is_ok()
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let t0 = Instant::now();
    let r = f();
    (r, t0.elapsed())
}

fn main() -> ExitCode {
    let mut ok = true;
    let quick: [(u32, &str, fn() -> Outcome); 4] = [
        (1, "gradient suite", gradient_suite),
        (2, "score feature identity", score_features),
        (3, "metric oracle", metric_oracle),
        (4, "MIDI round trip", midi_round_trip),
    ];
    for (n, name, f) in quick {
        let (outcome, t) = timed(f);
        ok &= report(n, name, &outcome, t);
    }

    let (first5, t) = timed(overfit_experiment);
    ok &= report(5, "overfit experiment", &first5.as_ref().map(|r| r.0.clone()).map_err(Clone::clone), t);
    let (first6, t) = timed(refinement_experiment);
    ok &= report(6, "refinement experiment", &first6.as_ref().map(|r| r.0.clone()).map_err(Clone::clone), t);

    let (determinism, t) = timed(|| -> Outcome {
        let a5 = first5.map_err(|e| format!("first overfit run failed: {e}"))?.1;
        let a6 = first6.map_err(|e| format!("first refinement run failed: {e}"))?.1;
        let b5 = overfit_experiment().map_err(|e| format!("repeat overfit run failed: {e}"))?.1;
        let b6 = refinement_experiment().map_err(|e| format!("repeat refinement run failed: {e}"))?.1;
        if a5 != b5 {
            return Err("overfit checkpoints or log differ between runs".into());
        }
        if a6 != b6 {
            return Err("refinement checkpoints or reports differ between runs".into());
        }
        Ok(format!(
            "{} checkpoints and {} reports/logs bit-identical across repeats",
            a5.checkpoints.len() + a6.checkpoints.len(),
            a5.reports.len() + a6.reports.len()
        ))
    });
    ok &= report(7, "determinism", &determinism, t);

    let (shapes, t) = timed(shape_contracts);
    ok &= report(8, "shape contracts", &shapes, t);

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
