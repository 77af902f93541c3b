use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use velocorr::config::Config;
use velocorr::dsp::{log_mel, read_wav, write_wav, SampleFormat};
use velocorr::formats::{
    matrix_to_bytes, read_file, write_file, GridFile, ItemSource, Manifest, ManifestItem, Split,
};
use velocorr::midi::{parse_smf, write_smf, MidiPerformance};
use velocorr::models::{
    map_onset_velocities, AcousticModel, CorrectionConfig, CorrectionModel, VelocityModel,
};
use velocorr::nn::load_checkpoint;
use velocorr::pipeline::{acoustic_examples, acoustic_grids, evaluate, examples, segments, PieceData};
use velocorr::trainer::{self, Outputs, TrainError};
use velocorr::{synth, FeatureConfig, SegmentSpec};

use crate::{Common, Failure, ModelKind, Source};

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::usage(e.to_string())
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    Manifest::load(path).map_err(usage)
}

pub fn gen_synth(common: &Common, out: &Path) -> Result<(), Failure> {
    let cfg = common.load()?;
    let synth_cfg = cfg.synth_config();
    let pieces = synth::generate(&synth_cfg).map_err(Failure::usage)?;
    let mut manifest = Manifest {
        items: Vec::new(),
        base_dir: out.to_path_buf(),
    };
    for p in &pieces {
        let midi = PathBuf::from("midi").join(format!("{}.mid", p.id));
        write_file(&out.join(&midi), &write_smf(&p.performance).map_err(usage)?).map_err(usage)?;
        let mut item = ManifestItem {
            id: p.id.clone(),
            midi,
            audio: None,
            grid: None,
            split: p.split,
        };
        match &p.audio {
            Some(clip) => {
                let wav = PathBuf::from("audio").join(format!("{}.wav", p.id));
                write_file(&out.join(&wav), &write_wav(clip, SampleFormat::Pcm16)).map_err(usage)?;
                item.audio = Some(wav);
            }
            None => {
                let blocks: Vec<Array2<f32>> = p.preliminary.iter().map(|g| g.values.clone()).collect();
                let grid = GridFile {
                    frames_per_second: synth_cfg.segment.frames_per_second,
                    values: velocorr::pipeline::join_rows(&blocks).expect("segments share a width"),
                };
                let path = PathBuf::from("grid").join(format!("{}.vgrd", p.id));
                write_file(&out.join(&path), &grid.to_bytes()).map_err(usage)?;
                item.grid = Some(path);
            }
        }
        manifest.items.push(item);
    }
    write_file(&out.join("manifest.toml"), manifest.to_toml().as_bytes()).map_err(usage)?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes()).map_err(usage)?;
    println!("wrote {} items to {}", manifest.items.len(), out.display());
    Ok(())
}

fn read_score(manifest: &Manifest, item: &ManifestItem) -> Result<MidiPerformance, String> {
    let bytes = read_file(&manifest.resolve(&item.midi)).map_err(|e| e.to_string())?;
    parse_smf(&bytes).map_err(|e| format!("{}: {e}", item.midi.display()))
}

fn read_mel(manifest: &Manifest, item: &ManifestItem, cfg: &Config) -> Result<Array2<f32>, String> {
    let path = item.audio.as_ref().ok_or("item has no audio")?;
    let bytes = read_file(&manifest.resolve(path)).map_err(|e| e.to_string())?;
    let clip = read_wav(&bytes, cfg.mel.sample_rate).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(log_mel::<f32>(&clip, &cfg.mel).map_err(|e| e.to_string())?.values)
}

fn read_grid(manifest: &Manifest, item: &ManifestItem, spec: &SegmentSpec) -> Result<Array2<f32>, String> {
    let path = item.grid.as_ref().ok_or("item has no grid")?;
    let grid = GridFile::from_bytes(&read_file(&manifest.resolve(path)).map_err(|e| e.to_string())?)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    if (grid.frames_per_second - spec.frames_per_second).abs() > 1e-9 || grid.values.ncols() != spec.keys {
        return Err(format!(
            "{}: grid is {} keys at {} fps, configuration expects {} keys at {} fps",
            path.display(),
            grid.values.ncols(),
            grid.frames_per_second,
            spec.keys,
            spec.frames_per_second
        ));
    }
    Ok(grid.values)
}

fn digest_of(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    velocorr::nn::checkpoint::hex(&h.finalize())
}

/// Everything extraction depends on, hashed.
fn item_digest(manifest: &Manifest, item: &ManifestItem, cfg: &Config) -> Result<String, String> {
    let midi = read_file(&manifest.resolve(&item.midi)).map_err(|e| e.to_string())?;
    let source = match (&item.audio, &item.grid) {
        (Some(p), _) | (None, Some(p)) => read_file(&manifest.resolve(p)).map_err(|e| e.to_string())?,
        (None, None) => Vec::new(),
    };
    let settings = serde_json::to_vec(&(&cfg.segment, &cfg.mel, cfg.train.scale)).expect("settings serialize");
    Ok(digest_of(&[&midi, &source, &settings]))
}

fn extract_item(manifest: &Manifest, item: &ManifestItem, cfg: &Config, dir: &Path) -> Result<(), String> {
    let perf = read_score(manifest, item)?;
    for (k, (_, sf)) in segments(&perf, &cfg.segment, cfg.train.scale).iter().enumerate() {
        let mats: [(&str, Array2<f32>); 4] = [
            ("onset", sf.onset.mapv(f32::from)),
            ("frame", sf.frame.mapv(f32::from)),
            ("frame_ex", sf.frame_ex.mapv(f32::from)),
            ("target", sf.target_vel.mapv(|v| v as f32)),
        ];
        for (name, m) in mats {
            write_file(&dir.join(format!("seg{k:03}.{name}.vmat")), &matrix_to_bytes(&m)).map_err(|e| e.to_string())?;
        }
    }
    if matches!(manifest.source(item), ItemSource::Audio(_)) {
        let mel = read_mel(manifest, item, cfg)?;
        write_file(&dir.join("mel.vmat"), &matrix_to_bytes(&mel)).map_err(|e| e.to_string())?;
    }
    Ok(())
}

pub fn extract(common: &Common, manifest_path: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = common.load()?;
    let manifest = load_manifest(manifest_path)?;
    let (mut done, mut cached, mut failed) = (0, 0, 0);
    for item in &manifest.items {
        let dir = out.join(&item.id);
        let stamp = dir.join("digest");
        let result = item_digest(&manifest, item, &cfg).and_then(|digest| {
            if std::fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == digest) {
                return Ok(false);
            }
            let _ = std::fs::remove_dir_all(&dir);
            extract_item(&manifest, item, &cfg, &dir)?;
            write_file(&stamp, digest.as_bytes()).map_err(|e| e.to_string())?;
            Ok(true)
        });
        match result {
            Ok(true) => done += 1,
            Ok(false) => cached += 1,
            Err(e) => {
                warn!("{}: {e}", item.id);
                failed += 1;
            }
        }
    }
    println!("extracted {done}, up to date {cached}, failed {failed}");
    if failed > 0 && failed == manifest.items.len() {
        return Err(Failure::usage("every item failed to extract"));
    }
    Ok(())
}

fn load_into<M: VelocityModel<f32>>(model: &mut M, path: &Path) -> Result<(), Failure> {
    let bytes = read_file(path).map_err(usage)?;
    let ckpt = load_checkpoint(&bytes).map_err(|e| Failure::checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.expect_arch(&model.arch())
        .and_then(|()| ckpt.apply(model))
        .map_err(|e| Failure::checkpoint(format!("{}: {e}", path.display())))
}

fn correction_config(cfg: &Config, features: Option<FeatureConfig>) -> CorrectionConfig {
    CorrectionConfig {
        features: features.unwrap_or(cfg.correction.features),
        ..cfg.correction.clone()
    }
}

fn acoustic_model(cfg: &Config, path: Option<&Path>) -> Result<Option<AcousticModel<f32>>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let mut model = AcousticModel::zeros(cfg.acoustic.clone()).map_err(usage)?;
    load_into(&mut model, path)?;
    Ok(Some(model))
}

/// Score features and preliminary grids for one item.
fn piece(
    manifest: &Manifest,
    item: &ManifestItem,
    cfg: &Config,
    acoustic: Option<&AcousticModel<f32>>,
) -> Result<PieceData<f32>, String> {
    let perf = read_score(manifest, item)?;
    match manifest.source(item) {
        ItemSource::Grid(_) => {
            let roll = read_grid(manifest, item, &cfg.segment)?;
            PieceData::from_roll(&item.id, item.split, perf, &roll, &cfg.segment, cfg.train.scale)
                .map_err(|e| e.to_string())
        }
        ItemSource::Audio(_) => {
            let model = acoustic.ok_or("audio item needs an acoustic checkpoint (--acoustic)")?;
            let segs = segments(&perf, &cfg.segment, cfg.train.scale);
            let grids = acoustic_grids(model, &read_mel(manifest, item, cfg)?, &segs).map_err(|e| e.to_string())?;
            Ok(PieceData {
                id: item.id.clone(),
                split: item.split,
                performance: perf,
                segments: segs.into_iter().map(|(_, sf)| sf).zip(grids).collect(),
            })
        }
    }
}

fn pieces(
    manifest: &Manifest,
    items: &[&ManifestItem],
    cfg: &Config,
    acoustic: Option<&AcousticModel<f32>>,
) -> Vec<PieceData<f32>> {
    items
        .iter()
        .filter_map(|item| match piece(manifest, item, cfg, acoustic) {
            Ok(p) => Some(p),
            Err(e) => {
                warn!("skipping {}: {e}", item.id);
                None
            }
        })
        .collect()
}

fn train_failure(e: TrainError) -> Failure {
    Failure::training(e.to_string())
}

fn report_training<M>(outcome: &trainer::TrainOutcome<M>, out: &Path) {
    match outcome.state.best {
        Some((it, mae)) => println!("best validation MAE: {mae:.4} (iteration {it})"),
        None => println!("best validation MAE: n/a (no validation notes)"),
    }
    println!("checkpoints written to {}", out.display());
}

pub fn train(
    common: &Common,
    manifest_path: &Path,
    model: ModelKind,
    features: Option<FeatureConfig>,
    acoustic: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = common.load()?;
    let manifest = load_manifest(manifest_path)?;
    let train_items: Vec<_> = manifest.split(Split::Train).collect();
    let val_items: Vec<_> = manifest.split(Split::Val).collect();
    let outputs = Outputs::in_dir(out);
    std::fs::create_dir_all(out).map_err(|e| Failure::usage(format!("{}: {e}", out.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    match model {
        ModelKind::Correction => {
            let cc = correction_config(&cfg, features);
            let acoustic = acoustic_model(&cfg, acoustic)?;
            let tr = examples(&pieces(&manifest, &train_items, &cfg, acoustic.as_ref()), &cc.features)
                .map_err(|e| Failure::training(e.to_string()))?;
            let va = examples(&pieces(&manifest, &val_items, &cfg, acoustic.as_ref()), &cc.features)
                .map_err(|e| Failure::training(e.to_string()))?;
            info!("{} training and {} validation segments", tr.len(), va.len());
            let net = CorrectionModel::<f32>::init(cc, &mut rng);
            let outcome = trainer::train(net, &tr, &va, &cfg.train, &outputs).map_err(train_failure)?;
            report_training(&outcome, out);
        }
        ModelKind::Acoustic => {
            let load = |items: &[&ManifestItem]| {
                let mut exs = Vec::new();
                for item in items {
                    if !matches!(manifest.source(item), ItemSource::Audio(_)) {
                        warn!("skipping {}: acoustic training needs audio", item.id);
                        continue;
                    }
                    match read_score(&manifest, item).and_then(|perf| {
                        let segs = segments(&perf, &cfg.segment, cfg.train.scale);
                        Ok(acoustic_examples(&item.id, &read_mel(&manifest, item, &cfg)?, &segs))
                    }) {
                        Ok(e) => exs.extend(e),
                        Err(e) => warn!("skipping {}: {e}", item.id),
                    }
                }
                exs
            };
            let (tr, va) = (load(&train_items), load(&val_items));
            let net = AcousticModel::<f32>::init(cfg.acoustic.clone(), &mut rng).map_err(usage)?;
            let outcome = trainer::train(net, &tr, &va, &cfg.train, &outputs).map_err(train_failure)?;
            report_training(&outcome, out);
        }
    }
    Ok(())
}

/// Note velocities from refined grids; notes owned by no segment keep their
/// score velocity.
fn corrected_performance(p: &PieceData<f32>, cfg: &Config) -> Result<MidiPerformance, Failure> {
    let mut velocities: HashMap<usize, u8> = HashMap::new();
    for (sf, grid) in &p.segments {
        let mapped = map_onset_velocities(grid, sf, cfg.train.scale, cfg.train.onset_read).map_err(usage)?;
        velocities.extend(mapped);
    }
    let mut perf = p.performance.clone();
    for (i, n) in perf.notes.iter_mut().enumerate() {
        match velocities.get(&i) {
            Some(&v) => n.velocity = v.max(1),
            None => warn!("{}: note {i} has no onset cell; velocity left unchanged", p.id),
        }
    }
    Ok(perf)
}

fn refine_all(
    cfg: &Config,
    checkpoint: &Path,
    features: Option<FeatureConfig>,
    data: Vec<PieceData<f32>>,
) -> Result<Vec<PieceData<f32>>, Failure> {
    let cc = correction_config(cfg, features);
    let mut model = CorrectionModel::<f32>::zeros(cc.clone());
    load_into(&mut model, checkpoint)?;
    data.iter()
        .map(|p| p.refine(&model, &cc.features).map_err(usage))
        .collect()
}

pub fn infer(
    common: &Common,
    manifest_path: &Path,
    id: Option<&str>,
    checkpoint: &Path,
    features: Option<FeatureConfig>,
    acoustic: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = common.load()?;
    let manifest = load_manifest(manifest_path)?;
    let items: Vec<&ManifestItem> = match id {
        Some(id) => vec![manifest
            .get(id)
            .ok_or_else(|| Failure::usage(format!("no item {id:?} in manifest")))?],
        None => manifest.items.iter().collect(),
    };
    let acoustic = acoustic_model(&cfg, acoustic)?;
    let data = pieces(&manifest, &items, &cfg, acoustic.as_ref());
    if data.is_empty() {
        return Err(Failure::usage("no usable items"));
    }
    for p in refine_all(&cfg, checkpoint, features, data)? {
        let grid = GridFile {
            frames_per_second: cfg.segment.frames_per_second,
            values: p.roll(),
        };
        write_file(&out.join(format!("{}.vgrd", p.id)), &grid.to_bytes()).map_err(usage)?;
        let perf = corrected_performance(&p, &cfg)?;
        write_file(&out.join(format!("{}.mid", p.id)), &write_smf(&perf).map_err(usage)?).map_err(usage)?;
        println!("{}: {} notes", p.id, perf.notes.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    common: &Common,
    manifest_path: &Path,
    split: Split,
    source: Source,
    checkpoint: Option<&Path>,
    features: Option<FeatureConfig>,
    acoustic: Option<&Path>,
    no_offset: bool,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = common.load()?;
    let manifest = load_manifest(manifest_path)?;
    let items: Vec<_> = manifest.split(split).collect();
    if items.is_empty() {
        return Err(Failure::usage(format!("split {split} is empty")));
    }
    let acoustic = acoustic_model(&cfg, acoustic)?;
    let mut data = pieces(&manifest, &items, &cfg, acoustic.as_ref());
    if data.is_empty() {
        return Err(Failure::usage(format!("no usable items in split {split}")));
    }
    let label = match source {
        Source::Preliminary => "preliminary",
        Source::Refined => {
            let ckpt = checkpoint.ok_or_else(|| Failure::usage("--source refined needs --checkpoint"))?;
            data = refine_all(&cfg, ckpt, features, data)?;
            "refined"
        }
    };
    let mut matching = cfg.matching.clone();
    if no_offset {
        matching.use_offset = false;
    }
    let report = evaluate(label, &data, cfg.train.scale, cfg.train.onset_read, &matching).map_err(usage)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = out {
        write_file(path, text.as_bytes()).map_err(usage)?;
    }
    Ok(())
}
