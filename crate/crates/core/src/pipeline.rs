//! Two-stage training, evaluation orchestration and checkpoint assembly.
//!
//! Stage one trains the autoencoder on intensity + gradient loss while the
//! clusterer fits bottleneck features on the side (detached — no gradient
//! flows through it). Stage two freezes the clusterer, initializes the
//! prototype stage from its export, and trains everything end to end on
//! all four losses. All randomness comes from one seeded generator owned
//! by the loop; batch members are processed in parallel but reduced in
//! index order, so results do not depend on thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::autoencoder::{predict, AeState};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{Ablation, Config};
use crate::data::{DatasetManifest, Split, VideoMeta};
use crate::error::PipelineError;
use crate::loss::{
    compaction_from_matches, separation_from_matches, total_loss, LossReport, LossTerms,
};
use crate::optim::{cosine_lr, Adam};
use crate::prototype::{PrototypeConfig, PrototypeNet};
use crate::scoring::{anomaly_scores, frame_auc, psnr, to_unit_range, VideoScores};
use crate::som::{AcResult, SomClusterer};
use crate::tape::{GradBuffer, Session};
use crate::tensor::{ParamStore, Tensor};

// ---------------------------------------------------------------------------
// frame cache

/// All frames of one split held in memory, normalized to [-1, 1].
pub struct FrameCache {
    pub videos: Vec<VideoMeta>,
    frames: Vec<Vec<Tensor<f32>>>,
    size: usize,
}

impl FrameCache {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self, PipelineError> {
        let videos: Vec<VideoMeta> =
            manifest.videos.iter().filter(|v| v.split == split).cloned().collect();
        let frames = videos
            .par_iter()
            .map(|v| {
                (0..v.frame_count)
                    .map(|t| crate::data::load_frame(manifest, v, t))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { videos, frames, size: manifest.frame_size })
    }

    /// Stacks frames `t-n..t-1` as the window with frame `t` as target.
    pub fn window(&self, video: usize, t: usize, in_frames: usize) -> (Tensor<f32>, Tensor<f32>) {
        let s = self.size;
        let mut window = Tensor::zeros(&[in_frames, s, s]);
        for (slot, src) in (t - in_frames..t).enumerate() {
            window.data_mut()[slot * s * s..(slot + 1) * s * s]
                .copy_from_slice(self.frames[video][src].data());
        }
        (window, self.frames[video][t].clone())
    }

    pub fn frame(&self, video: usize, t: usize) -> &Tensor<f32> {
        &self.frames[video][t]
    }

    fn window_index(&self, in_frames: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (vi, v) in self.videos.iter().enumerate() {
            for t in in_frames..v.frame_count {
                out.push((vi, t));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// batch step

struct WindowResult {
    grads: GradBuffer<f32>,
    report: LossReport,
    feature_map: Option<Tensor<f32>>,
}

/// Forward/backward for one batch; per-window gradients are scaled by
/// 1/batch and merged in index order.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    store: &ParamStore<f32>,
    ae: &AeState,
    proto: Option<&PrototypeNet>,
    cache: &FrameCache,
    batch: &[(usize, usize)],
    cfg: &Config,
    with_proto_losses: bool,
    want_features: bool,
) -> Result<(GradBuffer<f32>, LossReport, Vec<Tensor<f32>>), PipelineError> {
    let scale = 1.0 / batch.len() as f64;
    let results: Vec<Result<WindowResult, PipelineError>> = batch
        .par_iter()
        .map(|&(vi, t)| {
            let (window, target) = cache.window(vi, t, cfg.ae.in_frames);
            let mut sess = Session::new(store);
            let w = sess.tape.leaf(window);
            let out = predict(&mut sess, w, ae, proto)?;
            let intensity = sess.tape.mse_loss(out.prediction, &target)?;
            let gradient = sess.tape.gradient_loss(out.prediction, &target)?;
            let (compaction, separation) = match (&out.proto, with_proto_losses) {
                (Some(po), true) => {
                    let sites = out.sites.expect("sites accompany prototype output");
                    let cp = compaction_from_matches(&mut sess.tape, sites, po.p, po.w)?;
                    let sp = separation_from_matches(
                        &mut sess.tape,
                        sites,
                        po.p,
                        po.w,
                        cfg.loss.margin,
                    )?;
                    (Some(cp), sp)
                }
                _ => (None, None),
            };
            let terms = LossTerms { intensity, gradient, compaction, separation };
            let (total, report) = total_loss(&mut sess.tape, &terms, &cfg.loss)?;
            let mut grads = GradBuffer::zeros_like(store);
            sess.backprop_into(total, scale, &mut grads)?;
            let feature_map =
                want_features.then(|| sess.tape.value(out.feature_map).clone());
            Ok(WindowResult { grads, report, feature_map })
        })
        .collect();

    let mut merged = GradBuffer::zeros_like(store);
    let mut report = LossReport::default();
    let mut features = Vec::new();
    for r in results {
        let r = r?;
        merged.merge(&r.grads);
        report.intensity += r.report.intensity * scale;
        report.gradient += r.report.gradient * scale;
        report.compaction += r.report.compaction * scale;
        report.separation += r.report.separation * scale;
        report.total += r.report.total * scale;
        if let Some(f) = r.feature_map {
            features.push(f);
        }
    }
    Ok((merged, report, features))
}

fn log_line(log: &mut String, epoch: usize, step: u64, r: &LossReport) {
    let _ = writeln!(
        log,
        "{epoch},{step},{},{},{},{},{}",
        r.intensity, r.gradient, r.compaction, r.separation, r.total
    );
}

fn flush_log(path: &Path, log: &mut String) -> Result<(), PipelineError> {
    use std::io::Write;
    if log.is_empty() {
        return Ok(());
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))?;
    f.write_all(log.as_bytes()).map_err(|e| PipelineError::io(path, e))?;
    log.clear();
    Ok(())
}

pub fn train_log_path(out: &Path) -> PathBuf {
    out.with_extension("log.csv")
}

fn init_log(out: &Path) -> Result<PathBuf, PipelineError> {
    let path = train_log_path(out);
    fs::write(&path, "epoch,step,intensity,gradient,compaction,separation,total\n")
        .map_err(|e| PipelineError::io(&path, e))?;
    Ok(path)
}


/// Non-finite losses are divergence, not programmer error: remap them so
/// the CLI exits 4 and points at the last good checkpoint.
fn divergence_guard(
    err: PipelineError,
    stage: &str,
    step: u64,
    last_good: Option<PathBuf>,
) -> PipelineError {
    match err {
        PipelineError::Diff(crate::error::DiffError::NonFinite(what)) => {
            PipelineError::Divergence {
                detail: format!("{what} at {stage} step {step}"),
                last_good,
            }
        }
        other => other,
    }
}

// ---------------------------------------------------------------------------
// checkpoint assembly

fn rng_state(rng: &ChaCha20Rng) -> ([u8; 32], u128) {
    (rng.get_seed(), rng.get_word_pos())
}

fn rng_from_state(seed: [u8; 32], word_pos: u128) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    rng
}

#[allow(clippy::too_many_arguments)]
fn assemble_checkpoint(
    stage: &str,
    ablation: Ablation,
    cfg: &Config,
    epochs_done: usize,
    global_step: u64,
    store: &ParamStore<f32>,
    adam: &Adam<f32>,
    som: Option<&SomClusterer<f32>>,
    ac: Option<&AcResult<f32>>,
    proto_kept: Option<usize>,
    rng: &ChaCha20Rng,
) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    let mut counters = BTreeMap::new();
    for (id, name, p) in store.iter() {
        tensors.insert(format!("param.{name}"), p.value.clone());
        let (m, v, _) = adam.moments();
        tensors.insert(format!("adam.m.{name}"), m[id.0].clone());
        tensors.insert(format!("adam.v.{name}"), v[id.0].clone());
    }
    let mut som_step = 0;
    if let Some(som) = som {
        tensors.insert("som.weights".into(), som.weights().clone());
        counters.insert("som.win_counts".into(), som.win_counts().to_vec());
        som_step = som.step_count();
    }
    if let Some(ac) = ac {
        tensors.insert("ac.centers".into(), ac.centers.clone());
        counters.insert("ac.win_counts".into(), ac.win_counts.clone());
    }
    let (rng_seed, rng_word_pos) = rng_state(rng);
    Checkpoint {
        meta: CheckpointMeta {
            stage: stage.into(),
            ablation: ablation.as_string(),
            epochs_done,
            global_step,
            adam_step: adam.moments().2,
            som_step,
            ac_m: ac.map(|a| a.m),
            proto_kept,
            config: cfg.clone(),
        },
        rng_seed,
        rng_word_pos,
        counters,
        tensors,
    }
}

/// Rebuilds the parameter store from a checkpoint, names sorted, and the
/// optimizer moments aligned to it.
fn restore_store(ckpt: &Checkpoint) -> Result<(ParamStore<f32>, Adam<f32>), PipelineError> {
    let mut store = ParamStore::new();
    for (name, t) in &ckpt.tensors {
        if let Some(stripped) = name.strip_prefix("param.") {
            store.register(stripped, t.clone());
        }
    }
    if store.is_empty() {
        return Err(PipelineError::config("checkpoint holds no parameters"));
    }
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id).to_string();
        let shape = store.get(id).value.shape().to_vec();
        m.push(
            ckpt.tensors
                .get(&format!("adam.m.{name}"))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&shape)),
        );
        v.push(
            ckpt.tensors
                .get(&format!("adam.v.{name}"))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&shape)),
        );
    }
    let adam = Adam::from_state(ckpt.meta.config.adam, m, v, ckpt.meta.adam_step);
    Ok((store, adam))
}

fn ac_from_checkpoint(ckpt: &Checkpoint) -> Option<AcResult<f32>> {
    let centers = ckpt.tensors.get("ac.centers")?.clone();
    let win_counts = ckpt.counters.get("ac.win_counts")?.clone();
    let m = ckpt.meta.ac_m?;
    Some(AcResult { m, centers, win_counts })
}

// ---------------------------------------------------------------------------
// stage one

/// Autoencoder pre-training with online pre-clustering. Writes a
/// checkpoint after every epoch; the cluster-count estimate uses the z
/// values from the final epoch, when the map has converged.
pub fn pretrain(
    cfg: &Config,
    manifest: &DatasetManifest,
    out: &Path,
) -> Result<Checkpoint, PipelineError> {
    let mut cfg = cfg.clone();
    cfg.ae.frame_size = manifest.frame_size; // data defines geometry
    cfg.validate()?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let ae = AeState::init(cfg.ae, &mut store, &mut rng)?;
    let mut adam = Adam::new(cfg.adam, &store);
    let mut som = if cfg.som.enabled {
        Some(
            SomClusterer::<f32>::new(cfg.ae.feat_channels, cfg.som.params(), &mut rng)
                .map_err(|e| PipelineError::config(e.to_string()))?,
        )
    } else {
        None
    };

    let cache = FrameCache::load(manifest, Split::Train)?;
    if cache.videos.is_empty() {
        return Err(PipelineError::Data(crate::error::DataError::Manifest(
            "train split is empty".into(),
        )));
    }
    let windows = cache.window_index(cfg.ae.in_frames);
    let batches_per_epoch = windows.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.stage1_epochs * batches_per_epoch) as u64;

    let log_path = init_log(out)?;
    let mut log = String::new();
    let mut z_values: Vec<usize> = Vec::new();
    let mut step = 0u64;
    let mut wrote_epoch = false;

    for epoch in 0..cfg.stage1_epochs {
        let mut order = windows.clone();
        order.shuffle(&mut rng);
        let final_epoch = epoch + 1 == cfg.stage1_epochs;
        if final_epoch {
            z_values.clear();
        }
        for batch in order.chunks(cfg.batch_size) {
            let (grads, report, features) =
                batch_step(&store, &ae, None, &cache, batch, &cfg, false, som.is_some())
                    .map_err(|e| {
                        divergence_guard(e, "stage 1", step, wrote_epoch.then(|| out.to_path_buf()))
                    })?;
            if !report.total.is_finite() {
                return Err(PipelineError::Divergence {
                    detail: format!("non-finite loss at stage 1 step {step}"),
                    last_good: wrote_epoch.then(|| out.to_path_buf()),
                });
            }
            grads.apply_to(&mut store);
            adam.step(&mut store, cosine_lr(cfg.lr0, step, total_steps));
            store.zero_grads();
            if let Some(som) = som.as_mut() {
                for f in &features {
                    let z = som
                        .fit_feature_map(f, &mut rng)
                        .map_err(|e| PipelineError::config(e.to_string()))?;
                    z_values.push(z);
                }
            }
            log_line(&mut log, epoch, step, &report);
            step += 1;
        }
        flush_log(&log_path, &mut log)?;

        let ac = match som.as_ref() {
            Some(s) if !z_values.is_empty() => Some(
                s.export_centers(&z_values)
                    .map_err(|e| PipelineError::config(e.to_string()))?,
            ),
            _ => None,
        };
        let ckpt = assemble_checkpoint(
            "pretrain",
            Ablation::None,
            &cfg,
            epoch + 1,
            step,
            &store,
            &adam,
            som.as_ref(),
            ac.as_ref(),
            None,
            &rng,
        );
        ckpt.save(out)?;
        wrote_epoch = true;
        log::info!("stage1 epoch {}/{} done", epoch + 1, cfg.stage1_epochs);
    }

    Checkpoint::load(out)
}

// ---------------------------------------------------------------------------
// stage two

fn build_prototype(
    ablation: Ablation,
    cfg: &Config,
    ac: Option<&AcResult<f32>>,
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha20Rng,
) -> Result<Option<PrototypeNet>, PipelineError> {
    let pcfg = PrototypeConfig { alpha: cfg.proto.alpha, proj_noise: cfg.proto.proj_noise };
    let need_ac = || {
        ac.ok_or_else(|| {
            PipelineError::config(
                "this ablation needs pre-clustering output, but the checkpoint has none \
                 (was stage 1 run with som.enabled = false?)",
            )
        })
    };
    let d = cfg.ae.feat_channels;
    match ablation {
        Ablation::NoDlan => Ok(None),
        Ablation::None => {
            let ac = need_ac()?;
            Ok(Some(PrototypeNet::init_from_ac(store, ac, pcfg, rng)?))
        }
        Ablation::NoDrcs => {
            let ac = need_ac()?;
            let all = AcResult {
                m: ac.centers.shape()[0],
                centers: ac.centers.clone(),
                win_counts: ac.win_counts.clone(),
            };
            Ok(Some(PrototypeNet::init_from_ac(store, &all, pcfg, rng)?))
        }
        Ablation::RandInit => {
            let ac = need_ac()?;
            let l = ac.centers.shape()[0];
            Ok(Some(PrototypeNet::init_random(store, l, ac.m, d, pcfg, rng)?))
        }
        Ablation::NoAc => Ok(Some(PrototypeNet::init_random(store, 10, 10, d, pcfg, rng)?)),
        Ablation::FixedM(n) => Ok(Some(PrototypeNet::init_random(store, n, n, d, pcfg, rng)?)),
    }
}

/// Formal training: prototype stage initialized from the pre-clustering
/// export, all four losses, fresh optimizer and cosine schedule. Resuming
/// from a stage-two checkpoint continues bit-exactly from its epoch
/// boundary.
pub fn train(
    cfg_in: &Config,
    manifest: &DatasetManifest,
    pre: &Checkpoint,
    ablation: Ablation,
    out: &Path,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint, PipelineError> {
    train_until(cfg_in, manifest, pre, ablation, out, resume, None)
}

/// As [`train`], but stops after `stop_after` epochs when given (the
/// learning-rate schedule still spans the configured epoch budget). The
/// written checkpoint is exactly the state an interrupted run leaves
/// behind, ready for `--resume`.
#[allow(clippy::too_many_arguments)]
pub fn train_until(
    cfg_in: &Config,
    manifest: &DatasetManifest,
    pre: &Checkpoint,
    ablation: Ablation,
    out: &Path,
    resume: Option<&Checkpoint>,
    stop_after: Option<usize>,
) -> Result<Checkpoint, PipelineError> {
    let mut cfg = cfg_in.clone();
    cfg.ae = pre.meta.config.ae; // geometry is fixed by the pretrained model
    cfg.validate()?;
    if manifest.frame_size != cfg.ae.frame_size {
        return Err(PipelineError::config(format!(
            "dataset frames are {}px but the pretrained model expects {}px",
            manifest.frame_size, cfg.ae.frame_size
        )));
    }

    let cache = FrameCache::load(manifest, Split::Train)?;
    let windows = cache.window_index(cfg.ae.in_frames);
    let batches_per_epoch = windows.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.stage2_epochs * batches_per_epoch) as u64;

    let (mut store, mut adam, mut rng, proto, ae, start_epoch, mut step);
    match resume {
        Some(ck) => {
            if ck.meta.stage != "train" {
                return Err(PipelineError::config(format!(
                    "resume checkpoint is from stage '{}', expected 'train'",
                    ck.meta.stage
                )));
            }
            let restored = restore_store(ck)?;
            store = restored.0;
            adam = restored.1;
            rng = rng_from_state(ck.rng_seed, ck.rng_word_pos);
            ae = AeState::from_store(cfg.ae, &store)?;
            proto = match ck.meta.proto_kept {
                Some(kept) => Some(PrototypeNet::from_store(&store, kept)?),
                None => None,
            };
            start_epoch = ck.meta.epochs_done;
            step = ck.meta.global_step;
        }
        None => {
            if pre.meta.stage != "pretrain" {
                return Err(PipelineError::config(format!(
                    "--pre checkpoint is from stage '{}', expected 'pretrain'",
                    pre.meta.stage
                )));
            }
            let restored = restore_store(pre)?;
            store = restored.0;
            rng = rng_from_state(pre.rng_seed, pre.rng_word_pos);
            ae = AeState::from_store(cfg.ae, &store)?;
            let ac = ac_from_checkpoint(pre);
            proto = build_prototype(ablation, &cfg, ac.as_ref(), &mut store, &mut rng)?;
            adam = Adam::new(cfg.adam, &store); // fresh schedule for the stage
            start_epoch = 0;
            step = 0;
        }
    }

    let log_path = if resume.is_some() { train_log_path(out) } else { init_log(out)? };
    let mut log = String::new();
    let mut wrote_epoch = resume.is_some();
    let with_proto_losses = proto.is_some();

    let stop_at = stop_after.unwrap_or(cfg.stage2_epochs).min(cfg.stage2_epochs);
    for epoch in start_epoch..stop_at {
        let mut order = windows.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (grads, report, _) = batch_step(
                &store,
                &ae,
                proto.as_ref(),
                &cache,
                batch,
                &cfg,
                with_proto_losses,
                false,
            )
            .map_err(|e| {
                divergence_guard(e, "stage 2", step, wrote_epoch.then(|| out.to_path_buf()))
            })?;
            if !report.total.is_finite() {
                return Err(PipelineError::Divergence {
                    detail: format!("non-finite loss at stage 2 step {step}"),
                    last_good: wrote_epoch.then(|| out.to_path_buf()),
                });
            }
            grads.apply_to(&mut store);
            adam.step(&mut store, cosine_lr(cfg.lr0, step, total_steps));
            store.zero_grads();
            log_line(&mut log, epoch, step, &report);
            step += 1;
        }
        flush_log(&log_path, &mut log)?;

        let ckpt = assemble_checkpoint(
            "train",
            ablation,
            &cfg,
            epoch + 1,
            step,
            &store,
            &adam,
            None,
            ac_from_checkpoint(pre).as_ref(),
            proto.as_ref().map(|p| p.kept()),
            &rng,
        );
        ckpt.save(out)?;
        wrote_epoch = true;
    }

    Checkpoint::load(out)
}

// ---------------------------------------------------------------------------
// evaluation

/// A model rebuilt from a checkpoint, ready for inference.
pub struct LoadedModel {
    pub store: ParamStore<f32>,
    pub ae: AeState,
    pub proto: Option<PrototypeNet>,
    pub cfg: Config,
}

impl LoadedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PipelineError> {
        let (store, _) = restore_store(ckpt)?;
        let cfg = ckpt.meta.config.clone();
        let ae = AeState::from_store(cfg.ae, &store)?;
        let proto = match ckpt.meta.proto_kept {
            Some(kept) => Some(PrototypeNet::from_store(&store, kept)?),
            None => None,
        };
        Ok(Self { store, ae, proto, cfg })
    }

    /// Predicts frame `t` of a frame sequence (needs `in_frames` history).
    pub fn predict_frame(&self, frames: &[Tensor<f32>], t: usize) -> Result<Tensor<f32>, PipelineError> {
        let n = self.cfg.ae.in_frames;
        let s = self.cfg.ae.frame_size;
        let mut window = Tensor::zeros(&[n, s, s]);
        for (slot, src) in (t - n..t).enumerate() {
            window.data_mut()[slot * s * s..(slot + 1) * s * s]
                .copy_from_slice(frames[src].data());
        }
        let mut sess = Session::new(&self.store);
        let w = sess.tape.leaf(window);
        let out = predict(&mut sess, w, &self.ae, self.proto.as_ref())?;
        Ok(sess.tape.value(out.prediction).clone())
    }
}

/// Scores one video's frames: PSNR per predicted frame, then the
/// order-reversing per-video normalization.
pub fn score_frames(
    model: &LoadedModel,
    frames: &[Tensor<f32>],
    video_id: &str,
    labels: &[u8],
) -> Result<VideoScores, PipelineError> {
    let n = self_frames(model);
    if frames.len() <= n {
        return Err(PipelineError::Eval(format!(
            "video {video_id} has {} frames, need more than {n}",
            frames.len()
        )));
    }
    let psnr_vec: Vec<f64> = (n..frames.len())
        .into_par_iter()
        .map(|t| {
            let pred = model.predict_frame(frames, t)?;
            Ok(psnr(&to_unit_range(&frames[t]), &to_unit_range(&pred), model.cfg.psnr_peak))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let score = anomaly_scores(&psnr_vec);
    let labels = if labels.is_empty() { vec![0; psnr_vec.len()] } else { labels[n..].to_vec() };
    Ok(VideoScores {
        video_id: video_id.to_string(),
        start_frame: n,
        psnr: psnr_vec,
        score,
        labels,
    })
}

fn self_frames(model: &LoadedModel) -> usize {
    model.cfg.ae.in_frames
}

/// Runs the model over every test video and reports frame-level AUC over
/// the concatenated scores. Optionally writes per-video CSV + SVG reports.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    report_dir: Option<&Path>,
) -> Result<(f64, Vec<VideoScores>), PipelineError> {
    let model = LoadedModel::from_checkpoint(ckpt)?;
    if manifest.frame_size != model.cfg.ae.frame_size {
        return Err(PipelineError::config(format!(
            "dataset frames are {}px but the model expects {}px",
            manifest.frame_size, model.cfg.ae.frame_size
        )));
    }
    let cache = FrameCache::load(manifest, Split::Test)?;
    if cache.videos.is_empty() {
        return Err(PipelineError::Eval("test split is empty".into()));
    }
    let mut all = Vec::new();
    for (vi, v) in cache.videos.iter().enumerate() {
        let scores = score_frames(&model, &cache.frames[vi], &v.id, &v.labels())?;
        all.push(scores);
    }
    let auc = frame_auc(&all)?;

    if let Some(dir) = report_dir {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        for v in &all {
            crate::scoring::write_scores_csv(v, &dir.join(format!("{}.csv", v.video_id)))?;
            let svg = crate::scoring::render_score_svg(v);
            let p = dir.join(format!("{}.svg", v.video_id));
            fs::write(&p, svg).map_err(|e| PipelineError::io(&p, e))?;
        }
        let p = dir.join("auc.txt");
        fs::write(&p, format!("{auc}\n")).map_err(|e| PipelineError::io(&p, e))?;
    }
    Ok((auc, all))
}

/// Scores a bare directory of `frame_*.pgm` files (no manifest, no labels).
pub fn score_video_dir(ckpt: &Checkpoint, dir: &Path) -> Result<VideoScores, PipelineError> {
    let model = LoadedModel::from_checkpoint(ckpt)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().map(|x| x == "pgm").unwrap_or(false)
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("frame_"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::Eval(format!("no frame_*.pgm files in {}", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| {
            let (w, h, px) = crate::data::read_pgm(p)?;
            if w != h || w != model.cfg.ae.frame_size {
                return Err(crate::error::DataError::Manifest(format!(
                    "{}: frame is {w}x{h}, model expects {}",
                    p.display(),
                    model.cfg.ae.frame_size
                )));
            }
            Ok(crate::data::pixels_to_tensor(&px, w))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or("video").to_string();
    score_frames(&model, &frames, &id, &[])
}

/// Convenience wrapper used by tests: full generate -> pretrain -> train ->
/// evaluate round trip in a directory.
pub fn run_end_to_end(
    cfg: &Config,
    root: &Path,
    ablation: Ablation,
) -> Result<(f64, PathBuf), PipelineError> {
    let data_dir = root.join("data");
    let manifest = if data_dir.join(crate::data::MANIFEST_NAME).exists() {
        DatasetManifest::load(&data_dir)?
    } else {
        crate::data::generate_synthetic(&cfg.data, &data_dir)?
    };
    let pre_path = root.join("pretrain.ckpt");
    let pre = pretrain(cfg, &manifest, &pre_path)?;
    let train_path = root.join(format!("train-{}.ckpt", ablation.as_string()));
    let final_ckpt = train(cfg, &manifest, &pre, ablation, &train_path, None)?;
    let (auc, _) = evaluate(&final_ckpt, &manifest, None)?;
    Ok((auc, train_path))
}
