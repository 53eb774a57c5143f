//! Synthetic video data, frame I/O and dataset manifests.
//!
//! Layout on disk:
//!   root/manifest
//!   root/{train|test}/video_XXXX/frame_XXXXXX.pgm
//!
//! Frames are 8-bit binary PGM (P5), square. The manifest is line
//! oriented; grammar in the README. Training videos are normal-only; test
//! videos carry inclusive anomaly intervals that label every frame.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::DataError;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoMeta {
    pub id: String,
    pub split: Split,
    pub frame_count: usize,
    /// Inclusive anomalous frame intervals; empty for train videos.
    pub label_runs: Vec<(usize, usize)>,
}

impl VideoMeta {
    /// Per-frame 0/1 labels expanded from the runs.
    pub fn labels(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.frame_count];
        for &(s, e) in &self.label_runs {
            for l in out.iter_mut().take(e + 1).skip(s) {
                *l = 1;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub frame_size: usize,
    pub videos: Vec<VideoMeta>,
}

impl DatasetManifest {
    pub fn train_videos(&self) -> impl Iterator<Item = &VideoMeta> {
        self.videos.iter().filter(|v| v.split == Split::Train)
    }

    pub fn test_videos(&self) -> impl Iterator<Item = &VideoMeta> {
        self.videos.iter().filter(|v| v.split == Split::Test)
    }

    pub fn video(&self, id: &str) -> Option<&VideoMeta> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn frame_path(&self, video: &VideoMeta, t: usize) -> PathBuf {
        self.root.join(video.split.dir()).join(&video.id).join(format!("frame_{t:06}.pgm"))
    }

    fn validate(&self) -> Result<(), DataError> {
        for v in &self.videos {
            if v.split == Split::Train && !v.label_runs.is_empty() {
                return Err(DataError::Manifest(format!(
                    "train video {} must not carry anomaly labels",
                    v.id
                )));
            }
            for &(s, e) in &v.label_runs {
                if s > e || e >= v.frame_count {
                    return Err(DataError::Manifest(format!(
                        "video {}: label run {s}-{e} outside 0..{}",
                        v.id, v.frame_count
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str("version 1\n");
        out.push_str(&format!("frame_size {}\n", self.frame_size));
        for v in &self.videos {
            let runs = v
                .label_runs
                .iter()
                .map(|(s, e)| format!("{s}-{e}"))
                .collect::<Vec<_>>()
                .join(",");
            if runs.is_empty() {
                out.push_str(&format!("video {} {} {}\n", v.split.dir(), v.id, v.frame_count));
            } else {
                out.push_str(&format!(
                    "video {} {} {} {}\n",
                    v.split.dir(),
                    v.id,
                    v.frame_count,
                    runs
                ));
            }
        }
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, out).map_err(|e| DataError::io(path, e))
    }

    pub fn load(root: &Path) -> Result<Self, DataError> {
        let path = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let mut frame_size = None;
        let mut videos = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let bad = |detail: String| DataError::Manifest(format!("line {}: {detail}", ln + 1));
            match key {
                "version" => {
                    let v = parts.next().ok_or_else(|| bad("missing version".into()))?;
                    if v != "1" {
                        return Err(bad(format!("unsupported manifest version {v}")));
                    }
                }
                "frame_size" => {
                    let v = parts.next().ok_or_else(|| bad("missing frame_size".into()))?;
                    frame_size =
                        Some(v.parse::<usize>().map_err(|_| bad(format!("bad frame_size {v}")))?);
                }
                "video" => {
                    let split = match parts.next() {
                        Some("train") => Split::Train,
                        Some("test") => Split::Test,
                        other => return Err(bad(format!("bad split {other:?}"))),
                    };
                    let id = parts.next().ok_or_else(|| bad("missing video id".into()))?.to_string();
                    let count_str =
                        parts.next().ok_or_else(|| bad("missing frame count".into()))?;
                    let frame_count = count_str
                        .parse::<usize>()
                        .map_err(|_| bad(format!("bad frame count {count_str}")))?;
                    let mut label_runs = Vec::new();
                    if let Some(runs) = parts.next() {
                        for run in runs.split(',') {
                            let (s, e) = run
                                .split_once('-')
                                .ok_or_else(|| bad(format!("bad label run {run}")))?;
                            let s = s.parse().map_err(|_| bad(format!("bad run start {s}")))?;
                            let e = e.parse().map_err(|_| bad(format!("bad run end {e}")))?;
                            label_runs.push((s, e));
                        }
                    }
                    videos.push(VideoMeta { id, split, frame_count, label_runs });
                }
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        let manifest = DatasetManifest {
            root: root.to_path_buf(),
            frame_size: frame_size
                .ok_or_else(|| DataError::Manifest("missing frame_size".into()))?,
            videos,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

// ---------------------------------------------------------------------------
// PGM (P5)

pub fn write_pgm(path: &Path, size: usize, pixels: &[u8]) -> Result<(), DataError> {
    debug_assert_eq!(pixels.len(), size * size);
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// Reads a binary (P5) PGM. Header comments are allowed; parse failures
/// report the byte offset.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DataError::io(path, e))?;
    let mut pos = 0usize;
    let err = |pos: usize, detail: &str| DataError::Parse {
        path: path.to_path_buf(),
        offset: pos,
        detail: detail.to_string(),
    };

    let next_token = |pos: &mut usize| -> Result<String, DataError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(err(0, &format!("expected P5 magic, got {magic}")));
    }
    let w: usize = {
        let t = next_token(&mut pos)?;
        t.parse().map_err(|_| err(pos, &format!("bad width {t}")))?
    };
    let h: usize = {
        let t = next_token(&mut pos)?;
        t.parse().map_err(|_| err(pos, &format!("bad height {t}")))?
    };
    let maxval: usize = {
        let t = next_token(&mut pos)?;
        t.parse().map_err(|_| err(pos, &format!("bad maxval {t}")))?
    };
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, &format!("maxval {maxval} outside 8-bit range")));
    }
    // single whitespace byte separates header from payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "missing header terminator"));
    }
    pos += 1;
    let need = w * h;
    if bytes.len() - pos < need {
        return Err(err(bytes.len(), &format!(
            "truncated payload: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Loads one frame as a `(1, S, S)` tensor in [-1, 1].
pub fn load_frame(
    manifest: &DatasetManifest,
    video: &VideoMeta,
    t: usize,
) -> Result<Tensor<f32>, DataError> {
    if t >= video.frame_count {
        return Err(DataError::IndexOutOfRange {
            video: video.id.clone(),
            t,
            frames: video.frame_count,
        });
    }
    let path = manifest.frame_path(video, t);
    let (w, h, pixels) = read_pgm(&path)?;
    if w != manifest.frame_size || h != manifest.frame_size {
        return Err(DataError::Manifest(format!(
            "{}: frame {t} is {w}x{h}, manifest says {}",
            video.id, manifest.frame_size
        )));
    }
    Ok(pixels_to_tensor(&pixels, w))
}

pub fn pixels_to_tensor(pixels: &[u8], size: usize) -> Tensor<f32> {
    Tensor::from_fn(&[1, size, size], |i| pixels[i] as f32 / 255.0 * 2.0 - 1.0)
}

/// Frames `t-4..t-1` stacked on channels plus frame `t` as the target.
pub fn load_window(
    manifest: &DatasetManifest,
    video: &VideoMeta,
    t: usize,
    in_frames: usize,
) -> Result<(Tensor<f32>, Tensor<f32>), DataError> {
    if t < in_frames || t >= video.frame_count {
        return Err(DataError::IndexOutOfRange {
            video: video.id.clone(),
            t,
            frames: video.frame_count,
        });
    }
    let s = manifest.frame_size;
    let mut window = Tensor::zeros(&[in_frames, s, s]);
    for (slot, src_t) in (t - in_frames..t).enumerate() {
        let frame = load_frame(manifest, video, src_t)?;
        window.data_mut()[slot * s * s..(slot + 1) * s * s].copy_from_slice(frame.data());
    }
    let target = load_frame(manifest, video, t)?;
    Ok((window, target))
}

// ---------------------------------------------------------------------------
// synthetic generation

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    FastSprite,
    ShapeChange,
    NewObject,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train_videos: usize,
    pub n_test_videos: usize,
    pub frames_per_video: usize,
    pub frame_size: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub normal_speed: (f64, f64),
    pub anomaly_speed_factor: f64,
    pub anomaly_types: Vec<AnomalyKind>,
    /// Target fraction of anomalous frames per test video.
    pub anomaly_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train_videos: 8,
            n_test_videos: 4,
            frames_per_video: 200,
            frame_size: 64,
            min_sprites: 1,
            max_sprites: 3,
            normal_speed: (0.8, 1.6),
            anomaly_speed_factor: 3.5,
            anomaly_types: vec![
                AnomalyKind::FastSprite,
                AnomalyKind::ShapeChange,
                AnomalyKind::NewObject,
            ],
            anomaly_rate: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn small() -> Self {
        Self {
            n_train_videos: 4,
            n_test_videos: 2,
            frames_per_video: 120,
            frame_size: 48,
            max_sprites: 2,
            anomaly_rate: 0.35,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.normal_speed.0 <= 0.0 || self.normal_speed.1 < self.normal_speed.0 {
            return Err(DataError::Config("normal_speed range must be positive".into()));
        }
        if self.min_sprites == 0 || self.max_sprites < self.min_sprites {
            return Err(DataError::Config("sprite count range invalid".into()));
        }
        if self.frames_per_video < 16 || self.frame_size < 16 {
            return Err(DataError::Config("videos too small to animate".into()));
        }
        if !(0.0..=0.8).contains(&self.anomaly_rate) {
            return Err(DataError::Config("anomaly_rate outside [0, 0.8]".into()));
        }
        if self.anomaly_rate > 0.0 && self.anomaly_types.is_empty() {
            return Err(DataError::Config("anomaly_rate > 0 needs anomaly types".into()));
        }
        Ok(())
    }
}

/// Sprite silhouettes. The training set uses the first three; `Bar` and
/// `Ring` are reserved for anomalous appearances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
    Cross,
    Bar,
    Ring,
}

const NORMAL_SHAPES: [Shape; 3] = [Shape::Square, Shape::Disk, Shape::Cross];

#[derive(Clone, Debug)]
struct SpritePlan {
    shape: Shape,
    half: f64,
    intensity: u8,
    pos: (f64, f64),
    vel: (f64, f64),
    /// Frame interval during which this sprite exists (inclusive).
    alive: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct AnomalyEvent {
    pub kind: AnomalyKind,
    pub start: usize,
    pub end: usize,
    sprite: usize,
}

/// Deterministic per-video scenario: background, sprites, scheduled
/// anomalies.
#[derive(Clone, Debug)]
pub struct VideoPlan {
    background_seed: u64,
    sprites: Vec<SpritePlan>,
    pub events: Vec<AnomalyEvent>,
}

impl VideoPlan {
    pub fn label_runs(&self) -> Vec<(usize, usize)> {
        self.events.iter().map(|e| (e.start, e.end)).collect()
    }
}

fn video_rng(cfg_seed: u64, split: Split, index: usize) -> ChaCha20Rng {
    let tag = match split {
        Split::Train => 0x7261696e_u64,
        Split::Test => 0x74657374_u64,
    };
    ChaCha20Rng::seed_from_u64(
        cfg_seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(index as u64),
    )
}

/// Plans one video. Pure function of (config, split, index): generation,
/// auditing and tests all re-derive the same plan.
pub fn plan_video(cfg: &SynthConfig, split: Split, index: usize) -> VideoPlan {
    let mut rng = video_rng(cfg.seed, split, index);
    let s = cfg.frame_size as f64;
    let background_seed = rng.gen();
    let n_sprites = rng.gen_range(cfg.min_sprites..=cfg.max_sprites);
    let last = cfg.frames_per_video - 1;
    let mut sprites: Vec<SpritePlan> = (0..n_sprites)
        .map(|_| {
            let half = rng.gen_range(3.5..6.0);
            let speed = rng.gen_range(cfg.normal_speed.0..=cfg.normal_speed.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            SpritePlan {
                shape: NORMAL_SHAPES[rng.gen_range(0..NORMAL_SHAPES.len())],
                half,
                intensity: rng.gen_range(200..=255),
                pos: (rng.gen_range(half + 2.0..s - half - 2.0), rng.gen_range(half + 2.0..s - half - 2.0)),
                vel: (speed * angle.cos(), speed * angle.sin()),
                alive: (0, last),
            }
        })
        .collect();

    let mut events = Vec::new();
    if split == Split::Test && cfg.anomaly_rate > 0.0 {
        let budget = (cfg.anomaly_rate * cfg.frames_per_video as f64) as usize;
        let mut covered = 0usize;
        let mut cursor = rng.gen_range(8..16);
        while covered < budget {
            let len = rng.gen_range(20..=40).min(cfg.frames_per_video / 3);
            if cursor + len + 4 > cfg.frames_per_video {
                break;
            }
            let kind = cfg.anomaly_types[rng.gen_range(0..cfg.anomaly_types.len())];
            let (start, end) = (cursor, cursor + len - 1);
            let sprite = match kind {
                AnomalyKind::NewObject => {
                    let half = rng.gen_range(4.0..6.5);
                    let speed = rng.gen_range(cfg.normal_speed.0..=cfg.normal_speed.1);
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    sprites.push(SpritePlan {
                        shape: Shape::Bar,
                        half,
                        intensity: rng.gen_range(210..=255),
                        pos: (
                            rng.gen_range(half + 2.0..s - half - 2.0),
                            rng.gen_range(half + 2.0..s - half - 2.0),
                        ),
                        vel: (speed * angle.cos(), speed * angle.sin()),
                        alive: (start, end),
                    });
                    sprites.len() - 1
                }
                _ => rng.gen_range(0..n_sprites),
            };
            events.push(AnomalyEvent { kind, start, end, sprite });
            covered += len;
            cursor = end + 1 + rng.gen_range(12..24);
        }
        // rate > 0 guarantees at least one interval even on short videos
        if events.is_empty() {
            let start = 10;
            let end = (start + 20).min(last - 1);
            events.push(AnomalyEvent {
                kind: cfg.anomaly_types[0],
                start,
                end,
                sprite: 0,
            });
        }
    }
    VideoPlan { background_seed, sprites, events }
}

/// Smooth static background: bilinear interpolation of a coarse random
/// grid, values in [30, 120].
fn render_background(seed: u64, size: usize) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let coarse = 8usize;
    let grid: Vec<f64> =
        (0..(coarse + 1) * (coarse + 1)).map(|_| rng.gen_range(30.0..120.0)).collect();
    let cell = size as f64 / coarse as f64;
    let mut out = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let gx = (x as f64 / cell).min(coarse as f64 - 1e-9);
            let gy = (y as f64 / cell).min(coarse as f64 - 1e-9);
            let (ix, iy) = (gx as usize, gy as usize);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let g = |yy: usize, xx: usize| grid[yy * (coarse + 1) + xx];
            let v = g(iy, ix) * (1.0 - fx) * (1.0 - fy)
                + g(iy, ix + 1) * fx * (1.0 - fy)
                + g(iy + 1, ix) * (1.0 - fx) * fy
                + g(iy + 1, ix + 1) * fx * fy;
            out[y * size + x] = v as u8;
        }
    }
    out
}

fn covers(shape: Shape, half: f64, dx: f64, dy: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= half && dy.abs() <= half,
        Shape::Disk => dx * dx + dy * dy <= half * half,
        Shape::Cross => {
            (dx.abs() <= half * 0.35 && dy.abs() <= half)
                || (dy.abs() <= half * 0.35 && dx.abs() <= half)
        }
        Shape::Bar => dx.abs() <= half && dy.abs() <= half * 0.3,
        Shape::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= half * half && r2 >= (half * 0.55) * (half * 0.55)
        }
    }
}

struct SpriteSim {
    plan: SpritePlan,
    pos: (f64, f64),
    vel: (f64, f64),
}

/// Renders every frame of a planned video.
pub fn render_video(cfg: &SynthConfig, plan: &VideoPlan) -> Vec<Vec<u8>> {
    let size = cfg.frame_size;
    let background = render_background(plan.background_seed, size);
    let mut sims: Vec<SpriteSim> = plan
        .sprites
        .iter()
        .map(|p| SpriteSim { plan: p.clone(), pos: p.pos, vel: p.vel })
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    for t in 0..cfg.frames_per_video {
        // active anomaly lookups
        let fast: Vec<usize> = plan
            .events
            .iter()
            .filter(|e| e.kind == AnomalyKind::FastSprite && t >= e.start && t <= e.end)
            .map(|e| e.sprite)
            .collect();
        let shifted: Vec<usize> = plan
            .events
            .iter()
            .filter(|e| e.kind == AnomalyKind::ShapeChange && t >= e.start && t <= e.end)
            .map(|e| e.sprite)
            .collect();

        let mut frame = background.clone();
        for (si, sim) in sims.iter_mut().enumerate() {
            if t < sim.plan.alive.0 || t > sim.plan.alive.1 {
                continue;
            }
            let shape = if shifted.contains(&si) { Shape::Ring } else { sim.plan.shape };
            let half = sim.plan.half;
            let lo_y = (sim.pos.1 - half - 1.0).max(0.0) as usize;
            let hi_y = ((sim.pos.1 + half + 1.0) as usize).min(size - 1);
            let lo_x = (sim.pos.0 - half - 1.0).max(0.0) as usize;
            let hi_x = ((sim.pos.0 + half + 1.0) as usize).min(size - 1);
            for y in lo_y..=hi_y {
                for x in lo_x..=hi_x {
                    if covers(shape, half, x as f64 - sim.pos.0, y as f64 - sim.pos.1) {
                        frame[y * size + x] = sim.plan.intensity;
                    }
                }
            }

            // advance with wall bounces
            let factor = if fast.contains(&si) { cfg.anomaly_speed_factor } else { 1.0 };
            sim.pos.0 += sim.vel.0 * factor;
            sim.pos.1 += sim.vel.1 * factor;
            let lo = half;
            let hi = size as f64 - 1.0 - half;
            if sim.pos.0 < lo {
                sim.pos.0 = 2.0 * lo - sim.pos.0;
                sim.vel.0 = -sim.vel.0;
            } else if sim.pos.0 > hi {
                sim.pos.0 = 2.0 * hi - sim.pos.0;
                sim.vel.0 = -sim.vel.0;
            }
            if sim.pos.1 < lo {
                sim.pos.1 = 2.0 * lo - sim.pos.1;
                sim.vel.1 = -sim.vel.1;
            } else if sim.pos.1 > hi {
                sim.pos.1 = 2.0 * hi - sim.pos.1;
                sim.vel.1 = -sim.vel.1;
            }
        }
        frames.push(frame);
    }
    frames
}

/// Writes the full dataset and its manifest under `out_root`.
pub fn generate_synthetic(cfg: &SynthConfig, out_root: &Path) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let mut videos = Vec::new();
    for split in [Split::Train, Split::Test] {
        let count = match split {
            Split::Train => cfg.n_train_videos,
            Split::Test => cfg.n_test_videos,
        };
        for idx in 0..count {
            let id = format!("video_{idx:04}");
            let plan = plan_video(cfg, split, idx);
            let frames = render_video(cfg, &plan);
            let dir = out_root.join(split.dir()).join(&id);
            fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
            for (t, frame) in frames.iter().enumerate() {
                write_pgm(&dir.join(format!("frame_{t:06}.pgm")), cfg.frame_size, frame)?;
            }
            videos.push(VideoMeta {
                id,
                split,
                frame_count: cfg.frames_per_video,
                label_runs: if split == Split::Test { plan.label_runs() } else { Vec::new() },
            });
        }
    }
    let manifest =
        DatasetManifest { root: out_root.to_path_buf(), frame_size: cfg.frame_size, videos };
    manifest.validate()?;
    manifest.save()?;
    Ok(manifest)
}
