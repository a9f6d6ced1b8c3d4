//! Synthetic moving-sprite clips, segment sampling, and the `TEAC` clip
//! file format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: [u8; 4] = *b"TEAC";
pub const CLIP_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn label(self) -> usize {
        self as usize
    }

    /// Unit step in image coordinates `(dy, dx)`.
    pub fn step(self) -> (f64, f64) {
        match self {
            Direction::Up => (-1.0, 0.0),
            Direction::Down => (1.0, 0.0),
            Direction::Left => (0.0, -1.0),
            Direction::Right => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub raw_frames: usize,
    /// Pixels per raw frame.
    pub speed: f64,
    /// Gaussian sprite standard deviation in pixels.
    pub sprite_sigma: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 16,
            width: 16,
            raw_frames: 32,
            speed: 0.5,
            sprite_sigma: 1.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.raw_frames == 0 {
            return Err(Error::Config("frame size and raw length must be positive".into()));
        }
        if !(self.sprite_sigma > 0.0) || 3.0 * self.sprite_sigma > self.height.min(self.width) as f64 / 2.0 {
            return Err(Error::Config(format!(
                "sprite (3 sigma = {:.2} px) does not fit a {}x{} frame",
                3.0 * self.sprite_sigma,
                self.height,
                self.width
            )));
        }
        if !(self.speed >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("speed and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    /// `[T_raw, 3, H, W]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub label: usize,
    pub clip_id: u64,
}

fn wrapped_offset(d: f64, period: f64) -> f64 {
    let d = d.rem_euclid(period);
    d.min(period - d)
}

/// Renders clip `clip_id` of class `dir`. Each clip draws from its own RNG
/// stream, so clips can be generated independently and in any order.
pub fn generate_clip(spec: &SyntheticSpec, dir: Direction, clip_id: u64) -> Result<ClipRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(clip_id);
    let (h, w, t_raw) = (spec.height, spec.width, spec.raw_frames);
    let (hf, wf) = (h as f64, w as f64);
    let (y0, x0) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
    let color: [f64; 3] = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
    let noise = Normal::new(0.0, spec.noise.max(1e-300)).map_err(|e| Error::Config(e.to_string()))?;
    let (dy, dx) = dir.step();
    let inv = 1.0 / (2.0 * spec.sprite_sigma * spec.sprite_sigma);
    let mut data = Vec::with_capacity(t_raw * 3 * h * w);
    for t in 0..t_raw {
        let cy = y0 + dy * spec.speed * t as f64;
        let cx = x0 + dx * spec.speed * t as f64;
        for &c in &color {
            for i in 0..h {
                let ey = wrapped_offset(i as f64 + 0.5 - cy, hf);
                for j in 0..w {
                    let ex = wrapped_offset(j as f64 + 0.5 - cx, wf);
                    let blob = (-(ey * ey + ex * ex) * inv).exp();
                    let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push((c * blob + n).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Ok(ClipRecord {
        frames: Tensor::new(&[t_raw, 3, h, w], data)?,
        label: dir.label(),
        clip_id,
    })
}

/// `n_per_class` clips per direction, interleaved by class, with ids
/// starting at `first_id`.
pub fn generate_dataset(spec: &SyntheticSpec, n_per_class: usize, first_id: u64) -> Result<Vec<ClipRecord>> {
    if n_per_class == 0 {
        return Err(Error::Config("need at least one clip per class".into()));
    }
    let mut out = Vec::with_capacity(4 * n_per_class);
    let mut id = first_id;
    for _ in 0..n_per_class {
        for dir in Direction::ALL {
            out.push(generate_clip(spec, dir, id)?);
            id += 1;
        }
    }
    Ok(out)
}

/// [`generate_dataset`] on `workers` threads; the output is identical.
pub fn generate_dataset_parallel(
    spec: &SyntheticSpec,
    n_per_class: usize,
    first_id: u64,
    workers: usize,
) -> Result<Vec<ClipRecord>> {
    if n_per_class == 0 {
        return Err(Error::Config("need at least one clip per class".into()));
    }
    let total = 4 * n_per_class;
    let workers = workers.clamp(1, total);
    if workers == 1 {
        return generate_dataset(spec, n_per_class, first_id);
    }
    let share = total.div_ceil(workers);
    let ranges: Vec<(usize, usize)> = (0..total).step_by(share).map(|lo| (lo, (lo + share).min(total))).collect();
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|(lo, hi)| {
                s.spawn(move || {
                    (lo..hi)
                        .map(|i| generate_clip(spec, Direction::ALL[i % 4], first_id + i as u64))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Uniform frame per segment from a seeded stream.
    Train { seed: u64 },
    /// Centre frame of each segment.
    Test,
}

/// Segment `i` is `[floor(i T_raw / T), floor((i + 1) T_raw / T))`.
pub fn segment_bounds(raw_frames: usize, frames: usize) -> Vec<(usize, usize)> {
    (0..frames)
        .map(|i| (i * raw_frames / frames, (i + 1) * raw_frames / frames))
        .collect()
}

/// One frame index per segment. Empty segments (only when
/// `raw_frames < frames`) reuse the nearest earlier frame.
pub fn sample_indices(raw_frames: usize, frames: usize, mode: SampleMode) -> Result<Vec<usize>> {
    if raw_frames == 0 {
        return Err(Error::Config("clip has no frames".into()));
    }
    if frames == 0 {
        return Err(Error::Config("must sample at least one frame".into()));
    }
    let mut rng = match mode {
        SampleMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SampleMode::Test => None,
    };
    Ok(segment_bounds(raw_frames, frames)
        .into_iter()
        .map(|(lo, hi)| {
            if hi == lo {
                return lo.saturating_sub(1);
            }
            match rng.as_mut() {
                Some(r) => r.gen_range(lo..hi),
                None => lo + (hi - lo) / 2,
            }
        })
        .collect())
}

/// Picks frames of `clip` as `[T, 3, H, W]`.
pub fn sparse_sample(clip: &ClipRecord, frames: usize, mode: SampleMode) -> Result<Tensor<f32>> {
    let shape = clip.frames.shape();
    let idx = sample_indices(shape[0], frames, mode)?;
    let frame = shape[1..].iter().product::<usize>();
    let src = clip.frames.data();
    let mut data = Vec::with_capacity(frames * frame);
    for i in idx {
        data.extend_from_slice(&src[i * frame..(i + 1) * frame]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = frames;
    Tensor::new(&out_shape, data)
}

pub fn encode_clip(clip: &ClipRecord) -> Result<Vec<u8>> {
    let shape = clip.frames.shape();
    if shape.len() != 4 {
        return Err(Error::shape("encode_clip", "frames must be [T, C, H, W]"));
    }
    let label = u32::try_from(clip.label).map_err(|_| Error::Malformed("label exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * clip.frames.len());
    out.extend_from_slice(&CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    out.extend_from_slice(&label.to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Malformed("dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in clip.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated {
        needed: at.saturating_add(n),
        available: bytes.len(),
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().unwrap()))
}

pub fn decode_clip(bytes: &[u8], clip_id: u64) -> Result<ClipRecord> {
    let mut at = 0;
    let magic: [u8; 4] = take(bytes, &mut at, 4)?.try_into().unwrap();
    if magic != CLIP_MAGIC {
        return Err(Error::BadMagic {
            expected: CLIP_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(bytes, &mut at)?;
    if version != CLIP_VERSION {
        return Err(Error::VersionMismatch {
            expected: CLIP_VERSION,
            found: version,
        });
    }
    let label = read_u32(bytes, &mut at)? as usize;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(bytes, &mut at)? as usize;
    }
    if dims.contains(&0) {
        return Err(Error::Malformed(format!("zero dimension in {dims:?}")));
    }
    if dims[1] != 3 {
        return Err(Error::Malformed(format!("expected 3 colour channels, found {}", dims[1])));
    }
    if label >= Direction::ALL.len() {
        return Err(Error::Malformed(format!("label {label} is not a direction")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Malformed(format!("dimensions {dims:?} overflow")))?;
    let payload = take(bytes, &mut at, count)?;
    if at != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - at)));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Malformed(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(ClipRecord {
        frames: Tensor::new(&dims, data)?,
        label,
        clip_id,
    })
}

pub fn write_clip(path: &Path, clip: &ClipRecord) -> Result<()> {
    fs::write(path, encode_clip(clip)?)?;
    Ok(())
}

pub fn read_clip(path: &Path, clip_id: u64) -> Result<ClipRecord> {
    decode_clip(&fs::read(path)?, clip_id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub clip_id: u64,
}

pub fn clip_file_name(clip_id: u64) -> String {
    format!("clip_{clip_id:06}.teac")
}

/// Writes `clips` into `dir` and a manifest at `dir/<name>`.
pub fn write_dataset(dir: &Path, manifest_name: &str, clips: &[ClipRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let name = clip_file_name(c.clip_id);
        write_clip(&dir.join(&name), c)?;
        entries.push(ManifestEntry {
            path: name,
            label: c.label,
            clip_id: c.clip_id,
        });
    }
    let path = dir.join(manifest_name);
    fs::write(&path, serde_json::to_string_pretty(&entries)?)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Loads every clip of a manifest, checking labels against the files.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let clip = read_clip(&base.join(&e.path), e.clip_id)?;
            if clip.label != e.label {
                return Err(Error::Malformed(format!(
                    "{}: manifest label {} but file label {}",
                    e.path, e.label, clip.label
                )));
            }
            Ok(clip)
        })
        .collect()
}
