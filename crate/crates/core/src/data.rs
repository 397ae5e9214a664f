//! Synthetic moving-object videos and the RAWCLIP on-disk format.
//!
//! Clips are a static two-tone sinusoidal background with solid rectangles
//! translating at a constant 1–3 px/frame. Because the background never
//! changes, the per-frame `motion_mask` is exact ground truth for where
//! anything moves.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tokenizer::{Geometry, PatchSize};

pub const CHANNELS: usize = 3;

/// Raw clip, `frames × 3 × height × width`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Frame-major, then channel, then row-major pixels.
    pub values: Vec<f64>,
    /// `frames × height × width`, true where a moving object covers the pixel.
    pub motion_mask: Option<Vec<bool>>,
    pub label: Option<usize>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "clip {frames}x{CHANNELS}x{height}x{width} needs {} values, got {}",
                frames * CHANNELS * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("clip values must lie in [0, 1]".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            values,
            motion_mask: None,
            label: None,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            values: vec![0.0; frames * CHANNELS * height * width],
            motion_mask: None,
            label: None,
        }
    }

    #[inline]
    pub fn index(&self, t: usize, ch: usize, y: usize, x: usize) -> usize {
        ((t * CHANNELS + ch) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, t: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(t, ch, y, x)]
    }

    pub fn mask_at(&self, t: usize, y: usize, x: usize) -> Option<bool> {
        self.motion_mask
            .as_ref()
            .map(|m| m[(t * self.height + y) * self.width + x])
    }

    /// Fraction of pixels covered by `motion_mask` in frame `t`.
    pub fn mask_density(&self, t: usize) -> Option<f64> {
        let hw = self.height * self.width;
        self.motion_mask
            .as_ref()
            .map(|m| m[t * hw..(t + 1) * hw].iter().filter(|&&b| b).count() as f64 / hw as f64)
    }
}

/// Motion signature of a synthetic clip; doubles as the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Left,
    Right,
    Up,
    Down,
    Static,
}

impl MotionClass {
    pub const ALL: [MotionClass; 5] = [
        MotionClass::Left,
        MotionClass::Right,
        MotionClass::Up,
        MotionClass::Down,
        MotionClass::Static,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    /// Unit step `(dx, dy)` in pixel coordinates (y grows downward).
    fn direction(self) -> (i64, i64) {
        match self {
            MotionClass::Left => (-1, 0),
            MotionClass::Right => (1, 0),
            MotionClass::Up => (0, -1),
            MotionClass::Down => (0, 1),
            MotionClass::Static => (0, 0),
        }
    }
}

impl std::str::FromStr for MotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            "up" => Ok(Self::Up),
            "down" => Ok(Self::Down),
            "static" => Ok(Self::Static),
            other => config_err(format!("unknown motion class `{other}`")),
        }
    }
}

/// Parameters of [`gen_clip`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: PatchSize,
    pub n_objects: usize,
    pub motion: MotionClass,
    /// Side length of the square objects, in pixels.
    pub object_size: usize,
    /// Inclusive speed range in px/frame; the minimum must be at least 1.
    pub speed: (usize, usize),
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 64,
            width: 64,
            patch: PatchSize::new(2, 8, 8),
            n_objects: 1,
            motion: MotionClass::Right,
            object_size: 8,
            speed: (1, 3),
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.frames, self.height, self.width, self.patch)?;
        if self.speed.0 == 0 || self.speed.0 > self.speed.1 {
            return config_err(format!("speed range {:?} must satisfy 1 <= min <= max", self.speed));
        }
        if self.object_size == 0 || self.object_size > self.height.min(self.width) {
            return config_err(format!("object size {} does not fit the frame", self.object_size));
        }
        if self.motion != MotionClass::Static {
            let travel = self.speed.0 * (self.frames - 1) + self.object_size;
            let extent = match self.motion {
                MotionClass::Left | MotionClass::Right => self.width,
                _ => self.height,
            };
            if travel > extent {
                return config_err(format!(
                    "an object of size {} moving {} px/frame for {} frames leaves a {extent} px frame",
                    self.object_size, self.speed.0, self.frames
                ));
            }
        }
        Ok(())
    }
}

struct Background {
    base: [f64; 3],
    amp: [f64; 3],
    freq: [(f64, f64); 2],
    phase: [f64; 3],
}

impl Background {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut base = [0.0; 3];
        let mut amp = [0.0; 3];
        let mut phase = [0.0; 3];
        for ch in 0..3 {
            base[ch] = rng.gen_range(0.25..0.45);
            amp[ch] = rng.gen_range(0.05..0.15);
            phase[ch] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        let mut freq = [(0.0, 0.0); 2];
        for f in freq.iter_mut() {
            *f = (rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35));
        }
        Self { base, amp, freq, phase }
    }

    fn value(&self, ch: usize, y: usize, x: usize) -> f64 {
        let (x, y) = (x as f64, y as f64);
        let a = (self.freq[0].0 * x + self.freq[0].1 * y + self.phase[ch]).sin();
        let b = (self.freq[1].0 * x - self.freq[1].1 * y + 0.5 * self.phase[ch]).cos();
        (self.base[ch] + self.amp[ch] * (a + b)).clamp(0.0, 1.0)
    }
}

struct MovingObject {
    x0: i64,
    y0: i64,
    vx: i64,
    vy: i64,
    color: [f64; 3],
}

/// Generates one clip; deterministic in `seed`.
pub fn gen_clip(seed: u64, spec: &ClipSpec) -> Result<VideoClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, h, w, size) = (spec.frames, spec.height, spec.width, spec.object_size);
    let bg = Background::sample(&mut rng);

    let (dx, dy) = spec.motion.direction();
    let objects: Vec<MovingObject> = (0..spec.n_objects)
        .map(|_| {
            let speed = if spec.motion == MotionClass::Static {
                0
            } else {
                let extent = if dx != 0 { w } else { h };
                let max_fit = (extent - size) / (t_len - 1).max(1);
                rng.gen_range(spec.speed.0..=spec.speed.1.min(max_fit)) as i64
            };
            let travel = speed * (t_len as i64 - 1);
            let span_x = w as i64 - size as i64 - if dx != 0 { travel } else { 0 };
            let span_y = h as i64 - size as i64 - if dy != 0 { travel } else { 0 };
            let mut x0 = rng.gen_range(0..=span_x);
            let mut y0 = rng.gen_range(0..=span_y);
            if dx < 0 {
                x0 += travel;
            }
            if dy < 0 {
                y0 += travel;
            }
            let color = [
                rng.gen_range(0.75..1.0),
                rng.gen_range(0.75..1.0),
                rng.gen_range(0.0..0.2),
            ];
            MovingObject { x0, y0, vx: dx * speed, vy: dy * speed, color }
        })
        .collect();

    let mut clip = VideoClip::zeros(t_len, h, w);
    let mut mask = vec![false; t_len * h * w];
    for t in 0..t_len {
        for ch in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let i = clip.index(t, ch, y, x);
                    clip.values[i] = bg.value(ch, y, x);
                }
            }
        }
        for obj in &objects {
            let ox = (obj.x0 + obj.vx * t as i64) as usize;
            let oy = (obj.y0 + obj.vy * t as i64) as usize;
            for y in oy..oy + size {
                for x in ox..ox + size {
                    for ch in 0..CHANNELS {
                        let i = clip.index(t, ch, y, x);
                        clip.values[i] = obj.color[ch];
                    }
                    mask[(t * h + y) * w + x] = true;
                }
            }
        }
    }
    clip.motion_mask = Some(mask);
    clip.label = Some(spec.motion.id());
    Ok(clip)
}

/// Default-geometry clip with `n_objects` objects of size 8 moving per `motion`.
pub fn gen_moving_clip(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    n_objects: usize,
    motion: MotionClass,
) -> Result<VideoClip> {
    if !frames.is_multiple_of(2) {
        return config_err(format!("frame count {frames} must be even"));
    }
    gen_clip(
        seed,
        &ClipSpec {
            frames,
            height,
            width,
            n_objects,
            motion,
            ..ClipSpec::default()
        },
    )
}

/// A long recording split into clips, each labelled with its phase.
#[derive(Clone, Debug)]
pub struct LongVideo {
    pub video_id: String,
    pub clips: Vec<VideoClip>,
    pub labels: Vec<usize>,
}

impl LongVideo {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Phase `p` moves like motion class `p % 5` with `1 + p / 5` extra objects
/// on top of `base.n_objects - 1`, so every phase has a distinct signature.
pub fn phase_spec(base: &ClipSpec, phase: usize) -> ClipSpec {
    ClipSpec {
        motion: MotionClass::ALL[phase % MotionClass::ALL.len()],
        n_objects: base.n_objects + phase / MotionClass::ALL.len(),
        ..base.clone()
    }
}

/// Generates phases `0..n_phases` in order, each a contiguous run of clips.
pub fn gen_long_video(
    seed: u64,
    n_phases: usize,
    clips_per_phase: (usize, usize),
    base: &ClipSpec,
) -> Result<LongVideo> {
    if n_phases < 2 {
        return config_err(format!("a long video needs at least 2 phases, got {n_phases}"));
    }
    let (lo, hi) = clips_per_phase;
    if lo == 0 || lo > hi {
        return config_err(format!("clips-per-phase range [{lo}, {hi}] is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1011_9e37_79b9);
    let mut clips = Vec::new();
    let mut labels = Vec::new();
    for phase in 0..n_phases {
        let spec = phase_spec(base, phase);
        let count = rng.gen_range(lo..=hi);
        for _ in 0..count {
            let clip_seed: u64 = rng.gen();
            let mut clip = gen_clip(clip_seed, &spec)?;
            clip.label = Some(phase);
            clips.push(clip);
            labels.push(phase);
        }
    }
    Ok(LongVideo {
        video_id: format!("video-{seed}"),
        clips,
        labels,
    })
}

pub const RAWCLIP_MAGIC: &[u8; 4] = b"RAWC";
pub const RAWCLIP_VERSION: u8 = 1;
pub const RAWCLIP_HEADER_LEN: usize = 4 + 1 + 4 * 4;

/// Serializes a clip as RAWCLIP bytes (values quantized to u8).
pub fn encode_rawclip(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAWCLIP_HEADER_LEN + clip.values.len());
    out.extend_from_slice(RAWCLIP_MAGIC);
    out.push(RAWCLIP_VERSION);
    for dim in [clip.frames, CHANNELS, clip.height, clip.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend(clip.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Parses RAWCLIP bytes; values are scaled to `[0, 1]`.
pub fn decode_rawclip(bytes: &[u8]) -> Result<VideoClip> {
    let fmt = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < RAWCLIP_HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!("header needs {RAWCLIP_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != RAWCLIP_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != RAWCLIP_VERSION {
        return Err(fmt(4, format!("unsupported version {}", bytes[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (t, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    if c != CHANNELS {
        return Err(fmt(9, format!("expected {CHANNELS} channels, header says {c}")));
    }
    let expected = t
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| fmt(5, "header extents overflow".into()))?;
    let actual = bytes.len() - RAWCLIP_HEADER_LEN;
    if actual != expected {
        return Err(fmt(
            RAWCLIP_HEADER_LEN + actual.min(expected),
            format!("expected payload length {expected} bytes, found {actual}"),
        ));
    }
    let values = bytes[RAWCLIP_HEADER_LEN..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    VideoClip::new(t, h, w, values)
}

pub fn write_raw_clip(clip: &VideoClip, path: &Path) -> Result<()> {
    fs::write(path, encode_rawclip(clip))?;
    Ok(())
}

pub fn read_raw_clip(path: &Path) -> Result<VideoClip> {
    decode_rawclip(&fs::read(path)?)
}

/// One line of a long-video manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub video_id: String,
    pub index: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes a long video's clips next to `manifest_path` and the manifest itself.
/// Clip paths in the manifest are relative to the manifest's directory.
pub fn write_long_video(video: &LongVideo, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let clip_dir = dir.join(&video.video_id);
    fs::create_dir_all(&clip_dir)?;
    let mut entries = Vec::with_capacity(video.len());
    for (i, (clip, &label)) in video.clips.iter().zip(&video.labels).enumerate() {
        let rel = format!("{}/clip_{i:04}.rawc", video.video_id);
        write_raw_clip(clip, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label,
            video_id: video.video_id.clone(),
            index: i,
        });
    }
    write_manifest(manifest_path, &entries)
}

/// Loads a long video from its manifest. Motion masks are not stored on disk.
pub fn read_long_video(manifest_path: &Path) -> Result<LongVideo> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = read_manifest(manifest_path)?;
    entries.sort_by_key(|e| e.index);
    let video_id = entries
        .first()
        .map(|e| e.video_id.clone())
        .ok_or_else(|| Error::Contract(format!("empty manifest {}", manifest_path.display())))?;
    let mut clips = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut clip = read_raw_clip(&dir.join(&e.path))?;
        clip.label = Some(e.label);
        clips.push(clip);
        labels.push(e.label);
    }
    Ok(LongVideo { video_id, clips, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_mask_is_constant_over_time() {
        let clip = gen_moving_clip(3, 16, 64, 64, 2, MotionClass::Static).unwrap();
        let m = clip.motion_mask.as_ref().unwrap();
        let hw = 64 * 64;
        for t in 1..16 {
            assert_eq!(&m[..hw], &m[t * hw..(t + 1) * hw]);
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let a = gen_moving_clip(11, 16, 64, 64, 1, MotionClass::Up).unwrap();
        let b = gen_moving_clip(11, 16, 64, 64, 1, MotionClass::Up).unwrap();
        assert_eq!(a, b);
        let c = gen_moving_clip(12, 16, 64, 64, 1, MotionClass::Up).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_8x8_object_density() {
        for motion in MotionClass::ALL {
            let clip = gen_moving_clip(5, 16, 64, 64, 1, motion).unwrap();
            for t in 0..16 {
                assert_eq!(clip.mask_density(t), Some(64.0 / 4096.0));
            }
        }
    }

    #[test]
    fn moving_classes_change_mask_between_frames() {
        for motion in &MotionClass::ALL[..4] {
            let clip = gen_moving_clip(9, 16, 64, 64, 1, *motion).unwrap();
            let m = clip.motion_mask.as_ref().unwrap();
            let hw = 64 * 64;
            for t in 1..16 {
                assert_ne!(&m[(t - 1) * hw..t * hw], &m[t * hw..(t + 1) * hw]);
            }
        }
    }

    #[test]
    fn odd_frames_rejected() {
        assert!(matches!(
            gen_moving_clip(0, 15, 64, 64, 1, MotionClass::Left),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gen_moving_clip(0, 16, 60, 64, 1, MotionClass::Left),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn long_video_labels() {
        let v = gen_long_video(1, 2, (3, 3), &ClipSpec::default()).unwrap();
        assert_eq!(v.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(v.clips.len(), 6);
        assert!(matches!(
            gen_long_video(1, 1, (3, 3), &ClipSpec::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rawclip_payload_length() {
        let clip = VideoClip::zeros(16, 64, 64);
        let bytes = encode_rawclip(&clip);
        assert_eq!(bytes.len() - RAWCLIP_HEADER_LEN, 16 * 3 * 64 * 64);
        assert_eq!(&bytes[..4], b"RAWC");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
    }

    #[test]
    fn truncated_rawclip_reports_lengths() {
        let clip = gen_moving_clip(2, 4, 16, 16, 1, MotionClass::Static).unwrap();
        let mut bytes = encode_rawclip(&clip);
        bytes.truncate(bytes.len() - 10);
        let err = decode_rawclip(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("{}", 4 * 3 * 16 * 16)), "{msg}");
        assert!(msg.contains(&format!("{}", 4 * 3 * 16 * 16 - 10)), "{msg}");
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let mut bytes = encode_rawclip(&VideoClip::zeros(2, 8, 8));
        bytes[0] = b'X';
        assert!(matches!(decode_rawclip(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
