//! Deterministic synthetic clips: moving, occluding geometric shapes with
//! exact instance masks, plus the on-disk dataset format (PNG frames, JSON
//! annotations with run-length encoded mask volumes).
//!
//! Rendering paints far-to-near, so per-frame instance masks are disjoint
//! and every colored pixel belongs to exactly one instance. Motion is
//! linear with elastic bounces at an arena slightly larger than the canvas,
//! so shapes can fully leave the frame and come back.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

pub const CATEGORY_NAMES: [&str; 3] = ["disk", "rectangle", "triangle"];

impl ShapeKind {
    pub fn category(self) -> usize {
        match self {
            ShapeKind::Disk => 0,
            ShapeKind::Rectangle => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn from_category(c: usize) -> Option<ShapeKind> {
        match c {
            0 => Some(ShapeKind::Disk),
            1 => Some(ShapeKind::Rectangle),
            2 => Some(ShapeKind::Triangle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub kind: ShapeKind,
    /// Radius (disk), half-extent (rectangle), circumradius (triangle).
    pub size: f64,
    /// Center at frame 0, (x, y) in pixels.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Higher depth is nearer and wins occlusions.
    pub depth: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (height, width).
    pub canvas: (usize, usize),
    pub num_frames: usize,
    pub instances: Vec<InstanceSpec>,
    pub seed: u64,
    /// Convolve rendered frames with a 3x3 box filter (masks untouched).
    pub blur: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoGt {
    pub category: usize,
    /// One mask per frame, `h * w` booleans.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedVideo {
    pub h: usize,
    pub w: usize,
    /// RGB8, `h * w * 3` per frame.
    pub frames: Vec<Vec<u8>>,
    pub instances: Vec<VideoGt>,
}

impl AnnotatedVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Per-instance fill colors: one base hue per category, shaded by index.
pub fn instance_color(category: usize, index: usize) -> [u8; 3] {
    let base: [f64; 3] = match category {
        0 => [220.0, 60.0, 60.0],
        1 => [60.0, 200.0, 80.0],
        _ => [70.0, 90.0, 230.0],
    };
    let shade = 0.65 + 0.35 * (((index as f64) * 0.618_033_988_749_895).fract());
    [
        (base[0] * shade) as u8,
        (base[1] * shade) as u8,
        (base[2] * shade) as u8,
    ]
}

const BACKGROUND: [u8; 3] = [24, 24, 28];

/// Fold a coordinate into [lo, hi] by elastic reflection.
fn bounce(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let period = 2.0 * span;
    let mut r = (x - lo) % period;
    if r < 0.0 {
        r += period;
    }
    if r > span {
        r = period - r;
    }
    lo + r
}

fn center_at(inst: &InstanceSpec, frame: usize, h: usize, w: usize) -> (f64, f64) {
    let margin = 2.0 * inst.size;
    let t = frame as f64;
    let x = bounce(inst.start.0 + inst.velocity.0 * t, -margin, w as f64 + margin);
    let y = bounce(inst.start.1 + inst.velocity.1 * t, -margin, h as f64 + margin);
    (x, y)
}

fn contains(kind: ShapeKind, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match kind {
        ShapeKind::Disk => dx * dx + dy * dy <= size * size,
        ShapeKind::Rectangle => dx.abs() <= size && dy.abs() <= size * 0.7,
        ShapeKind::Triangle => {
            // Upward triangle inscribed in the circumradius.
            let top = -size;
            let bottom = size * 0.5;
            if dy < top || dy > bottom {
                return false;
            }
            let frac = (dy - top) / (bottom - top);
            let half_width = frac * size * 0.866;
            dx.abs() <= half_width
        }
    }
}

fn box_blur(frame: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; frame.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0u32;
                let mut n = 0u32;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += frame[(yy as usize * w + xx as usize) * 3 + ch] as u32;
                            n += 1;
                        }
                    }
                }
                out[(y * w + x) * 3 + ch] = (acc / n) as u8;
            }
        }
    }
    out
}

/// Render the scene: deterministic under the spec, nearer instance wins
/// overlapping pixels.
pub fn generate(spec: &SceneSpec) -> Result<AnnotatedVideo> {
    if spec.num_frames == 0 {
        return Err(Error::contract("generate", "zero frames"));
    }
    let (h, w) = spec.canvas;
    if h == 0 || w == 0 {
        return Err(Error::contract("generate", "empty canvas"));
    }
    for inst in &spec.instances {
        if inst.size <= 0.0 || inst.size > 2.0 * h.max(w) as f64 {
            return Err(Error::contract("generate", "instance size out of bounds"));
        }
    }
    // Far-to-near paint order.
    let mut order: Vec<usize> = (0..spec.instances.len()).collect();
    order.sort_by_key(|&i| (spec.instances[i].depth, i));

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut instances: Vec<VideoGt> = spec
        .instances
        .iter()
        .map(|i| VideoGt {
            category: i.kind.category(),
            masks: Vec::with_capacity(spec.num_frames),
        })
        .collect();

    for f in 0..spec.num_frames {
        let centers: Vec<(f64, f64)> = spec
            .instances
            .iter()
            .map(|i| center_at(i, f, h, w))
            .collect();
        // owner[p] = instance index painted last (nearest), or usize::MAX.
        let mut owner = vec![usize::MAX; h * w];
        for &i in &order {
            let inst = &spec.instances[i];
            let (cx, cy) = centers[i];
            let reach = inst.size + 1.0;
            let y0 = ((cy - reach).floor().max(0.0)) as usize;
            let y1 = ((cy + reach).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
            let x0 = ((cx - reach).floor().max(0.0)) as usize;
            let x1 = ((cx + reach).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
            if cy + reach < 0.0 || cy - reach > h as f64 || cx + reach < 0.0 || cx - reach > w as f64 {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if contains(inst.kind, cx, cy, inst.size, x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * w + x] = i;
                    }
                }
            }
        }
        let mut rgb = vec![0u8; h * w * 3];
        for p in 0..h * w {
            let color = if owner[p] == usize::MAX {
                BACKGROUND
            } else {
                instance_color(spec.instances[owner[p]].kind.category(), owner[p])
            };
            rgb[p * 3..p * 3 + 3].copy_from_slice(&color);
        }
        for (i, gt) in instances.iter_mut().enumerate() {
            gt.masks.push(owner.iter().map(|&o| o == i).collect());
        }
        frames.push(if spec.blur { box_blur(&rgb, h, w) } else { rgb });
    }

    Ok(AnnotatedVideo {
        h,
        w,
        frames,
        instances,
    })
}

/// One clip window: `frame_indices` has exactly `t` entries; trailing
/// entries repeat the last frame when the window runs past the video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipWindow {
    pub start: usize,
    pub frame_indices: Vec<usize>,
    pub padded: bool,
}

impl ClipWindow {
    /// Range of real video frames covered, `[start, end)`.
    pub fn range(&self, num_frames: usize) -> (usize, usize) {
        (self.start, (self.start + self.frame_indices.len()).min(num_frames))
    }
}

/// Windows at stride `s`: clip k covers `[k s, k s + t)`; generation stops
/// once a window reaches the end, padding the final one by repetition.
pub fn split_clips(num_frames: usize, t: usize, s: usize) -> Result<Vec<ClipWindow>> {
    if t == 0 || s == 0 || s > t || t > num_frames {
        return Err(Error::contract(
            "split_clips",
            format!("need 1 <= S <= T <= frames, got T={} S={} frames={}", t, s, num_frames),
        ));
    }
    let mut out = Vec::new();
    let mut start = 0usize;
    loop {
        let frame_indices: Vec<usize> = (start..start + t).map(|i| i.min(num_frames - 1)).collect();
        let padded = start + t > num_frames;
        out.push(ClipWindow {
            start,
            frame_indices,
            padded,
        });
        if start + t >= num_frames {
            break;
        }
        start += s;
    }
    Ok(out)
}

/// Majority-vote 2x2 block downsampling (ties count as positive).
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, factor: usize) -> Vec<f64> {
    if factor <= 1 {
        return mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut pos = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    if mask[(oy * factor + dy) * w + ox * factor + dx] {
                        pos += 1;
                    }
                }
            }
            if 2 * pos >= factor * factor {
                out[oy * ow + ox] = 1.0;
            }
        }
    }
    out
}

/// Alternating run lengths over the flattened volume, zeros first.
pub fn rle_encode(bits: &[bool]) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u64;
    for &b in bits {
        if b == current {
            count += 1;
        } else {
            runs.push(count);
            current = b;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn rle_decode(runs: &[u64], len: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(len);
    let mut value = false;
    for &r in runs {
        for _ in 0..r {
            out.push(value);
        }
        value = !value;
    }
    if out.len() != len {
        return Err(Error::format(
            "rle",
            format!("runs decode to {} values, expected {}", out.len(), len),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoMeta {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFile {
    instances: Vec<InstanceAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceAnnotation {
    category: usize,
    rle: Vec<u64>,
}

fn write_png(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format("png", e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::format("png", e.to_string()))
}

fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format("png", e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png", "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("png", e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", "expected 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize))
}

/// Write one video directory: `meta.json`, `frames/NNNNN.png`,
/// `annotations.json` with whole-volume RLE per instance.
pub fn write_video(dir: &Path, video: &AnnotatedVideo) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let meta = VideoMeta {
        height: video.h,
        width: video.w,
        num_frames: video.num_frames(),
        categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    for (i, frame) in video.frames.iter().enumerate() {
        write_png(&frames_dir.join(format!("{:05}.png", i)), frame, video.h, video.w)?;
    }
    let ann = AnnotationFile {
        instances: video
            .instances
            .iter()
            .map(|inst| {
                let mut volume = Vec::with_capacity(video.num_frames() * video.h * video.w);
                for m in &inst.masks {
                    volume.extend_from_slice(m);
                }
                InstanceAnnotation {
                    category: inst.category,
                    rle: rle_encode(&volume),
                }
            })
            .collect(),
    };
    write_json(&dir.join("annotations.json"), &ann)
}

pub fn read_video(dir: &Path) -> Result<AnnotatedVideo> {
    let meta: VideoMeta = read_json(&dir.join("meta.json"))?;
    let mut frames = Vec::with_capacity(meta.num_frames);
    for i in 0..meta.num_frames {
        let path = dir.join("frames").join(format!("{:05}.png", i));
        let (data, h, w) = read_png(&path)?;
        if h != meta.height || w != meta.width {
            return Err(Error::format("frame", format!("{:?} has wrong extent", path)));
        }
        frames.push(data);
    }
    let ann: AnnotationFile = read_json(&dir.join("annotations.json"))?;
    let fsz = meta.height * meta.width;
    let instances = ann
        .instances
        .into_iter()
        .map(|ia| {
            let volume = rle_decode(&ia.rle, meta.num_frames * fsz)?;
            let masks = (0..meta.num_frames)
                .map(|f| volume[f * fsz..(f + 1) * fsz].to_vec())
                .collect();
            Ok(VideoGt {
                category: ia.category,
                masks,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AnnotatedVideo {
        h: meta.height,
        w: meta.width,
        frames,
        instances,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, value)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&data)?)
}

/// Dataset-level generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_videos: usize,
    pub eval_videos: usize,
    pub frames: usize,
    /// (height, width).
    pub canvas: (usize, usize),
    pub min_instances: usize,
    pub max_instances: usize,
    /// Force same-category crossing trajectories (harder identity cases).
    pub occlusion: bool,
    pub blur: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_videos: 200,
            eval_videos: 50,
            frames: 36,
            canvas: (96, 96),
            min_instances: 1,
            max_instances: 4,
            occlusion: false,
            blur: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_videos + self.eval_videos == 0 {
            return Err(Error::contract("dataset_spec", "zero videos requested"));
        }
        if self.frames == 0 {
            return Err(Error::contract("dataset_spec", "zero frames per video"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::contract("dataset_spec", "bad instance count range"));
        }
        Ok(())
    }
}

/// Deterministic per-video scene sampling; `seed` fully determines the
/// scene. In occlusion mode the first two instances share a category and
/// cross near the canvas center mid-video.
pub fn sample_scene(spec: &DatasetSpec, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.canvas;
    let min_side = h.min(w) as f64;
    let n = rng.random_range(spec.min_instances..=spec.max_instances);
    let mut instances = Vec::with_capacity(n);

    let sample_kind = |rng: &mut ChaCha8Rng| match rng.random_range(0..3) {
        0 => ShapeKind::Disk,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    };

    if spec.occlusion && n >= 2 {
        // Two same-kind instances aimed to cross near the center.
        let kind = sample_kind(&mut rng);
        let t_cross = spec.frames as f64 * rng.random_range(0.35..0.65);
        let target = (
            w as f64 * rng.random_range(0.4..0.6),
            h as f64 * rng.random_range(0.4..0.6),
        );
        for i in 0..2 {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.8..1.8);
            let v = (angle.cos() * speed, angle.sin() * speed);
            let start = (target.0 - v.0 * t_cross, target.1 - v.1 * t_cross);
            instances.push(InstanceSpec {
                kind,
                size: min_side * rng.random_range(0.10..0.16),
                start,
                velocity: v,
                depth: i,
            });
        }
    }
    while instances.len() < n {
        let depth = instances.len();
        instances.push(InstanceSpec {
            kind: sample_kind(&mut rng),
            size: min_side * rng.random_range(0.09..0.16),
            start: (
                rng.random_range(0.15..0.85) * w as f64,
                rng.random_range(0.15..0.85) * h as f64,
            ),
            velocity: (rng.random_range(-1.6..1.6), rng.random_range(-1.6..1.6)),
            depth,
        });
    }
    SceneSpec {
        canvas: spec.canvas,
        num_frames: spec.frames,
        instances,
        seed,
        blur: spec.blur,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub base_seed: u64,
    pub categories: Vec<String>,
}

/// Generate `train/NNN` and `eval/NNN` video directories under `out`.
/// Video seeds derive from `base_seed` and the video index, so results are
/// identical for any `threads`.
pub fn generate_dataset(spec: &DatasetSpec, base_seed: u64, out: &Path, threads: usize) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("dataset.json"),
        &DatasetManifest {
            spec: spec.clone(),
            base_seed,
            categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
        },
    )?;

    let jobs: Vec<(PathBuf, u64)> = (0..spec.train_videos)
        .map(|i| (out.join("train").join(format!("{:03}", i)), base_seed.wrapping_add(i as u64)))
        .chain((0..spec.eval_videos).map(|i| {
            (
                out.join("eval").join(format!("{:03}", i)),
                base_seed.wrapping_add(1_000_000 + i as u64),
            )
        }))
        .collect();

    let workers = threads.max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let errors = std::sync::Mutex::new(Vec::<Error>::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= jobs.len() {
                    break;
                }
                let (dir, seed) = &jobs[idx];
                let result = generate(&sample_scene(spec, *seed)).and_then(|video| {
                    fs::create_dir_all(dir)
                        .map_err(|e| Error::io(dir, e))
                        .and_then(|_| write_video(dir, &video))
                });
                if let Err(e) = result {
                    errors.lock().unwrap().push(e);
                    break;
                }
            });
        }
    });
    match errors.into_inner().unwrap().into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Sorted video directories of a dataset split.
pub fn list_split(dataset: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let dir = dataset.join(split);
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}
