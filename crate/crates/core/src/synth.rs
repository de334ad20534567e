//! Procedural clips of moving coloured shapes with templated captions.
//!
//! Everything downstream of a [`SynthSpec`] is a pure function of it: the
//! scene layout is drawn from a ChaCha8 stream seeded by `spec.seed`, so a
//! stored spec regenerates its clip bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::videotok::{load_clip, save_clip, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether offset `(dy, dx)` inside a `size`-sided box is covered.
    fn covers(self, dy: usize, dx: usize, size: usize) -> bool {
        let (y, x, s) = (dy as f64 + 0.5, dx as f64 + 0.5, size as f64);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (y - r).powi(2) + (x - r).powi(2) <= r * r
            }
            // apex at the top, base on the bottom row
            ShapeKind::Triangle => (x - s / 2.0).abs() <= y / 2.0,
            ShapeKind::Cross => {
                let band = (s / 3.0).max(1.0);
                (y - s / 2.0).abs() <= band / 2.0 || (x - s / 2.0).abs() <= band / 2.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Still,
    Drift,
    Bounce,
}

/// Realized motion of one shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Still,
    Left,
    Right,
    Up,
    Down,
    /// Right to the far edge and back.
    Bounce,
}

impl Motion {
    /// The caption word that names this motion; also the QA answer.
    pub fn word(self) -> &'static str {
        match self {
            Motion::Still => "still",
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Bounce => "bounces",
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Motion::Still => "stays still",
            Motion::Left => "moves left",
            Motion::Right => "moves right",
            Motion::Up => "moves up",
            Motion::Down => "moves down",
            Motion::Bounce => "bounces",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: usize,
    /// Side of each shape's bounding box in pixels.
    pub shape_size: usize,
    pub motions: Vec<MotionKind>,
    pub palette: Vec<Color>,
    pub template: u8,
}

impl SynthSpec {
    pub fn toy(seed: u64, frames: usize) -> Self {
        SynthSpec {
            seed,
            frames,
            height: 16,
            width: 16,
            shapes: 1,
            shape_size: 6,
            motions: vec![MotionKind::Still, MotionKind::Drift, MotionKind::Bounce],
            palette: Color::ALL.to_vec(),
            template: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            bail!(Config, "empty clip {}×{}×{}", self.frames, self.height, self.width);
        }
        if self.shape_size == 0 || self.shape_size > self.height.min(self.width) {
            bail!(Config, "shape size {} does not fit a {}×{} frame", self.shape_size, self.height, self.width);
        }
        if self.shapes == 0 || self.motions.is_empty() || self.palette.is_empty() {
            bail!(Config, "need at least one shape, motion kind and colour");
        }
        if self.template > 1 {
            bail!(Config, "unknown caption template {}", self.template);
        }
        Ok(())
    }
}

/// A shape with its attributes drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub color: Color,
    pub kind: ShapeKind,
    pub motion: Motion,
    /// Top-left corner at frame 0, for still shapes and the fixed axis.
    pub origin: (usize, usize),
}

impl ShapeInstance {
    /// Top-left corner `(y, x)` at frame `t`.
    pub fn position(&self, t: usize, spec: &SynthSpec) -> (usize, usize) {
        let s = spec.shape_size;
        let (span_y, span_x) = (spec.height - s, spec.width - s);
        let last = spec.frames.saturating_sub(1).max(1);
        let along = |span: usize, u: usize| (span * u + last / 2) / last;
        match self.motion {
            Motion::Still => self.origin,
            Motion::Right => (self.origin.0, along(span_x, t)),
            Motion::Left => (self.origin.0, along(span_x, last - t.min(last))),
            Motion::Down => (along(span_y, t), self.origin.1),
            Motion::Up => (along(span_y, last - t.min(last)), self.origin.1),
            Motion::Bounce => {
                // triangle wave over the clip: out and back
                let u = 2 * t.min(last);
                let u = if u <= last { u } else { 2 * last - u };
                (self.origin.0, along(span_x, u))
            }
        }
    }
}

/// Draws the scene a spec describes. Single-frame specs are always still.
pub fn scene(spec: &SynthSpec) -> Result<Vec<ShapeInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.shape_size;
    let mut out = Vec::with_capacity(spec.shapes);
    for _ in 0..spec.shapes {
        let color = spec.palette[rng.gen_range(0..spec.palette.len())];
        let kind = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
        let mk = spec.motions[rng.gen_range(0..spec.motions.len())];
        let dir = rng.gen_range(0..4);
        let origin = (rng.gen_range(0..=spec.height - s), rng.gen_range(0..=spec.width - s));
        let motion = match (spec.frames, mk) {
            (1, _) | (_, MotionKind::Still) => Motion::Still,
            (_, MotionKind::Bounce) => Motion::Bounce,
            (_, MotionKind::Drift) => [Motion::Left, Motion::Right, Motion::Up, Motion::Down][dir],
        };
        out.push(ShapeInstance { color, kind, motion, origin });
    }
    Ok(out)
}

fn describe(shapes: &[ShapeInstance], spec: &SynthSpec) -> String {
    let parts: Vec<String> = shapes
        .iter()
        .map(|s| {
            let noun = format!("{} {}", s.color.name(), s.kind.name());
            match (spec.template, spec.frames) {
                (0, 1) => format!("a {noun}"),
                (0, _) => format!("a {noun} {}", s.motion.phrase()),
                (_, 1) => format!("there is a {noun}"),
                _ => format!("there is a {noun} that {}", s.motion.phrase()),
            }
        })
        .collect();
    parts.join(" and ")
}

/// Renders the clip and its caption. Shapes paint in order over black.
pub fn generate(spec: &SynthSpec) -> Result<(VideoClip, String)> {
    let shapes = scene(spec)?;
    let (t_n, h, w, s) = (spec.frames, spec.height, spec.width, spec.shape_size);
    let mut data = vec![0.0; t_n * 3 * h * w];
    for t in 0..t_n {
        let frame = &mut data[t * 3 * h * w..(t + 1) * 3 * h * w];
        for sh in &shapes {
            let (y0, x0) = sh.position(t, spec);
            let rgb = sh.color.rgb();
            for dy in 0..s {
                for dx in 0..s {
                    if sh.kind.covers(dy, dx, s) {
                        for (ch, &v) in rgb.iter().enumerate() {
                            frame[ch * h * w + (y0 + dy) * w + x0 + dx] = v;
                        }
                    }
                }
            }
        }
    }
    let clip = VideoClip::from_frames(t_n, h, w, data, &format!("synth-{:016x}", spec.seed))?;
    Ok((clip, describe(&shapes, spec)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Question {
    Color,
    Shape,
    Motion,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub kind: Question,
    pub question: String,
    pub answer: String,
}

/// A question about the first shape whose answer is a caption word.
/// Motion questions are only asked of multi-frame clips.
pub fn qa_pair(spec: &SynthSpec) -> Result<QaPair> {
    let shapes = scene(spec)?;
    let s = shapes[0];
    let kinds: &[Question] = if spec.frames > 1 {
        &[Question::Color, Question::Shape, Question::Motion]
    } else {
        &[Question::Color, Question::Shape]
    };
    let kind = kinds[(spec.seed >> 7) as usize % kinds.len()];
    let (question, answer) = match kind {
        Question::Color => (format!("what color is the {}?", s.kind.name()), s.color.name()),
        Question::Shape => (format!("what shape is {}?", s.color.name()), s.kind.name()),
        Question::Motion => (format!("how does the {} move?", s.kind.name()), s.motion.word()),
    };
    Ok(QaPair {
        kind,
        question,
        answer: answer.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    pub stage: u8,
    pub seed: u64,
    /// Frames per clip for stages 2 and 3; stage 1 is always one frame.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape_size: usize,
    pub workers: usize,
}

impl CorpusConfig {
    pub fn toy(n: usize, stage: u8, seed: u64) -> Self {
        CorpusConfig {
            n,
            stage,
            seed,
            frames: 4,
            height: 16,
            width: 16,
            shape_size: 6,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            bail!(Config, "stage must be 1, 2 or 3, got {}", self.stage);
        }
        if self.stage > 1 && self.frames < 2 {
            bail!(Config, "stage {} needs multi-frame clips", self.stage);
        }
        Ok(())
    }

    /// Per-sample specs; sample seeds come from one ChaCha8 stream.
    pub fn specs(&self) -> Result<Vec<SynthSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (u64::from(self.stage) << 56));
        let frames = if self.stage == 1 { 1 } else { self.frames };
        (0..self.n)
            .map(|_| {
                let spec = SynthSpec {
                    height: self.height,
                    width: self.width,
                    shape_size: self.shape_size,
                    ..SynthSpec::toy(rng.next_u64(), frames)
                };
                spec.validate().map(|_| spec)
            })
            .collect()
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub stage: u8,
    pub spec: SynthSpec,
    pub clip_path: String,
    pub caption_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<QaPair>,
}

impl CorpusRecord {
    pub fn load_clip(&self, root: &Path) -> Result<VideoClip> {
        load_clip(&root.join(&self.clip_path))
    }

    pub fn load_caption(&self, root: &Path) -> Result<String> {
        let p = root.join(&self.caption_path);
        fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

fn write_sample(dir: &Path, stage: u8, index: usize, spec: &SynthSpec) -> Result<CorpusRecord> {
    let id = format!("s{stage}-{index:05}");
    let (clip, caption) = generate(spec)?;
    let clip_path = format!("clips/{id}.elvt");
    let caption_path = format!("captions/{id}.txt");
    save_clip(&dir.join(&clip_path), &clip)?;
    let cp = dir.join(&caption_path);
    fs::write(&cp, caption.as_bytes()).map_err(|e| Error::io(cp, e))?;
    Ok(CorpusRecord {
        id,
        stage,
        spec: spec.clone(),
        clip_path,
        caption_path,
        qa: if stage == 3 { Some(qa_pair(spec)?) } else { None },
    })
}

/// Writes clips, caption sidecars and a JSON-lines manifest under `dir`.
/// Work splits across `cfg.workers` threads; output order is by index.
pub fn make_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<Vec<CorpusRecord>> {
    let specs = cfg.specs()?;
    for sub in ["clips", "captions"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
    }
    let workers = cfg.workers.clamp(1, specs.len().max(1));
    let chunk = specs.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<CorpusRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, spec)| write_sample(dir, cfg.stage, ci * chunk + j, spec))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("corpus worker panicked")).collect()
    });
    let mut records = Vec::with_capacity(specs.len());
    for r in results {
        records.extend(r?);
    }
    let mp = dir.join(MANIFEST);
    let mut f = fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?;
    for r in &records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&mp, e))?;
    }
    Ok(records)
}

/// Reads `manifest.jsonl` from a corpus directory (or the file itself).
pub fn read_manifest(path: &Path) -> Result<(PathBuf, Vec<CorpusRecord>)> {
    let file = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", file.display(), i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((root, records))
}

/// In-memory sample used by training without touching disk.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub clip: VideoClip,
    pub caption: String,
    pub qa: Option<QaPair>,
}

pub fn samples(cfg: &CorpusConfig) -> Result<Vec<Sample>> {
    cfg.specs()?
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let (clip, caption) = generate(spec)?;
            Ok(Sample {
                id: format!("s{}-{i:05}", cfg.stage),
                clip,
                caption,
                qa: if cfg.stage == 3 { Some(qa_pair(spec)?) } else { None },
            })
        })
        .collect()
}

pub fn load_samples(path: &Path) -> Result<(u8, Vec<Sample>)> {
    let (root, records) = read_manifest(path)?;
    let Some(stage) = records.first().map(|r| r.stage) else {
        bail!(Input, "{} lists no samples", path.display());
    };
    if records.iter().any(|r| r.stage != stage) {
        bail!(Input, "{} mixes stages", path.display());
    }
    let samples = records
        .iter()
        .map(|r| {
            Ok(Sample {
                id: r.id.clone(),
                clip: r.load_clip(&root)?,
                caption: r.load_caption(&root)?,
                qa: r.qa.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stage, samples))
}
