//! Native-resolution video tokenization.
//!
//! Frames are cut into `P×P` pixel patches in raster order. Each frame opens
//! with a `FRAME_MARK` record and every patch row is closed by a `LINE_MARK`,
//! so a frame with an `R×C` grid contributes `R·C + R + 1` records.
//!
//! The default patch size of 28 is the only value consistent with the
//! published hybrid-resolution token totals: a 672-pixel square frame must
//! yield 601 records, i.e. a 24×24 grid (576 + 24 + 1), so `P = 672 / 24`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::numerics::{elvt, Tensor};

/// A clip of `T` RGB frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    pub fps: Option<(u32, u32)>,
    pub source_id: String,
}

impl VideoClip {
    /// `frames` must be shaped `T×3×H×W`.
    pub fn new(frames: Tensor, source_id: impl Into<String>) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[1] != 3 {
            bail!(Input, "clip tensor must be T×3×H×W, got {:?}", frames.shape());
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Input, "pixel value {v} outside [0, 1]");
        }
        Ok(VideoClip {
            frames,
            fps: None,
            source_id: source_id.into(),
        })
    }

    pub fn from_frames(t: usize, h: usize, w: usize, data: Vec<f64>, id: &str) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            bail!(Input, "degenerate clip {t}×{h}×{w}");
        }
        VideoClip::new(Tensor::new(vec![t, 3, h, w], data)?, id)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// The `3·H·W` channel-major pixels of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = 3 * self.height() * self.width();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// A single-frame clip holding frame `t`.
    pub fn select_frame(&self, t: usize) -> Result<VideoClip> {
        if t >= self.num_frames() {
            bail!(Index, "frame {t} of {}", self.num_frames());
        }
        let mut c = VideoClip::from_frames(
            1,
            self.height(),
            self.width(),
            self.frame(t).to_vec(),
            &self.source_id,
        )?;
        c.fps = self.fps;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionPolicy {
    pub patch: usize,
    pub max_edge_high: usize,
    pub max_edge_low: usize,
}

impl Default for ResolutionPolicy {
    fn default() -> Self {
        Self::runtime()
    }
}

impl ResolutionPolicy {
    /// Inference defaults: 672 high, 336 low.
    pub fn runtime() -> Self {
        ResolutionPolicy {
            patch: 28,
            max_edge_high: 672,
            max_edge_low: 336,
        }
    }

    /// The mixed-resolution token-budget setting: 672 high, 224 low.
    pub fn table5() -> Self {
        ResolutionPolicy {
            max_edge_low: 224,
            ..Self::runtime()
        }
    }

    pub fn max_edge(&self, tier: Tier) -> usize {
        match tier {
            Tier::High => self.max_edge_high,
            Tier::Low => self.max_edge_low,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.max_edge_high == 0 || self.max_edge_low == 0 {
            bail!(Config, "patch size and edge limits must be positive");
        }
        Ok(())
    }

    /// Post-resize `(height, width)` of an `h×w` frame at `tier`.
    ///
    /// Frames whose longest edge exceeds the limit are scaled down with the
    /// aspect ratio kept; each edge is then rounded half-up to a multiple of
    /// the patch size, at least one patch and at most the limit.
    pub fn resized_dims(&self, h: usize, w: usize, tier: Tier) -> (usize, usize) {
        let p = self.patch;
        let max = self.max_edge(tier);
        let longest = h.max(w);
        let edge = |e: usize| {
            // scaled = e·max/longest when shrinking; patches = round(scaled / p)
            let (num, den) = if longest > max {
                (e * max, longest * p)
            } else {
                (e, p)
            };
            let mut n = (2 * num + den) / (2 * den);
            if n * p > max {
                n = max / p;
            }
            n.max(1) * p
        };
        (edge(h), edge(w))
    }

    pub fn grid(&self, h: usize, w: usize, tier: Tier) -> (usize, usize) {
        let (rh, rw) = self.resized_dims(h, w, tier);
        (rh / self.patch, rw / self.patch)
    }
}

/// Record count of one frame with an `rows×cols` grid.
pub fn frame_token_count(rows: usize, cols: usize) -> usize {
    rows * cols + rows + 1
}

/// Bilinear resize of every frame to the tier's dimensions.
pub fn resize_to_policy(clip: &VideoClip, policy: &ResolutionPolicy, tier: Tier) -> Result<VideoClip> {
    policy.validate()?;
    let (h, w) = (clip.height(), clip.width());
    let (nh, nw) = policy.resized_dims(h, w, tier);
    if (nh, nw) == (h, w) {
        return Ok(clip.clone());
    }
    let t = clip.num_frames();
    let mut out = Vec::with_capacity(t * 3 * nh * nw);
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..nh).map(|y| taps(y, sy, h)).collect();
    let xs: Vec<_> = (0..nw).map(|x| taps(x, sx, w)).collect();
    for f in 0..t {
        let src = clip.frame(f);
        for ch in 0..3 {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
    }
    let mut resized = VideoClip::from_frames(t, nh, nw, out, &clip.source_id)?;
    resized.fps = clip.fps;
    Ok(resized)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    FrameMark,
    LineMark,
    Patch,
    Text,
}

/// One element of a token stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenRecord {
    FrameMark { t: usize },
    LineMark { t: usize, r: usize },
    /// `pixels` holds `3·P²` values, channel-major then row-major within the patch.
    Patch { t: usize, r: usize, c: usize, pixels: Vec<f64> },
    Text { id: u32 },
}

impl TokenRecord {
    pub fn kind(&self) -> TokenKind {
        match self {
            TokenRecord::FrameMark { .. } => TokenKind::FrameMark,
            TokenRecord::LineMark { .. } => TokenKind::LineMark,
            TokenRecord::Patch { .. } => TokenKind::Patch,
            TokenRecord::Text { .. } => TokenKind::Text,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub frame_marks: usize,
    pub line_marks: usize,
    pub patches: usize,
    pub text: usize,
}

impl KindCounts {
    pub fn visual(&self) -> usize {
        self.frame_marks + self.line_marks + self.patches
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenStream {
    records: Vec<TokenRecord>,
    patch: usize,
}

impl TokenStream {
    pub fn new(patch: usize) -> Self {
        TokenStream {
            records: Vec::new(),
            patch,
        }
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> KindCounts {
        let mut c = KindCounts::default();
        for r in &self.records {
            match r.kind() {
                TokenKind::FrameMark => c.frame_marks += 1,
                TokenKind::LineMark => c.line_marks += 1,
                TokenKind::Patch => c.patches += 1,
                TokenKind::Text => c.text += 1,
            }
        }
        c
    }

    pub fn push_text(&mut self, ids: &[u32]) {
        self.records
            .extend(ids.iter().map(|&id| TokenRecord::Text { id }));
    }

    /// Appends one frame's records with frame index `t`.
    pub fn push_frame(&mut self, pixels: &[f64], h: usize, w: usize, t: usize) -> Result<()> {
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            bail!(
                Contract,
                "frame {h}×{w} is not a multiple of patch size {p}; resize first"
            );
        }
        if pixels.len() != 3 * h * w {
            bail!(Dimension, "frame buffer has {} values for 3×{h}×{w}", pixels.len());
        }
        let (rows, cols) = (h / p, w / p);
        self.records.push(TokenRecord::FrameMark { t });
        for r in 0..rows {
            for c in 0..cols {
                let mut patch = Vec::with_capacity(3 * p * p);
                for ch in 0..3 {
                    let plane = &pixels[ch * h * w..(ch + 1) * h * w];
                    for py in 0..p {
                        let y = r * p + py;
                        patch.extend_from_slice(&plane[y * w + c * p..y * w + c * p + p]);
                    }
                }
                self.records.push(TokenRecord::Patch {
                    t,
                    r,
                    c,
                    pixels: patch,
                });
            }
            self.records.push(TokenRecord::LineMark { t, r });
        }
        Ok(())
    }

    pub fn extend(&mut self, other: TokenStream) -> Result<()> {
        if other.patch != self.patch {
            bail!(Contract, "cannot join streams with patch sizes {} and {}", self.patch, other.patch);
        }
        self.records.extend(other.records);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("token records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, patch: usize) -> Result<Self> {
        let mut s = TokenStream::new(patch);
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: TokenRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            if let TokenRecord::Patch { pixels, .. } = &rec {
                if pixels.len() != 3 * patch * patch {
                    bail!(Contract, "line {}: patch payload of {} values", i + 1, pixels.len());
                }
            }
            s.records.push(rec);
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Tokenizes a clip whose frames are already multiples of the patch size.
pub fn tokenize(clip: &VideoClip, policy: &ResolutionPolicy) -> Result<TokenStream> {
    policy.validate()?;
    let mut s = TokenStream::new(policy.patch);
    for t in 0..clip.num_frames() {
        s.push_frame(clip.frame(t), clip.height(), clip.width(), t)?;
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub t: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Recovers each frame's patch grid from marker positions.
pub fn detokenize_layout(stream: &TokenStream) -> Result<Vec<FrameLayout>> {
    let mut layouts: Vec<FrameLayout> = Vec::new();
    let mut in_text = false;
    // columns seen so far in the open row
    let mut open_cols = 0usize;
    for (i, rec) in stream.records().iter().enumerate() {
        match rec {
            TokenRecord::Text { .. } => {
                if open_cols != 0 {
                    bail!(Structure, "record {i}: text inside an unterminated patch row");
                }
                in_text = true;
            }
            _ if in_text => bail!(Structure, "record {i}: visual record after text"),
            TokenRecord::FrameMark { t } => {
                if open_cols != 0 {
                    bail!(Structure, "record {i}: frame mark inside an unterminated row");
                }
                if let Some(prev) = layouts.last() {
                    if prev.rows == 0 {
                        bail!(Structure, "frame {} has no patch rows", prev.t);
                    }
                }
                if *t != layouts.len() {
                    bail!(Structure, "record {i}: frame index {t}, expected {}", layouts.len());
                }
                layouts.push(FrameLayout { t: *t, rows: 0, cols: 0 });
            }
            TokenRecord::Patch { t, r, c, .. } => {
                let Some(cur) = layouts.last() else {
                    bail!(Structure, "record {i}: patch before any frame mark");
                };
                if *t != cur.t || *r != cur.rows || *c != open_cols {
                    bail!(
                        Structure,
                        "record {i}: patch ({t},{r},{c}) out of raster order, expected ({},{},{open_cols})",
                        cur.t,
                        cur.rows
                    );
                }
                open_cols += 1;
            }
            TokenRecord::LineMark { t, r } => {
                let Some(cur) = layouts.last_mut() else {
                    bail!(Structure, "record {i}: line mark before any frame mark");
                };
                if *t != cur.t || *r != cur.rows || open_cols == 0 {
                    bail!(Structure, "record {i}: line mark ({t},{r}) does not close a row");
                }
                if cur.rows > 0 && open_cols != cur.cols {
                    bail!(
                        Structure,
                        "frame {t}: row {r} has {open_cols} patches, earlier rows {}",
                        cur.cols
                    );
                }
                cur.cols = open_cols;
                cur.rows += 1;
                open_cols = 0;
            }
        }
    }
    if open_cols != 0 {
        bail!(Structure, "stream ends inside a patch row");
    }
    if let Some(last) = layouts.last() {
        if last.rows == 0 {
            bail!(Structure, "frame {} has no patch rows", last.t);
        }
    }
    Ok(layouts)
}

/// Byte-level text vocabulary: ids `0..256` are bytes, then the specials.
pub mod vocab {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const SEP: u32 = 258;
    pub const PAD: u32 = 259;
    /// Smallest vocabulary that holds every byte and special.
    pub const MIN_SIZE: usize = 260;

    pub fn encode(text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Decodes byte ids, dropping specials.
    pub fn decode(ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Loads a clip from a directory of binary PPM frames (lexicographic order)
/// or a single `ELVT` tensor shaped `T×3×H×W`.
pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!(Input, "{} holds no .ppm frames", path.display());
        }
        let mut data = Vec::new();
        let mut dims = None;
        for f in &files {
            let img = image::io::Reader::open(f)
                .map_err(|e| Error::io(f, e))?
                .with_guessed_format()
                .map_err(|e| Error::io(f, e))?
                .decode()
                .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if *dims.get_or_insert((h, w)) != (h, w) {
                bail!(Input, "{}: frame size differs from the first frame", f.display());
            }
            let raw = img.as_raw();
            for ch in 0..3 {
                data.extend((0..h * w).map(|i| raw[i * 3 + ch] as f64 / 255.0));
            }
        }
        let (h, w) = dims.expect("at least one frame");
        VideoClip::from_frames(files.len(), h, w, data, &id)
    } else {
        let t = elvt::read(path)?;
        VideoClip::new(t, id)
    }
}

pub fn save_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    elvt::write(path, clip.frames())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solid(t: usize, h: usize, w: usize, v: f64) -> VideoClip {
        VideoClip::from_frames(t, h, w, vec![v; t * 3 * h * w], "solid").unwrap()
    }

    #[test]
    fn resize_examples() {
        let p = ResolutionPolicy::runtime();
        assert_eq!(p.resized_dims(672, 672, Tier::High), (672, 672));
        // 1344 wide, 756 tall: scaled 672×378, 378 is 13.5 patches and rounds up
        assert_eq!(p.resized_dims(756, 1344, Tier::High), (392, 672));
        assert_eq!(ResolutionPolicy::table5().resized_dims(224, 224, Tier::Low), (224, 224));
        // tiny frames grow to one patch
        assert_eq!(p.resized_dims(5, 9, Tier::High), (28, 28));
    }

    #[test]
    fn resize_preserves_range_and_unchanged_case() {
        let c = solid(2, 672, 672, 0.25);
        let p = ResolutionPolicy::runtime();
        assert_eq!(resize_to_policy(&c, &p, Tier::High).unwrap(), c);
        let small = resize_to_policy(&c, &p, Tier::Low).unwrap();
        assert_eq!((small.height(), small.width()), (336, 336));
        assert!(small.frames().data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn token_counts_per_frame() {
        let p = ResolutionPolicy::table5();
        let s = tokenize(&solid(1, 672, 672, 0.5), &p).unwrap();
        let c = s.counts();
        assert_eq!((c.patches, c.line_marks, c.frame_marks), (576, 24, 1));
        assert_eq!(s.len(), 601);
        assert_eq!(tokenize(&solid(1, 224, 224, 0.5), &p).unwrap().len(), 73);
        assert_eq!(tokenize(&solid(1, 28, 28, 0.5), &p).unwrap().len(), 3);
        assert_eq!(tokenize(&solid(16, 672, 672, 0.5), &p).unwrap().len(), 9616);
    }

    #[test]
    fn mixed_resolution_totals() {
        let high = frame_token_count(24, 24);
        let low = frame_token_count(8, 8);
        let totals: Vec<usize> = [(8, 16), (8, 32), (16, 0), (16, 8), (16, 16), (32, 0)]
            .iter()
            .map(|(h, l)| h * high + l * low)
            .collect();
        assert_eq!(totals, vec![5976, 7144, 9616, 10200, 10784, 19232]);
    }

    #[test]
    fn unaligned_frame_is_contract_error() {
        let p = ResolutionPolicy::runtime();
        assert!(matches!(tokenize(&solid(1, 30, 28, 0.0), &p), Err(Error::Contract(_))));
    }

    #[test]
    fn patch_payload_layout() {
        // 2×2 frame, patch 1: payload is the three channel values of one pixel
        let data: Vec<f64> = (0..12).map(|v| v as f64 / 12.0).collect();
        let clip = VideoClip::from_frames(1, 2, 2, data, "x").unwrap();
        let policy = ResolutionPolicy { patch: 1, max_edge_high: 2, max_edge_low: 2 };
        let s = tokenize(&clip, &policy).unwrap();
        match &s.records()[2] {
            TokenRecord::Patch { r: 0, c: 1, pixels, .. } => {
                assert_eq!(pixels, &vec![1.0 / 12.0, 5.0 / 12.0, 9.0 / 12.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layout_examples() {
        let p = ResolutionPolicy::runtime();
        let s = tokenize(&solid(1, 672, 672, 0.1), &p).unwrap();
        assert_eq!(detokenize_layout(&s).unwrap(), vec![FrameLayout { t: 0, rows: 24, cols: 24 }]);
        let s = tokenize(&solid(1, 224, 448, 0.1), &p).unwrap();
        assert_eq!(detokenize_layout(&s).unwrap()[0], FrameLayout { t: 0, rows: 8, cols: 16 });
        assert!(detokenize_layout(&TokenStream::new(28)).unwrap().is_empty());
    }

    #[test]
    fn malformed_streams() {
        let p = ResolutionPolicy { patch: 1, max_edge_high: 4, max_edge_low: 4 };
        let s = tokenize(&solid(2, 2, 2, 0.3), &p).unwrap();
        let mut recs = s.records().to_vec();
        recs.swap(1, 2);
        let bad = TokenStream { records: recs, patch: 1 };
        assert!(matches!(detokenize_layout(&bad), Err(Error::Structure(_))));
        let mut recs = s.records().to_vec();
        recs.remove(3); // drop first LINE
        let bad = TokenStream { records: recs, patch: 1 };
        assert!(detokenize_layout(&bad).is_err());
        let mut recs = s.records().to_vec();
        recs.insert(0, TokenRecord::Text { id: 3 });
        let bad = TokenStream { records: recs, patch: 1 };
        assert!(detokenize_layout(&bad).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let p = ResolutionPolicy { patch: 2, max_edge_high: 4, max_edge_low: 4 };
        let mut s = tokenize(&solid(1, 2, 4, 0.5), &p).unwrap();
        s.push_text(&vocab::encode("hi"));
        let text = s.to_jsonl();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "FRAME_MARK");
        assert_eq!(TokenStream::from_jsonl(&text, 2).unwrap(), s);
    }

    #[test]
    fn ppm_directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        for (i, v) in [0u8, 255].iter().enumerate() {
            let mut bytes = b"P6\n2 1\n255\n".to_vec();
            bytes.extend_from_slice(&[*v, 0, 0, *v, 0, 255]);
            fs::write(dir.path().join(format!("f{i}.ppm")), bytes).unwrap();
        }
        let clip = load_clip(dir.path()).unwrap();
        assert_eq!((clip.num_frames(), clip.height(), clip.width()), (2, 1, 2));
        // frame 1, channel 0 (red) is all ones; channel 2 (blue) is [0, 1]
        assert_eq!(&clip.frame(1)[0..2], &[1.0, 1.0]);
        assert_eq!(&clip.frame(1)[4..6], &[0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn count_formula_and_layout_round_trip(rows in 1usize..6, cols in 1usize..6, t in 1usize..4, p in 1usize..4) {
            let clip = solid(t, rows * p, cols * p, 0.5);
            let policy = ResolutionPolicy { patch: p, max_edge_high: 64, max_edge_low: 64 };
            let s = tokenize(&clip, &policy).unwrap();
            prop_assert_eq!(s.len(), t * frame_token_count(rows, cols));
            let c = s.counts();
            prop_assert_eq!(c.frame_marks, t);
            prop_assert_eq!(c.line_marks, t * rows);
            let layout = detokenize_layout(&s).unwrap();
            prop_assert!(layout.iter().all(|l| l.rows == rows && l.cols == cols));
            prop_assert_eq!(layout.len(), t);
        }

        #[test]
        fn resized_edges_are_patch_multiples(h in 1usize..2000, w in 1usize..2000) {
            let p = ResolutionPolicy::runtime();
            for tier in [Tier::High, Tier::Low] {
                let (rh, rw) = p.resized_dims(h, w, tier);
                prop_assert!(rh % 28 == 0 && rw % 28 == 0 && rh >= 28 && rw >= 28);
                prop_assert!(rh.max(rw) <= p.max_edge(tier));
            }
        }
    }
}
