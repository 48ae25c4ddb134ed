//! Synthetic road scenes and PPM/PGM image/mask pairs.
//!
//! Classes: 0 void, 1 road, 2 lanes, 3 curb.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const VOID: u8 = 0;
pub const ROAD: u8 = 1;
pub const LANES: u8 = 2;
pub const CURB: u8 = 3;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["void", "road", "lanes", "curb"];

pub const DESK_HEIGHT: usize = 48;
pub const DESK_WIDTH: usize = 160;

/// Allowed class shares of a generated mask.
pub const ROAD_SHARE: (f64, f64) = (0.30, 0.70);
pub const MAX_LANES_SHARE: f64 = 0.05;
pub const MAX_CURB_SHARE: f64 = 0.05;

/// Stripe and band widths in pixels, independent of the scene size.
pub const LANE_WIDTH: f64 = 3.0;
pub const CURB_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: u64,
    /// `(1, 3, h, w)`, every value a multiple of 1/255 in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `(h, w)` labels.
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Fraction of pixels carrying each label `0..num_classes`.
    pub fn class_shares(&self, num_classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; num_classes];
        for &m in &self.mask {
            if (m as usize) < num_classes {
                counts[m as usize] += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / self.mask.len() as f64).collect()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.n != 1 || s.c != 3 || self.mask.len() != s.plane() {
            return Err(Error::Ingestion(format!(
                "sample {} has image {s} and {} mask labels",
                self.id,
                self.mask.len()
            )));
        }
        check_labels(&self.mask, s.w, num_classes)?;
        if self.image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!("sample {} has non-finite pixels", self.id)));
        }
        Ok(())
    }
}

fn check_labels(mask: &[u8], width: usize, num_classes: usize) -> Result<()> {
    match mask.iter().position(|&m| m as usize >= num_classes) {
        Some(i) => Err(Error::Label {
            value: u32::from(mask[i]),
            row: i / width,
            col: i % width,
            num_classes,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Geometry(format!(
            "scene size {h}x{w} must be a positive multiple of 16"
        )));
    }
    Ok(())
}

struct Layout {
    horizon: f64,
    top: (f64, f64),
    bottom: (f64, f64),
    lanes: Vec<f64>,
    lane_start: f64,
}

impl Layout {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let horizon = hf * rng.random_range(0.25..0.40);
        let top_center = wf * rng.random_range(0.40..0.60);
        let top_half = wf * rng.random_range(0.02..0.06);
        let bottom_center = wf * rng.random_range(0.40..0.60);
        let bottom_half = wf * rng.random_range(0.40..0.65);
        let count = rng.random_range(1..=3usize);
        let lanes = (1..=count).map(|i| i as f64 / (count + 1) as f64).collect();
        Layout {
            horizon,
            top: (top_center, top_half),
            bottom: (bottom_center, bottom_half),
            lanes,
            lane_start: rng.random_range(0.08..0.2),
        }
    }

    /// Road edges at pixel row `y`, if the road is visible there.
    fn edges(&self, y: f64, h: f64) -> Option<(f64, f64, f64)> {
        if y < self.horizon {
            return None;
        }
        let t = (y - self.horizon) / (h - self.horizon);
        let center = self.top.0 + (self.bottom.0 - self.top.0) * t;
        let half = self.top.1 + (self.bottom.1 - self.top.1) * t;
        Some((center - half, center + half, t))
    }

    fn label(&self, x: f64, y: f64, h: f64) -> u8 {
        let Some((left, right, t)) = self.edges(y, h) else {
            return VOID;
        };
        if x >= left && x < right {
            if t >= self.lane_start {
                let lane = self.lanes.iter().any(|&f| {
                    let lx = left + (right - left) * f;
                    (x - lx).abs() < LANE_WIDTH / 2.0
                });
                if lane {
                    return LANES;
                }
            }
            ROAD
        } else if (x >= left - CURB_WIDTH && x < left) || (x >= right && x < right + CURB_WIDTH) {
            CURB
        } else {
            VOID
        }
    }
}

fn within_envelope(mask: &[u8]) -> bool {
    let n = mask.len() as f64;
    let share = |c: u8| mask.iter().filter(|&&m| m == c).count() as f64 / n;
    let road = share(ROAD);
    let distinct = (0..NUM_CLASSES as u8).filter(|&c| mask.contains(&c)).count();
    (ROAD_SHARE.0..=ROAD_SHARE.1).contains(&road)
        && share(LANES) <= MAX_LANES_SHARE
        && share(CURB) <= MAX_CURB_SHARE
        && distinct >= 2
}

const BASE_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.36, 0.46, 0.24],
    [0.33, 0.33, 0.36],
    [0.96, 0.94, 0.86],
    [0.82, 0.22, 0.18],
];
const SKY: [f64; 3] = [0.52, 0.70, 0.92];

/// Deterministic road scene. `h` and `w` must be multiples of 16.
pub fn generate_scene(seed: u64, h: usize, w: usize) -> Result<SegSample> {
    check_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hf = h as f64;
    let mut mask = vec![VOID; h * w];
    let mut layout = Layout::sample(&mut rng, h, w);
    for attempt in 0.. {
        for y in 0..h {
            for x in 0..w {
                mask[y * w + x] = layout.label(x as f64 + 0.5, y as f64 + 0.5, hf);
            }
        }
        if within_envelope(&mask) {
            break;
        }
        if attempt == 1000 {
            return Err(Error::Geometry(format!(
                "{h}x{w} is too small for the class-share envelope"
            )));
        }
        layout = Layout::sample(&mut rng, h, w);
    }

    let brightness = rng.random_range(0.6..1.3);
    let yellow = rng.random_bool(0.3);
    // coarse texture for the off-road area
    let cells = (h.div_ceil(4), w.div_ceil(4));
    let texture: Vec<f64> = (0..cells.0 * cells.1).map(|_| rng.random_range(-0.12..0.12)).collect();
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let label = mask[y * w + x];
            let mut rgb = BASE_COLORS[label as usize];
            let mut jitter = rng.random_range(-0.04..0.04);
            match label {
                VOID if (y as f64) < layout.horizon => {
                    let lift = 0.25 * (y as f64 / layout.horizon.max(1.0));
                    rgb = SKY.map(|v| v + lift * (1.0 - v));
                }
                VOID => jitter += texture[(y / 4) * cells.1 + x / 4],
                LANES if yellow => rgb = [0.95, 0.82, 0.20],
                CURB if ((x + y) / 3) % 2 == 1 => rgb = [0.90, 0.88, 0.86],
                _ => {}
            }
            for (c, base) in rgb.iter().enumerate() {
                let v = ((base + jitter) * brightness).clamp(0.0, 1.0);
                data[(c * h + y) * w + x] = ((v * 255.0).round() / 255.0) as f32;
            }
        }
    }
    Ok(SegSample {
        id: seed,
        image: Tensor::from_vec(Shape::new(1, 3, h, w), data)?,
        mask,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distinct per-sample seeds derived from one split seed.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        let s = splitmix(seed.wrapping_mul(0x100_0000_01B3) ^ splitmix(i));
        i += 1;
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}

pub fn make_split(n_train: usize, n_val: usize, n_test: usize, seed: u64, h: usize, w: usize) -> Result<DatasetSplit> {
    check_dims(h, w)?;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Spec("every split needs at least one sample".into()));
    }
    let seeds = sample_seeds(seed, n_train + n_val + n_test);
    let gen = |s: &[u64]| s.iter().map(|&s| generate_scene(s, h, w)).collect::<Result<Vec<_>>>();
    Ok(DatasetSplit {
        train: gen(&seeds[..n_train])?,
        val: gen(&seeds[n_train..n_train + n_val])?,
        test: gen(&seeds[n_train + n_val..])?,
        seed,
        height: h,
        width: w,
    })
}

/// Split sizes for `count` samples: 75% / 12.5% / 12.5%, each at least 1.
pub fn default_split_sizes(count: usize) -> Result<(usize, usize, usize)> {
    if count < 3 {
        return Err(Error::Spec(format!("need at least 3 samples to split, got {count}")));
    }
    let val = (count / 8).max(1);
    let test = (count / 8).max(1);
    Ok((count - val - test, val, test))
}

/// Stacks samples into an image batch and a flat `(n, h, w)` label vector.
pub fn batch<T: Scalar>(samples: &[&SegSample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let x = Tensor::stack(&images)?.cast();
    let labels = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok((x, labels))
}

// ---- PPM / PGM ----

struct Netpbm {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

fn parse_netpbm(bytes: &[u8], magic: &[u8; 2], channels: usize, path: &Path) -> Result<Netpbm> {
    let bad = |msg: String| Error::Ingestion(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(format!(
            "expected a binary {} file",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported, expected 255")));
    }
    let need = width * height * channels;
    let body = &bytes[pos..];
    if width == 0 || height == 0 || body.len() < need {
        return Err(bad(format!(
            "{width}x{height} needs {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok(Netpbm {
        width,
        height,
        pixels: body[..need].to_vec(),
    })
}

fn write_file(path: &Path, header: String, body: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(body))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::dim("image", format!("PPM needs a (1, 3, h, w) image, got {s}")));
    }
    let plane = s.plane();
    let d = image.data();
    let body: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    write_file(path, format!("P6\n{} {}\n255\n", s.w, s.h), &body)
}

pub fn write_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::dim("mask", format!("{} labels for {h}x{w}", mask.len())));
    }
    write_file(path, format!("P5\n{w} {h}\n255\n"), mask)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = parse_netpbm(&bytes, b"P6", 3, path)?;
    let plane = p.width * p.height;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in p.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, p.height, p.width), data)
}

/// Returns `(labels, height, width)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = parse_netpbm(&bytes, b"P5", 1, path)?;
    Ok((p.pixels, p.height, p.width))
}

/// Loads an image (P6) and its label mask (P5).
pub fn load_pair(image_path: &Path, mask_path: &Path, num_classes: usize) -> Result<SegSample> {
    let image = read_ppm(image_path)?;
    let (mask, h, w) = read_pgm(mask_path)?;
    let s = image.shape();
    if (s.h, s.w) != (h, w) {
        return Err(Error::Ingestion(format!(
            "image {} is {}x{} but mask {} is {h}x{w}",
            image_path.display(),
            s.h,
            s.w,
            mask_path.display()
        )));
    }
    check_labels(&mask, w, num_classes)?;
    Ok(SegSample { id: 0, image, mask })
}

/// Reads `image<TAB>mask` lines; relative paths resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Vec<SegSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, mask) = line
            .split_once('\t')
            .ok_or_else(|| Error::Ingestion(format!("{}:{}: expected `image<TAB>mask`", path.display(), lineno + 1)))?;
        let mut s = load_pair(&base.join(img), &base.join(mask), num_classes)?;
        s.id = out.len() as u64;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("{} lists no samples", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl DatasetSplit {
    pub fn parts(&self) -> [&[SegSample]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Writes `<part>/NNNNN.ppm|.pgm`, one `<part>.tsv` manifest per part,
    /// and `split.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, samples) in SPLIT_NAMES.iter().zip(self.parts()) {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut manifest = String::new();
            for (i, s) in samples.iter().enumerate() {
                let img = format!("{name}/{i:05}.ppm");
                let mask = format!("{name}/{i:05}.pgm");
                write_ppm(&dir.join(&img), &s.image)?;
                write_pgm(&dir.join(&mask), &s.mask, s.height(), s.width())?;
                manifest.push_str(&format!("{img}\t{mask}\n"));
            }
            let path = dir.join(format!("{name}.tsv"));
            std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        }
        let info = SplitInfo {
            seed: self.seed,
            height: self.height,
            width: self.width,
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        };
        let path = dir.join("split.json");
        std::fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`DatasetSplit::write`].
    pub fn read(dir: &Path, num_classes: usize) -> Result<Self> {
        let info_path = dir.join("split.json");
        let info: Option<SplitInfo> = match std::fs::read_to_string(&info_path) {
            Ok(t) => Some(serde_json::from_str(&t)?),
            Err(_) => None,
        };
        let load = |name: &str| load_manifest(&dir.join(format!("{name}.tsv")), num_classes);
        let train = load("train")?;
        let (height, width) = (train[0].height(), train[0].width());
        Ok(DatasetSplit {
            val: load("val")?,
            test: load("test")?,
            train,
            seed: info.map_or(0, |i| i.seed),
            height,
            width,
        })
    }
}

/// Where a dataset comes from: `gen:SEED:COUNT`, a split directory, or a
/// single manifest used for every part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Generated { seed: u64, count: usize },
    Directory(PathBuf),
    Manifest(PathBuf),
}

impl DataSource {
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(rest) = text.strip_prefix("gen:") {
            let bad = || Error::Spec(format!("expected gen:SEED:COUNT, got `{text}`"));
            let (seed, count) = rest.split_once(':').ok_or_else(bad)?;
            return Ok(DataSource::Generated {
                seed: seed.parse().map_err(|_| bad())?,
                count: count.parse().map_err(|_| bad())?,
            });
        }
        let path = PathBuf::from(text);
        if path.is_dir() {
            Ok(DataSource::Directory(path))
        } else {
            Ok(DataSource::Manifest(path))
        }
    }

    pub fn load(&self, h: usize, w: usize, num_classes: usize) -> Result<DatasetSplit> {
        match self {
            DataSource::Generated { seed, count } => {
                let (a, b, c) = default_split_sizes(*count)?;
                make_split(a, b, c, *seed, h, w)
            }
            DataSource::Directory(dir) => DatasetSplit::read(dir, num_classes),
            DataSource::Manifest(path) => {
                let samples = load_manifest(path, num_classes)?;
                let (height, width) = (samples[0].height(), samples[0].width());
                Ok(DatasetSplit {
                    train: samples.clone(),
                    val: samples.clone(),
                    test: samples,
                    seed: 0,
                    height,
                    width,
                })
            }
        }
    }
}
