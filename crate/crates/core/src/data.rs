//! Paired image/mask datasets, splits, and synthetic lung phantoms.
//!
//! A dataset root holds `images/<stem>.png` and `masks/<stem>.png`. Images are
//! resized bilinearly and mapped from `[0,255]` to `[-1,1]`; masks are resized
//! with nearest-neighbour sampling and thresholded at 127.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::GrayImage;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Mask pixels strictly above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// One loaded image/mask pair at working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[1,1,S,S]` in `[-1,1]`.
    pub input: Tensor,
    /// `[1,1,S,S]` in `{-1,+1}`, the generator target.
    pub target: Tensor,
    /// `[1,1,S,S]` in `{0,1}`, the view used by metrics.
    pub mask: Tensor,
}

impl SamplePair {
    /// Builds a pair from row-major 8-bit buffers of a square `size`×`size` image.
    pub fn from_bytes(id: impl Into<String>, size: usize, image: &[u8], mask: &[u8]) -> Result<Self> {
        let dims = [1, 1, size, size];
        let input = Tensor::new(&dims, image.iter().map(|&v| v as f32 / 127.5 - 1.0).collect())?;
        let fg: Vec<bool> = mask.iter().map(|&v| v > MASK_THRESHOLD).collect();
        let target = Tensor::new(&dims, fg.iter().map(|&f| if f { 1.0 } else { -1.0 }).collect())?;
        let mask = Tensor::new(&dims, fg.iter().map(|&f| f as u8 as f32).collect())?;
        Ok(Self { id: id.into(), input, target, mask })
    }

    pub fn size(&self) -> usize {
        self.input.dims()[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}, expected train or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    /// `None` until a split has been applied, or when the entry is held out of both sets.
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| a.stem.cmp(&b.stem));
        Self { entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries tagged with `split`, in manifest order.
    pub fn subset(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split)).count()
    }

    /// `stem<TAB>split` per line; untagged entries are written as `none`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let tag = e.split.map_or_else(|| "none".to_string(), |s| s.to_string());
            out.push_str(&format!("{}\t{}\n", e.stem, tag));
        }
        out
    }

    /// Replaces split tags with those read from [`to_tsv`](Self::to_tsv) output.
    /// Every stem in the text must exist in the manifest.
    pub fn apply_tsv(mut self, text: &str) -> Result<Self> {
        for e in &mut self.entries {
            e.split = None;
        }
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (stem, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("manifest line {}: expected stem<TAB>split", lineno + 1)))?;
            let idx = self
                .entries
                .binary_search_by(|e| e.stem.as_str().cmp(stem))
                .map_err(|_| Error::Dataset(format!("manifest line {}: unknown stem {stem:?}", lineno + 1)))?;
            self.entries[idx].split = match tag {
                "none" => None,
                t => Some(t.parse()?),
            };
        }
        Ok(self)
    }
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs `root/images/*.png` with `root/masks/*.png` by file stem.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let mut unmatched = Vec::new();
    let mut entries = Vec::with_capacity(images.len());
    let (mut i, mut j) = (0, 0);
    while i < images.len() || j < masks.len() {
        match (images.get(i), masks.get(j)) {
            (Some(a), Some(b)) if a.0 == b.0 => {
                entries.push(ManifestEntry { stem: a.0.clone(), image: a.1.clone(), mask: b.1.clone(), split: None });
                i += 1;
                j += 1;
            }
            (Some(a), Some(b)) if a.0 < b.0 => {
                unmatched.push(a.0.clone());
                i += 1;
            }
            (Some(a), None) => {
                unmatched.push(a.0.clone());
                i += 1;
            }
            (_, Some(b)) => {
                unmatched.push(b.0.clone());
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedStems(unmatched));
    }
    Ok(DatasetManifest::new(entries))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// The first `n_train` entries in sorted order train; the rest test.
    FixedPrefix,
    /// Entries are shuffled with this seed before taking the first `n_train`.
    Seeded(u64),
}

/// Tags `n_train` entries as train and the remainder as test.
pub fn split(manifest: &DatasetManifest, n_train: usize, mode: SplitMode) -> Result<DatasetManifest> {
    split_counts(manifest, n_train, None, mode)
}

/// Like [`split`], but tags at most `n_test` of the remaining entries as test.
/// Entries beyond `n_train + n_test` stay untagged.
pub fn split_counts(
    manifest: &DatasetManifest,
    n_train: usize,
    n_test: Option<usize>,
    mode: SplitMode,
) -> Result<DatasetManifest> {
    let total = manifest.len();
    if n_train > total {
        return Err(Error::InvalidArgument(format!("train count {n_train} exceeds dataset size {total}")));
    }
    let n_test = match n_test {
        Some(k) if n_train + k > total => {
            return Err(Error::InvalidArgument(format!(
                "train count {n_train} plus test count {k} exceeds dataset size {total}"
            )))
        }
        Some(k) => k,
        None => total - n_train,
    };
    let mut order: Vec<usize> = (0..total).collect();
    if let SplitMode::Seeded(seed) = mode {
        Rng::new(seed).shuffle(&mut order);
    }
    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.split = None;
    }
    for (rank, &idx) in order.iter().enumerate() {
        out.entries[idx].split = if rank < n_train {
            Some(Split::Train)
        } else if rank < n_train + n_test {
            Some(Split::Test)
        } else {
            None
        };
    }
    Ok(out)
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.to_luma8();
    if gray.width() == 0 || gray.height() == 0 {
        return Err(Error::Dataset(format!("{}: zero-extent image", path.display())));
    }
    Ok(gray)
}

fn fit(img: GrayImage, size: u32, filter: FilterType) -> GrayImage {
    if img.width() == size && img.height() == size {
        img
    } else {
        imageops::resize(&img, size, size, filter)
    }
}

/// Loads one 8-bit grayscale image resized bilinearly to `size`×`size`, scaled to `[-1,1]`.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor> {
    let img = fit(read_gray(path.as_ref())?, size as u32, FilterType::Triangle);
    Tensor::new(&[1, 1, size, size], img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect())
}

pub fn load_pair(entry: &ManifestEntry, size: usize) -> Result<SamplePair> {
    if size == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let image = fit(read_gray(&entry.image)?, size as u32, FilterType::Triangle);
    let mask = fit(read_gray(&entry.mask)?, size as u32, FilterType::Nearest);
    SamplePair::from_bytes(entry.stem.clone(), size, image.as_raw(), mask.as_raw())
}

/// Loads every entry tagged `split`, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Vec<SamplePair>> {
    manifest.subset(split).into_par_iter().map(|e| load_pair(e, size)).collect()
}

/// Value range of a tensor handed to [`save_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    /// `[-1,1]`, e.g. inputs and generator outputs.
    Signed,
    /// `[0,1]`, e.g. probabilities and binary masks.
    Unit,
}

fn quantize(v: f32, range: ValueRange) -> u8 {
    let scaled = match range {
        ValueRange::Signed => (v as f64 + 1.0) * 127.5,
        ValueRange::Unit => v as f64 * 255.0,
    };
    scaled.round().clamp(0.0, 255.0) as u8
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    let d = t.dims();
    if d.len() < 2 || d[..d.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::Shape(format!("expected a single image plane, got dims {d:?}")));
    }
    Ok((d[d.len() - 2], d[d.len() - 1]))
}

fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a single-plane tensor as an 8-bit grayscale PNG.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>, range: ValueRange) -> Result<()> {
    save_strip(&[(t, range)], path)
}

/// Writes equally tall planes side by side, e.g. input | prediction | ground truth.
pub fn save_strip(panels: &[(&Tensor, ValueRange)], path: impl AsRef<Path>) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::Empty("panel list"));
    }
    let shapes = panels.iter().map(|(t, _)| plane(t)).collect::<Result<Vec<_>>>()?;
    let h = shapes[0].0;
    if shapes.iter().any(|s| s.0 != h) {
        return Err(Error::Shape("panels must share a height".into()));
    }
    let w: usize = shapes.iter().map(|s| s.1).sum();
    let mut img = GrayImage::new(w as u32, h as u32);
    let mut x0 = 0;
    for ((t, range), (_, pw)) in panels.iter().zip(&shapes) {
        for (k, &v) in t.values().iter().enumerate() {
            img.put_pixel((x0 + k % pw) as u32, (k / pw) as u32, image::Luma([quantize(v, *range)]));
        }
        x0 += pw;
    }
    write_png(&img, path.as_ref())
}

/// Axis-aligned ellipse in unit coordinates (fractions of the image side).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Whether the center of pixel (`row`, `col`) lies inside.
    pub fn contains_pixel(&self, row: usize, col: usize, size: usize) -> bool {
        let u = (col as f64 + 0.5) / size as f64;
        let v = (row as f64 + 0.5) / size as f64;
        let dx = (u - self.cx) / self.rx;
        let dy = (v - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Gaussian noise std as a fraction of the 8-bit range.
    pub noise_level: f64,
    pub background: (u8, u8),
    pub body: (u8, u8),
    pub lung: (u8, u8),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            count: 8,
            image_size: 64,
            seed: 0,
            noise_level: 0.02,
            background: (10, 40),
            body: (150, 210),
            lung: (60, 100),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("phantom count must be at least 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidArgument(format!("phantom size {} is below 16", self.image_size)));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::InvalidArgument("noise level must be finite and non-negative".into()));
        }
        for (name, (lo, hi)) in [("background", self.background), ("body", self.body), ("lung", self.lung)] {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("{name} intensity range is empty")));
            }
        }
        Ok(())
    }
}

/// Shapes and intensities that define one phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
    pub background_level: u8,
    pub body_level: u8,
    pub lung_level: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub pair: SamplePair,
    pub geometry: PhantomGeometry,
    pub image_bytes: Vec<u8>,
    pub mask_bytes: Vec<u8>,
}

pub fn phantom_stem(index: usize) -> String {
    format!("phantom_{index:04}")
}

fn level(rng: &mut Rng, (lo, hi): (u8, u8)) -> u8 {
    lo + rng.below(hi as u64 - lo as u64 + 1) as u8
}

fn sample_geometry(cfg: &PhantomConfig, rng: &mut Rng) -> PhantomGeometry {
    let body = Ellipse {
        cx: 0.5 + rng.uniform_in(-0.03, 0.03),
        cy: 0.5 + rng.uniform_in(-0.03, 0.03),
        rx: rng.uniform_in(0.38, 0.45),
        ry: rng.uniform_in(0.30, 0.40),
    };
    let mut lung = |side: f64| Ellipse {
        cx: body.cx + side * rng.uniform_in(0.15, 0.20),
        cy: body.cy + rng.uniform_in(-0.04, 0.04),
        rx: rng.uniform_in(0.09, 0.13),
        ry: rng.uniform_in(0.15, 0.22),
    };
    let lungs = [lung(-1.0), lung(1.0)];
    PhantomGeometry {
        body,
        lungs,
        background_level: level(rng, cfg.background),
        body_level: level(rng, cfg.body),
        lung_level: level(rng, cfg.lung),
    }
}

fn render(cfg: &PhantomConfig, g: &PhantomGeometry, rng: &mut Rng) -> (Vec<u8>, Vec<u8>) {
    let s = cfg.image_size;
    let std = cfg.noise_level * 255.0;
    let mut image = Vec::with_capacity(s * s);
    let mut mask = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            let in_lung = g.lungs.iter().any(|e| e.contains_pixel(row, col, s));
            let base = if in_lung {
                g.lung_level
            } else if g.body.contains_pixel(row, col, s) {
                g.body_level
            } else {
                g.background_level
            };
            let v = if std > 0.0 { (base as f64 + rng.gaussian(0.0, std)).round().clamp(0.0, 255.0) as u8 } else { base };
            image.push(v);
            mask.push(if in_lung { 255 } else { 0 });
        }
    }
    (image, mask)
}

/// Synthesizes phantoms; phantom `k` depends only on `(seed, k)` and the config.
pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<Vec<Phantom>> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    (0..cfg.count)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.fork(k as u64);
            let geometry = sample_geometry(cfg, &mut rng);
            let (image_bytes, mask_bytes) = render(cfg, &geometry, &mut rng);
            let pair = SamplePair::from_bytes(phantom_stem(k), cfg.image_size, &image_bytes, &mask_bytes)?;
            Ok(Phantom { pair, geometry, image_bytes, mask_bytes })
        })
        .collect()
}

/// Generates phantoms and writes them under `root/images` and `root/masks`.
pub fn write_phantoms(cfg: &PhantomConfig, root: impl AsRef<Path>) -> Result<Vec<Phantom>> {
    let root = root.as_ref();
    let phantoms = generate_phantoms(cfg)?;
    let s = cfg.image_size as u32;
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    phantoms.par_iter().try_for_each(|p| -> Result<()> {
        let name = format!("{}.png", p.pair.id);
        let img = GrayImage::from_raw(s, s, p.image_bytes.clone()).expect("buffer matches size");
        write_png(&img, &root.join("images").join(&name))?;
        let mask = GrayImage::from_raw(s, s, p.mask_bytes.clone()).expect("buffer matches size");
        write_png(&mask, &root.join("masks").join(&name))
    })?;
    Ok(phantoms)
}
