//! Network input assembly, residual extraction, dataset manifests and the
//! synthetic identity-card corpus.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::training::TrainSample;

pub const INPUT_SIZE: (usize, usize) = (256, 256);
pub const CARD_HEIGHT: u32 = 320;
pub const CARD_WIDTH: u32 = 480;
pub const MANIFEST_FILE: &str = "manifest.tsv";
const RESIDUAL_SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bonafide = 0,
    Attack = 1,
}

impl Label {
    pub fn as_f32(self) -> f32 {
        self as u8 as f32
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" | "bonafide" => Ok(Label::Bonafide),
            "1" | "attack" => Ok(Label::Attack),
            _ => Err(Error::format("label", format!("expected 0/1 or bonafide/attack, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::format("split tag", format!("expected train/val/test, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    /// `None` is written as `-` and means an all-zero mask.
    pub mask: Option<PathBuf>,
    pub label: Label,
}

/// Paths in entries are relative to `root`, the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Option<Split>,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "id\timage\tmask\tlabel";

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        if let Some(split) = self.split {
            s.push_str(&format!("# split: {split}\n"));
        }
        s.push_str(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let mask = e.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string());
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.image.display(), mask, e.label as u8));
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut split = None;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("split:") {
                    split = Some(tag.trim().parse()?);
                }
                continue;
            }
            if line == MANIFEST_HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, image, mask, label] = fields[..] else {
                return Err(Error::format("manifest", format!("line {lineno}: expected 4 tab-separated fields")));
            };
            if id.is_empty() {
                return Err(Error::format("manifest", format!("line {lineno}: empty id")));
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::format("manifest", format!("line {lineno}: duplicate id {id}")));
            }
            entries.push(ManifestEntry {
                id: id.to_string(),
                image: PathBuf::from(image),
                mask: (mask != "-").then(|| PathBuf::from(mask)),
                label: label.parse()?,
            });
        }
        Ok(DatasetManifest {
            root: root.into(),
            split,
            entries,
        })
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Contract(format!("id {id} not in manifest")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_tsv().as_bytes())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, root)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    /// 255 marks a forged pixel.
    pub mask: GrayImage,
    pub label: Label,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.mask.dimensions() != self.image.dimensions() {
            return Err(Error::Contract(format!(
                "{}: mask {:?} does not match image {:?}",
                self.id,
                self.mask.dimensions(),
                self.image.dimensions()
            )));
        }
        if let Some(v) = self.mask.as_raw().iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::Contract(format!("{}: mask value {v} is not binary", self.id)));
        }
        let forged = self.mask.as_raw().contains(&255);
        match (self.label, forged) {
            (Label::Bonafide, true) => Err(Error::Contract(format!("{}: bonafide sample has forged pixels", self.id))),
            (Label::Attack, false) => Err(Error::Contract(format!("{}: attack sample has an empty mask", self.id))),
            _ => Ok(()),
        }
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(decode(path.as_ref())?.to_rgb8())
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    match decode(path)? {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::format(
            "mask image",
            format!("{}: expected 8-bit grayscale, got {:?}", path.display(), other.color()),
        )),
    }
}

fn write_pnm(path: &Path, bytes: &[u8], w: u32, h: u32, color: ExtendedColorType, sub: PnmSubtype) -> Result<()> {
    let mut buf = Vec::with_capacity(bytes.len() + 32);
    PnmEncoder::new(BufWriter::new(&mut buf))
        .with_subtype(sub)
        .write_image(bytes, w, h, color)
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, &buf)
}

/// Binary PPM (P6).
pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let sub = PnmSubtype::Pixmap(SampleEncoding::Binary);
    write_pnm(path.as_ref(), img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8, sub)
}

/// Binary PGM (P5).
pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let sub = PnmSubtype::Graymap(SampleEncoding::Binary);
    write_pnm(path.as_ref(), img.as_raw(), img.width(), img.height(), ExtendedColorType::L8, sub)
}

pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<Sample> {
    let e = manifest.entry(id)?;
    let image = read_rgb(manifest.root.join(&e.image))?;
    let mask = match &e.mask {
        Some(m) => read_gray(manifest.root.join(m))?,
        None => GrayImage::new(image.width(), image.height()),
    };
    let sample = Sample {
        id: e.id.clone(),
        image,
        mask,
        label: e.label,
    };
    sample.validate()?;
    Ok(sample)
}

/// A single-channel f32 map stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "plane buffer length");
        Plane { height, width, data }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

pub fn green_channel(image: &RgbImage) -> Plane {
    let data = image.pixels().map(|p| p[1] as f32 / 255.0).collect();
    Plane::new(image.height() as usize, image.width() as usize, data)
}

/// Laplacian high-pass of the gray mean, standardized per image.
pub fn highpass_residual(image: &RgbImage) -> Plane {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let gray: Vec<f32> = image
        .pixels()
        .map(|p| (p[0] as f32 + p[1] as f32 + p[2] as f32) / (3.0 * 255.0))
        .collect();
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            gray[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let lap = 4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1);
            out.push(lap / 4.0);
        }
    }
    standardize(&mut out);
    Plane::new(h, w, out)
}

/// Zero mean, unit variance; the deviation is floored so flat maps stay zero.
pub fn standardize(v: &mut [f32]) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(RESIDUAL_SIGMA_FLOOR);
    for x in v.iter_mut() {
        *x = ((*x as f64 - mean) / sd) as f32;
    }
}

/// Bilinear resampling with half-pixel centers; equal sizes copy the input.
pub fn resize_bilinear(src: &Plane, height: usize, width: usize) -> Plane {
    if (src.height, src.width) == (height, width) {
        return src.clone();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let ys = axis(src.height, height);
    let xs = axis(src.width, width);
    let mut out = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src.at(y0, x0) * (1.0 - fx) + src.at(y0, x1) * fx;
            let bottom = src.at(y1, x0) * (1.0 - fx) + src.at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Plane::new(height, width, out)
}

/// Nearest-neighbour resampling of a 0/255 mask into a {0, 1} plane.
pub fn resize_mask(mask: &GrayImage, height: usize, width: usize) -> Plane {
    let (h, w) = (mask.height() as usize, mask.width() as usize);
    let pick = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let raw = mask.as_raw();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = pick(y, h, height);
        for x in 0..width {
            let sx = pick(x, w, width);
            out.push(if raw[sy * w + sx] as f32 / 255.0 >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Plane::new(height, width, out)
}

/// Source of the noise-residual channel.
#[derive(Clone, Debug, PartialEq)]
pub enum ResidualExtractor {
    HighPassStandIn,
    /// `<dir>/<id>.btf`, each an H×W (or 1×H×W) map at the image's native size.
    FromFile(PathBuf),
}

impl ResidualExtractor {
    pub fn extract(&self, sample: &Sample) -> Result<Plane> {
        match self {
            ResidualExtractor::HighPassStandIn => Ok(highpass_residual(&sample.image)),
            ResidualExtractor::FromFile(dir) => {
                let path = dir.join(format!("{}.btf", sample.id));
                if !path.exists() {
                    return Err(Error::Contract(format!("no residual map for {} at {}", sample.id, path.display())));
                }
                let t = Tensor::read_btf(&path)?;
                let (h, w) = (sample.image.height() as usize, sample.image.width() as usize);
                let dims: Vec<usize> = t.shape().iter().copied().filter(|&d| d != 1).collect();
                if dims != [h, w] {
                    return Err(Error::shape("residual map", t.shape(), &[h, w]));
                }
                let mut data = t.into_data();
                standardize(&mut data);
                Ok(Plane::new(h, w, data))
            }
        }
    }
}

/// Returns the 1×2×H×W network input and the 1×1×H×W binary mask target.
pub fn assemble_input(sample: &Sample, extractor: &ResidualExtractor, size: (usize, usize)) -> Result<(Tensor, Tensor)> {
    sample.validate()?;
    let (h, w) = size;
    let green = resize_bilinear(&green_channel(&sample.image), h, w);
    let residual = resize_bilinear(&extractor.extract(sample)?, h, w);
    let mut data = green.data;
    data.extend_from_slice(&residual.data);
    let input = Tensor::new([1, 2, h, w], data)?;
    let mask = Tensor::new([1, 1, h, w], resize_mask(&sample.mask, h, w).data)?;
    Ok((input, mask))
}

pub fn train_sample(sample: &Sample, extractor: &ResidualExtractor, size: (usize, usize)) -> Result<TrainSample> {
    let (input, mask) = assemble_input(sample, extractor, size)?;
    Ok(TrainSample {
        id: sample.id.clone(),
        input,
        mask,
        label: sample.label.as_f32(),
    })
}

/// Loads and assembles every entry of a manifest, in manifest order.
pub fn load_train_samples(
    manifest: &DatasetManifest,
    extractor: &ResidualExtractor,
    size: (usize, usize),
) -> Result<Vec<TrainSample>> {
    manifest
        .entries
        .iter()
        .map(|e| train_sample(&load_sample(manifest, &e.id)?, extractor, size))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Splice,
    Renoise,
    Blur,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Splice, AttackKind::Renoise, AttackKind::Blur];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Splice => "splice",
            AttackKind::Renoise => "renoise",
            AttackKind::Blur => "blur",
        }
    }
}

/// Attack `i` of a synthetic corpus uses this manipulation.
pub fn attack_kind(i: usize) -> AttackKind {
    AttackKind::ALL[i % 3]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    y: u32,
    x: u32,
    h: u32,
    w: u32,
}

impl Rect {
    fn contains(&self, y: u32, x: u32) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

struct Card {
    image: RgbImage,
    /// Stripe blocks, then the portrait's bounding box.
    regions: Vec<Rect>,
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render_card(rng: &mut SplitMix64) -> Card {
    let (h, w) = (CARD_HEIGHT, CARD_WIDTH);
    let texture = Normal::new(0.0f32, 4.0).unwrap();
    let sensor = Normal::new(0.0f32, 2.0).unwrap();
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(140..=220) as f32);
    let mut buf = vec![0f32; (h * w * 3) as usize];
    for px in buf.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = base[c] + texture.sample(rng);
        }
    }
    let mut regions = Vec::new();

    // Portrait on the left third.
    let (cy, cx) = (rng.random_range(130..190) as f32, rng.random_range(80..130) as f32);
    let (ry, rx) = (rng.random_range(60..85) as f32, rng.random_range(40..60) as f32);
    let face: [f32; 3] = std::array::from_fn(|_| rng.random_range(70..170) as f32);
    let portrait = Rect {
        y: (cy - ry) as u32,
        x: (cx - rx) as u32,
        h: (2.0 * ry) as u32,
        w: (2.0 * rx) as u32,
    };
    for y in portrait.y..portrait.y + portrait.h {
        for x in portrait.x..portrait.x + portrait.w {
            let (dy, dx) = ((y as f32 + 0.5 - cy) / ry, (x as f32 + 0.5 - cx) / rx);
            if dy * dy + dx * dx <= 1.0 {
                let i = ((y * w + x) * 3) as usize;
                for c in 0..3 {
                    buf[i + c] = face[c] + texture.sample(rng);
                }
            }
        }
    }

    // Text-like stripe blocks on the right.
    let n_blocks = rng.random_range(3..=5);
    let mut top = rng.random_range(20..40);
    for _ in 0..n_blocks {
        let bh = rng.random_range(24..48);
        if top + bh > h - 10 {
            break;
        }
        let bw = rng.random_range(120..240);
        let bx = rng.random_range(200..w - bw - 10);
        let ink = rng.random_range(30..70) as f32;
        let block = Rect { y: top, x: bx, h: bh, w: bw };
        let mut y = block.y;
        while y < block.y + block.h {
            let line = rng.random_range(3..=5).min(block.y + block.h - y);
            let mut x = block.x;
            while x < block.x + block.w {
                let word = rng.random_range(6..24).min(block.x + block.w - x);
                for yy in y..y + line {
                    for xx in x..x + word {
                        let i = ((yy * w + xx) * 3) as usize;
                        for c in 0..3 {
                            buf[i + c] = ink + texture.sample(rng);
                        }
                    }
                }
                x += word + rng.random_range(3..8);
            }
            y += line + rng.random_range(3..=5);
        }
        regions.push(block);
        top += bh + rng.random_range(12..30);
    }
    regions.push(portrait);

    for v in buf.iter_mut() {
        *v += sensor.sample(rng);
    }
    let image = RgbImage::from_raw(w, h, buf.into_iter().map(quantize).collect()).expect("card buffer");
    Card { image, regions }
}

/// A rectangle covering 8–15% of the card that overlaps `target`.
fn attack_rect(rng: &mut SplitMix64, target: Rect) -> Rect {
    let (h, w) = (CARD_HEIGHT, CARD_WIDTH);
    let total = (h * w) as f64;
    loop {
        let area = rng.random_range(0.08..0.15) * total;
        let aspect = rng.random_range(0.5..2.0);
        let rh = (area / aspect).sqrt().round() as u32;
        let rw = (area * aspect).sqrt().round() as u32;
        let frac = (rh * rw) as f64 / total;
        if rh == 0 || rw == 0 || rh > h || rw > w || !(0.08..=0.15).contains(&frac) {
            continue;
        }
        let py = rng.random_range(target.y..target.y + target.h);
        let px = rng.random_range(target.x..target.x + target.w);
        let y = py.saturating_sub(rh / 2).min(h - rh);
        let x = px.saturating_sub(rw / 2).min(w - rw);
        return Rect { y, x, h: rh, w: rw };
    }
}

fn apply_attack(image: &mut RgbImage, rect: Rect, kind: AttackKind, rng: &mut SplitMix64, donor: &RgbImage) {
    let source = image.clone();
    let renoise = Normal::new(0.0f32, 8.0).unwrap();
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            let px = match kind {
                AttackKind::Splice => *donor.get_pixel(x, y),
                AttackKind::Renoise => {
                    let p = source.get_pixel(x, y);
                    image::Rgb(std::array::from_fn(|c| quantize(p[c] as f32 + renoise.sample(rng))))
                }
                AttackKind::Blur => {
                    let mut acc = [0u32; 3];
                    let mut n = 0;
                    for yy in y.saturating_sub(1)..=(y + 1).min(CARD_HEIGHT - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(CARD_WIDTH - 1) {
                            let p = source.get_pixel(xx, yy);
                            for c in 0..3 {
                                acc[c] += p[c] as u32;
                            }
                            n += 1;
                        }
                    }
                    image::Rgb(std::array::from_fn(|c| quantize(acc[c] as f32 / n as f32)))
                }
            };
            image.put_pixel(x, y, px);
        }
    }
}

/// One synthetic sample; the same `(seed, label, index)` always yields the
/// same pixels.
pub fn synth_sample(seed: u64, label: Label, index: usize) -> (Sample, Option<AttackKind>) {
    // Attack i starts from bonafide card i, so a pair differs only inside the forged region.
    let card_stream = |i: usize| ((Label::Bonafide as u64) << 32) | i as u64;
    let mut card = render_card(&mut SplitMix64::derive(seed, card_stream(index)));
    let mut rng = SplitMix64::derive(seed, ((label as u64) << 32) | index as u64);
    let (id, kind) = match label {
        Label::Bonafide => (format!("bonafide-{index:04}"), None),
        Label::Attack => (format!("attack-{index:04}"), Some(attack_kind(index))),
    };
    let mut mask = GrayImage::new(CARD_WIDTH, CARD_HEIGHT);
    if let Some(kind) = kind {
        let target = card.regions[rng.random_range(0..card.regions.len())];
        let rect = attack_rect(&mut rng, target);
        let donor = if kind == AttackKind::Splice {
            render_card(&mut SplitMix64::derive(seed, card_stream(index + 1))).image
        } else {
            RgbImage::new(0, 0)
        };
        apply_attack(&mut card.image, rect, kind, &mut rng, &donor);
        for (x, y, p) in mask.enumerate_pixels_mut() {
            if rect.contains(y, x) {
                p[0] = 255;
            }
        }
    }
    (
        Sample {
            id,
            image: card.image,
            mask,
            label,
        },
        kind,
    )
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` for attacks and
/// `manifest.tsv` under `out_dir`.
pub fn synth_generate(n_bonafide: usize, n_attack: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if n_bonafide == 0 || n_attack == 0 {
        return Err(Error::Config("synthetic corpus needs at least one bonafide and one attack sample".into()));
    }
    let out = out_dir.as_ref();
    let mut entries = Vec::with_capacity(n_bonafide + n_attack);
    let jobs = (0..n_bonafide)
        .map(|i| (Label::Bonafide, i))
        .chain((0..n_attack).map(|i| (Label::Attack, i)));
    for (label, i) in jobs {
        let (sample, _) = synth_sample(seed, label, i);
        let image = PathBuf::from("images").join(format!("{}.ppm", sample.id));
        write_ppm(out.join(&image), &sample.image)?;
        let mask = if label == Label::Attack {
            let m = PathBuf::from("masks").join(format!("{}.pgm", sample.id));
            write_pgm(out.join(&m), &sample.mask)?;
            Some(m)
        } else {
            None
        };
        entries.push(ManifestEntry {
            id: sample.id,
            image,
            mask,
            label,
        });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        split: None,
        entries,
    };
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: u32, w: u32, p: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb(p))
    }

    #[test]
    fn green_channel_values() {
        let img = solid(2, 3, [10, 20, 30]);
        assert!(green_channel(&img).data.iter().all(|&v| (v - 20.0 / 255.0).abs() < 1e-7));
        assert!(green_channel(&solid(2, 2, [255, 0, 0])).data.iter().all(|&v| v == 0.0));
        assert!(green_channel(&solid(2, 2, [77, 77, 77])).data.iter().all(|&v| v == 77.0 / 255.0));
    }

    #[test]
    fn flat_image_has_zero_residual() {
        // The zero-padded border makes a flat field non-constant, so use black.
        let r = highpass_residual(&solid(8, 8, [0, 0, 0]));
        assert!(r.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_bright_pixel_matches_hand_convolution() {
        let mut img = solid(5, 5, [0, 0, 0]);
        img.put_pixel(2, 2, image::Rgb([255, 255, 255]));
        let r = highpass_residual(&img);
        // Before standardization: centre 1, 4-neighbours -1/4, elsewhere 0.
        let mut raw = vec![0f32; 25];
        raw[12] = 1.0;
        for i in [7, 11, 13, 17] {
            raw[i] = -0.25;
        }
        standardize(&mut raw);
        for (a, b) in r.data.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(r.at(2, 2) > 0.0 && r.at(1, 2) < 0.0 && r.at(2, 1) < 0.0);
    }

    #[test]
    fn residual_is_standardized() {
        let (s, _) = synth_sample(1, Label::Bonafide, 0);
        let r = highpass_residual(&s.image);
        let n = r.data.len() as f64;
        let mean = r.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (r.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((sd - 1.0).abs() < 1e-4, "{sd}");
    }

    #[test]
    fn resizes() {
        let p = Plane::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(resize_bilinear(&p, 2, 3), p);
        let up = resize_bilinear(&Plane::new(1, 2, vec![0.0, 1.0]), 1, 4);
        assert_eq!(up.data, vec![0.0, 0.25, 0.75, 1.0]);
        let mut m = GrayImage::new(7, 5);
        m.put_pixel(3, 2, image::Luma([255]));
        let same = resize_mask(&m, 5, 7);
        assert_eq!(same.data.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(same.at(2, 3), 1.0);
        let down = resize_mask(&m, 16, 16);
        assert!(down.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn png_loads_through_the_same_readers() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 80, 7]));
        let gray = GrayImage::from_fn(5, 3, |x, _| image::Luma([if x > 2 { 255 } else { 0 }]));
        rgb.save(dir.path().join("a.png")).unwrap();
        gray.save(dir.path().join("m.png")).unwrap();
        assert_eq!(read_rgb(dir.path().join("a.png")).unwrap(), rgb);
        assert_eq!(read_gray(dir.path().join("m.png")).unwrap(), gray);
        assert!(read_gray(dir.path().join("a.png")).is_err());
    }

    #[test]
    fn attacks_alter_only_their_region_of_the_paired_card() {
        for i in 0..6 {
            let (bona, _) = synth_sample(4, Label::Bonafide, i);
            let (atk, kind) = synth_sample(4, Label::Attack, i);
            assert_eq!(kind, Some(attack_kind(i)));
            let mut changed_inside = 0;
            for (x, y, p) in atk.image.enumerate_pixels() {
                if atk.mask.get_pixel(x, y)[0] == 0 {
                    assert_eq!(p, bona.image.get_pixel(x, y), "attack {i} changed ({x},{y})");
                } else if p != bona.image.get_pixel(x, y) {
                    changed_inside += 1;
                }
            }
            assert!(changed_inside > 0, "attack {i} left its region untouched");
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = DatasetManifest {
            root: PathBuf::from("/data"),
            split: Some(Split::Val),
            entries: vec![
                ManifestEntry {
                    id: "a".into(),
                    image: "images/a.ppm".into(),
                    mask: None,
                    label: Label::Bonafide,
                },
                ManifestEntry {
                    id: "b".into(),
                    image: "images/b.ppm".into(),
                    mask: Some("masks/b.pgm".into()),
                    label: Label::Attack,
                },
            ],
        };
        assert_eq!(DatasetManifest::parse(&m.to_tsv(), "/data").unwrap(), m);
        assert!(DatasetManifest::parse("a\tx\t-\t0\na\ty\t-\t1\n", ".").is_err());
        assert!(DatasetManifest::parse("a\tx\t-\n", ".").is_err());
        assert!(DatasetManifest::parse("a\tx\t-\t2\n", ".").is_err());
    }

    #[test]
    fn sample_validation() {
        let mut s = Sample {
            id: "x".into(),
            image: solid(4, 4, [1, 2, 3]),
            mask: GrayImage::new(4, 4),
            label: Label::Attack,
        };
        assert!(s.validate().is_err());
        s.mask.put_pixel(0, 0, image::Luma([128]));
        assert!(s.validate().is_err());
        s.mask.put_pixel(0, 0, image::Luma([255]));
        s.validate().unwrap();
        s.label = Label::Bonafide;
        assert!(s.validate().is_err());
    }

    #[test]
    fn attack_masks_cover_expected_area() {
        for i in 0..12 {
            let (s, kind) = synth_sample(9, Label::Attack, i);
            assert_eq!(kind, Some(attack_kind(i)));
            let frac = s.mask.as_raw().iter().filter(|&&v| v == 255).count() as f64 / (320.0 * 480.0);
            assert!((0.08..=0.15).contains(&frac), "{frac}");
            s.validate().unwrap();
        }
    }

    fn median(mut v: Vec<f32>) -> f32 {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn renoise_raises_residual_energy_inside_mask() {
        // Medians, because sparse text edges dominate a mean outside the mask.
        for i in [1, 4, 7, 10, 13] {
            let (s, kind) = synth_sample(2, Label::Attack, i);
            assert_eq!(kind, Some(AttackKind::Renoise));
            let r = highpass_residual(&s.image);
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for (v, m) in r.data.iter().zip(s.mask.as_raw()) {
                if *m == 255 { inside.push(v * v) } else { outside.push(v * v) }
            }
            let (a, b) = (median(inside), median(outside));
            assert!(a > 2.0 * b, "sample {i}: {a} vs {b}");
        }
    }

    #[test]
    fn assembled_shapes_and_identity() {
        let (s, _) = synth_sample(3, Label::Attack, 0);
        let (x, m) = assemble_input(&s, &ResidualExtractor::HighPassStandIn, INPUT_SIZE).unwrap();
        assert_eq!(x.shape(), [1, 2, 256, 256]);
        assert_eq!(m.shape(), [1, 1, 256, 256]);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let (x2, _) = assemble_input(&s, &ResidualExtractor::HighPassStandIn, INPUT_SIZE).unwrap();
        assert_eq!(x.data(), x2.data());
        let (native, _) = assemble_input(&s, &ResidualExtractor::HighPassStandIn, (320, 480)).unwrap();
        assert_eq!(&native.data()[..320 * 480], &green_channel(&s.image).data[..]);
    }

    #[test]
    fn from_file_extractor() {
        let tmp = tempfile::tempdir().unwrap();
        let (s, _) = synth_sample(3, Label::Bonafide, 0);
        let ex = ResidualExtractor::FromFile(tmp.path().to_path_buf());
        assert!(matches!(ex.extract(&s), Err(Error::Contract(_))));
        let r = highpass_residual(&s.image);
        Tensor::new([320, 480], r.data.clone()).unwrap().write_btf(tmp.path().join("bonafide-0000.btf")).unwrap();
        let got = ex.extract(&s).unwrap();
        for (a, b) in got.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn synth_round_trip_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_generate(2, 3, 11, a.path()).unwrap();
        synth_generate(2, 3, 11, b.path()).unwrap();
        for e in &ma.entries {
            let fa = fs::read(a.path().join(&e.image)).unwrap();
            assert_eq!(fa, fs::read(b.path().join(&e.image)).unwrap());
            assert!(fa.starts_with(b"P6"));
            if let Some(m) = &e.mask {
                let ma = fs::read(a.path().join(m)).unwrap();
                assert!(ma.starts_with(b"P5"));
            }
        }
        let loaded = load_manifest(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.entries, ma.entries);
        for (i, e) in loaded.entries.iter().enumerate() {
            let s = load_sample(&loaded, &e.id).unwrap();
            let (label, idx) = if i < 2 { (Label::Bonafide, i) } else { (Label::Attack, i - 2) };
            let (orig, _) = synth_sample(11, label, idx);
            assert_eq!(s, orig);
        }
        assert!(synth_generate(0, 3, 11, a.path()).is_err());
    }
}
