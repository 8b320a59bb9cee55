//! Patch extraction: range filtering, sliding-window cropping, left/right
//! train/test splitting and the on-disk dataset manifest.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/manifest.tsv         one row per patch
//! <out>/sources.tsv          image_id -> source file, for context views
//! <out>/patches/<id>.png     lossless patch pixels
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rayon::prelude::*;

use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SOURCES_FILE: &str = "sources.tsv";
pub const PATCH_DIR: &str = "patches";
pub const MANIFEST_HEADER: &str = "patch_id\timage_id\tsol\tsite\tdrive\teye\tx\ty\tside\tsplit";
const SOURCES_HEADER: &str = "image_id\tpath\twidth\theight";
const META_HEADER: &str = "image_id\tfile\tsol\tsite\tdrive\teye\trange_m";

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("patch larger than image: side {side} vs {width}x{height}")]
    PatchTooLarge { side: u32, width: u32, height: u32 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("no patches extracted")]
    NoPatches,
    #[error("duplicate patch id {0}")]
    DuplicatePatch(String),
    #[error("{file} line {line}: {reason}")]
    Format {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PatchError + '_ {
    move |source| PatchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Eye {
    Left,
    Right,
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Eye::Left => "left",
            Eye::Right => "right",
        })
    }
}

impl FromStr for Eye {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "left" | "L" | "Left" => Ok(Eye::Left),
            "right" | "R" | "Right" => Ok(Eye::Right),
            _ => Err(format!("unknown eye {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitDecision {
    Train,
    Test,
    /// The window straddles the train/test boundary.
    Discard,
}

/// Acquisition metadata for one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInfo {
    pub image_id: String,
    pub sol: i64,
    pub site: i64,
    pub drive: i64,
    pub eye: Eye,
    /// Distance from the rover to the imaged target, meters.
    pub target_range_m: f64,
}

impl ImageInfo {
    pub fn within_range(&self, max_range_m: f64) -> bool {
        self.target_range_m <= max_range_m
    }
}

#[derive(Clone, Debug)]
pub struct SourceImage {
    pub info: ImageInfo,
    pub pixels: RgbImage,
}

impl SourceImage {
    pub fn new(info: ImageInfo, pixels: RgbImage) -> Result<Self, PatchError> {
        if !(info.target_range_m >= 0.0) {
            return Err(PatchError::Parameter(format!(
                "{}: negative target range {}",
                info.image_id, info.target_range_m
            )));
        }
        Ok(Self { info, pixels })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

/// Keeps images whose target lies within `max_range_m` (inclusive).
pub fn filter_by_range(images: Vec<SourceImage>, max_range_m: f64) -> Vec<SourceImage> {
    images
        .into_iter()
        .filter(|img| img.info.within_range(max_range_m))
        .collect()
}

/// Top-left corner and side of a square crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchWindow {
    pub x: u32,
    pub y: u32,
    pub side: u32,
}

/// Window step in pixels: `round(stride_fraction * side)`, at least one.
pub fn stride_pixels(side: u32, stride_fraction: f64) -> u32 {
    ((stride_fraction * side as f64).round() as u32).max(1)
}

/// Sliding-window crops that lie fully inside a `width×height` image.
pub fn window_grid(
    width: u32,
    height: u32,
    side: u32,
    stride_fraction: f64,
) -> Result<Vec<PatchWindow>, PatchError> {
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(PatchError::Parameter(format!(
            "stride fraction {stride_fraction} outside (0, 1]"
        )));
    }
    if side == 0 {
        return Err(PatchError::Parameter("patch side must be positive".into()));
    }
    if side > width || side > height {
        return Err(PatchError::PatchTooLarge {
            side,
            width,
            height,
        });
    }
    let s = stride_pixels(side, stride_fraction);
    let mut out = Vec::new();
    for y in (0..=height - side).step_by(s as usize) {
        for x in (0..=width - side).step_by(s as usize) {
            out.push(PatchWindow { x, y, side });
        }
    }
    Ok(out)
}

pub fn extract_patches(
    image: &SourceImage,
    side: u32,
    stride_fraction: f64,
) -> Result<Vec<PatchWindow>, PatchError> {
    window_grid(image.width(), image.height(), side, stride_fraction)
}

/// Train if the window lies left of `floor(left_fraction * width)`, test if
/// it lies right of it, discard if it straddles.
pub fn assign_split(window: &PatchWindow, image_width: u32, left_fraction: f64) -> SplitDecision {
    let boundary = (left_fraction * image_width as f64).floor() as u32;
    if window.x + window.side <= boundary {
        SplitDecision::Train
    } else if window.x >= boundary {
        SplitDecision::Test
    } else {
        SplitDecision::Discard
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub image_id: String,
    pub sol: i64,
    pub site: i64,
    pub drive: i64,
    pub eye: Eye,
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub split: Split,
}

pub fn patch_id(image_id: &str, x: u32, y: u32) -> String {
    format!("{image_id}_{x}_{y}")
}

impl PatchRecord {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.patch_id,
            self.image_id,
            self.sol,
            self.site,
            self.drive,
            self.eye,
            self.x,
            self.y,
            self.side,
            self.split
        )
    }

    pub fn from_row(row: &str) -> Result<Self, String> {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != 10 {
            return Err(format!("expected 10 fields, got {}", f.len()));
        }
        fn num<T: FromStr>(s: &str, name: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("bad {name} {s:?}"))
        }
        Ok(Self {
            patch_id: f[0].to_string(),
            image_id: f[1].to_string(),
            sol: num(f[2], "sol")?,
            site: num(f[3], "site")?,
            drive: num(f[4], "drive")?,
            eye: f[5].parse()?,
            x: num(f[6], "x")?,
            y: num(f[7], "y")?,
            side: num(f[8], "side")?,
            split: f[9].parse()?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<PatchRecord>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_row());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PatchError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => {
                return Err(PatchError::Format {
                    file: MANIFEST_FILE.into(),
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let r = PatchRecord::from_row(line).map_err(|reason| PatchError::Format {
                file: MANIFEST_FILE.into(),
                line: n + 1,
                reason,
            })?;
            if !seen.insert(r.patch_id.clone()) {
                return Err(PatchError::DuplicatePatch(r.patch_id));
            }
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self, PatchError> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), PatchError> {
        std::fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, patch_id: &str) -> Option<&PatchRecord> {
        self.records.iter().find(|r| r.patch_id == patch_id)
    }
}

#[derive(Clone, Debug)]
pub struct ExtractConfig {
    pub side_left: u32,
    pub side_right: u32,
    pub stride_fraction: f64,
    pub left_fraction: f64,
    pub max_range_m: f64,
    /// Image ids dropped before extraction (rover parts, sky, ...).
    pub exclude: BTreeSet<String>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            side_left: 256,
            side_right: 128,
            stride_fraction: 0.5,
            left_fraction: 0.6,
            max_range_m: 15.0,
            exclude: BTreeSet::new(),
        }
    }
}

impl ExtractConfig {
    pub fn side_for(&self, eye: Eye) -> u32 {
        match eye {
            Eye::Left => self.side_left,
            Eye::Right => self.side_right,
        }
    }

    fn validate(&self) -> Result<(), PatchError> {
        if !(self.max_range_m > 0.0) {
            return Err(PatchError::Parameter("max range must be positive".into()));
        }
        if !(self.left_fraction > 0.0 && self.left_fraction < 1.0) {
            return Err(PatchError::Parameter(format!(
                "left fraction {} outside (0, 1)",
                self.left_fraction
            )));
        }
        Ok(())
    }
}

/// Patches of one image with their pixels; straddling windows are dropped.
pub fn image_patches(
    image: &SourceImage,
    config: &ExtractConfig,
) -> Result<Vec<(PatchRecord, RgbImage)>, PatchError> {
    let side = config.side_for(image.info.eye);
    let windows = extract_patches(image, side, config.stride_fraction)?;
    let info = &image.info;
    Ok(windows
        .into_iter()
        .filter_map(|w| {
            let split = match assign_split(&w, image.width(), config.left_fraction) {
                SplitDecision::Train => Split::Train,
                SplitDecision::Test => Split::Test,
                SplitDecision::Discard => return None,
            };
            let pixels = image::imageops::crop_imm(&image.pixels, w.x, w.y, w.side, w.side).to_image();
            Some((
                PatchRecord {
                    patch_id: patch_id(&info.image_id, w.x, w.y),
                    image_id: info.image_id.clone(),
                    sol: info.sol,
                    site: info.site,
                    drive: info.drive,
                    eye: info.eye,
                    x: w.x,
                    y: w.y,
                    side: w.side,
                    split,
                },
                pixels,
            ))
        })
        .collect())
}

/// In-memory extraction over already-loaded images, in input order.
pub fn extract_dataset(
    images: &[SourceImage],
    config: &ExtractConfig,
) -> Result<Vec<(PatchRecord, RgbImage)>, PatchError> {
    config.validate()?;
    let kept: Vec<&SourceImage> = images
        .iter()
        .filter(|i| i.info.within_range(config.max_range_m) && !config.exclude.contains(&i.info.image_id))
        .collect();
    let per_image: Vec<_> = kept
        .par_iter()
        .map(|img| image_patches(img, config))
        .collect::<Result<_, _>>()?;
    let out: Vec<_> = per_image.into_iter().flatten().collect();
    check_unique(out.iter().map(|(r, _)| r))?;
    Ok(out)
}

fn check_unique<'a>(records: impl Iterator<Item = &'a PatchRecord>) -> Result<(), PatchError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.patch_id.as_str()) {
            return Err(PatchError::DuplicatePatch(r.patch_id.clone()));
        }
    }
    Ok(())
}

/// Row of the image metadata file given to `extract`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMeta {
    pub info: ImageInfo,
    /// Image file, relative to the images directory.
    pub file: String,
}

impl ImageMeta {
    pub fn parse_file(text: &str) -> Result<Vec<ImageMeta>, PatchError> {
        let fail = |line: usize, reason: String| PatchError::Format {
            file: "meta".into(),
            line,
            reason,
        };
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("image_id")) {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(fail(n + 1, format!("expected 7 fields: {META_HEADER}")));
            }
            let num = |i: usize| -> Result<i64, PatchError> {
                f[i].parse().map_err(|_| fail(n + 1, format!("bad integer {:?}", f[i])))
            };
            let range: f64 = f[6]
                .parse()
                .map_err(|_| fail(n + 1, format!("bad range {:?}", f[6])))?;
            if !(range >= 0.0) {
                return Err(fail(n + 1, format!("negative range {range}")));
            }
            out.push(ImageMeta {
                info: ImageInfo {
                    image_id: f[0].to_string(),
                    sol: num(2)?,
                    site: num(3)?,
                    drive: num(4)?,
                    eye: f[5].parse().map_err(|e| fail(n + 1, e))?,
                    target_range_m: range,
                },
                file: f[1].to_string(),
            });
        }
        Ok(out)
    }

    pub fn to_file(metas: &[ImageMeta]) -> String {
        let mut out = format!("{META_HEADER}\n");
        for m in metas {
            let i = &m.info;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                i.image_id, m.file, i.sol, i.site, i.drive, i.eye, i.target_range_m
            ));
        }
        out
    }
}

/// Source image location recorded next to the manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

pub fn write_sources(path: &Path, entries: &[SourceEntry]) -> Result<(), PatchError> {
    let mut out = format!("{SOURCES_HEADER}\n");
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.image_id, e.path.display(), e.width, e.height));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_sources(path: &Path) -> Result<Vec<SourceEntry>, PatchError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = (f.len() == 4)
            .then(|| Some((f[2].parse().ok()?, f[3].parse().ok()?)))
            .flatten();
        let Some((width, height)) = parsed else {
            return Err(PatchError::Format {
                file: SOURCES_FILE.into(),
                line: n + 1,
                reason: "expected image_id, path, width, height".into(),
            });
        };
        out.push(SourceEntry {
            image_id: f[0].to_string(),
            path: PathBuf::from(f[1]),
            width,
            height,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ManifestSummary {
    pub images_used: usize,
    pub images_skipped: usize,
    pub train: usize,
    pub test: usize,
}

/// Loads, filters and cuts every listed image, then writes the manifest, the
/// sources sidecar and one PNG per patch under `out_dir`. Unreadable images
/// are skipped with a warning.
pub fn build_manifest(
    metas: &[ImageMeta],
    images_dir: &Path,
    config: &ExtractConfig,
    out_dir: &Path,
) -> Result<ManifestSummary, PatchError> {
    config.validate()?;
    let patch_dir = out_dir.join(PATCH_DIR);
    std::fs::create_dir_all(&patch_dir).map_err(io_err(&patch_dir))?;
    let mut summary = ManifestSummary::default();
    let mut manifest = Manifest::default();
    let mut sources = Vec::new();
    for meta in metas {
        if config.exclude.contains(&meta.info.image_id) || !meta.info.within_range(config.max_range_m) {
            continue;
        }
        let path = images_dir.join(&meta.file);
        let pixels = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.images_skipped += 1;
                continue;
            }
        };
        let source = SourceImage::new(meta.info.clone(), pixels)?;
        let patches = match image_patches(&source, config) {
            Ok(p) => p,
            Err(e @ PatchError::PatchTooLarge { .. }) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.images_skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        patches.par_iter().try_for_each(|(rec, px)| {
            let p = patch_dir.join(format!("{}.png", rec.patch_id));
            px.save(&p).map_err(|source| PatchError::Image { path: p, source })
        })?;
        for (rec, _) in patches {
            match rec.split {
                Split::Train => summary.train += 1,
                Split::Test => summary.test += 1,
            }
            manifest.records.push(rec);
        }
        summary.images_used += 1;
        sources.push(SourceEntry {
            image_id: meta.info.image_id.clone(),
            path: std::path::absolute(&path).unwrap_or(path),
            width: source.width(),
            height: source.height(),
        });
    }
    if manifest.records.is_empty() {
        return Err(PatchError::NoPatches);
    }
    check_unique(manifest.records.iter())?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    write_sources(&out_dir.join(SOURCES_FILE), &sources)?;
    Ok(summary)
}

/// Path of a patch image inside a dataset directory.
pub fn patch_path(dataset_dir: &Path, patch_id: &str) -> PathBuf {
    dataset_dir.join(PATCH_DIR).join(format!("{patch_id}.png"))
}

pub fn load_patch(dataset_dir: &Path, patch_id: &str) -> Result<RgbImage, PatchError> {
    let path = patch_path(dataset_dir, patch_id);
    image::open(&path)
        .map(|i| i.to_rgb8())
        .map_err(|source| PatchError::Image { path, source })
}

/// Bilinear resize to `target×target` with corners aligned, channels scaled
/// to `[0, 1]`. Output layout is `3×target×target`.
pub fn resize_patch<T: Real>(pixels: &RgbImage, target: usize) -> Result<Tensor<T>, PatchError> {
    if target < 8 {
        return Err(PatchError::Parameter(format!("resize target {target} below 8")));
    }
    let (w, h) = (pixels.width() as usize, pixels.height() as usize);
    if w == 0 || h == 0 {
        return Err(PatchError::Parameter("empty patch".into()));
    }
    let scale = |src: usize| {
        if target > 1 && src > 1 {
            (src - 1) as f64 / (target - 1) as f64
        } else {
            0.0
        }
    };
    let (sx, sy) = (scale(w), scale(h));
    let raw = pixels.as_raw();
    let at = |x: usize, y: usize, c: usize| raw[(y * w + x) * 3 + c] as f64 / 255.0;
    let mut out = vec![T::zero(); 3 * target * target];
    for ty in 0..target {
        let fy = ty as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for tx in 0..target {
            let fx = tx as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - dx) + at(x1, y0, c) * dx;
                let bottom = at(x0, y1, c) * (1.0 - dx) + at(x1, y1, c) * dx;
                out[c * target * target + ty * target + tx] = T::of(top * (1.0 - dy) + bottom * dy);
            }
        }
    }
    Ok(Tensor::from_vec(&[3, target, target], out).expect("resize shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn info(id: &str, range: f64) -> ImageInfo {
        ImageInfo {
            image_id: id.into(),
            sol: 1,
            site: 2,
            drive: 3,
            eye: Eye::Right,
            target_range_m: range,
        }
    }

    fn image(id: &str, w: u32, h: u32, range: f64) -> SourceImage {
        let px = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        SourceImage::new(info(id, range), px).unwrap()
    }

    #[test]
    fn range_filter_is_inclusive_and_ordered() {
        let imgs = vec![image("a", 8, 8, 3.0), image("b", 8, 8, 15.0), image("c", 8, 8, 20.0)];
        let kept = filter_by_range(imgs, 15.0);
        let ids: Vec<_> = kept.iter().map(|i| i.info.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(filter_by_range(vec![], 15.0).is_empty());
        let zeros = vec![image("a", 8, 8, 0.0), image("b", 8, 8, 0.0)];
        assert_eq!(filter_by_range(zeros, 15.0).len(), 2);
    }

    #[test]
    fn negative_range_rejected() {
        let px = RgbImage::new(8, 8);
        assert!(SourceImage::new(info("x", -1.0), px).is_err());
    }

    #[test]
    fn grid_counts() {
        assert_eq!(window_grid(256, 256, 128, 0.5).unwrap().len(), 9);
        assert_eq!(
            window_grid(128, 128, 128, 0.5).unwrap(),
            vec![PatchWindow { x: 0, y: 0, side: 128 }]
        );
        // counting oracle: offsets 0, 64, ... while offset + 128 <= extent
        let count = |extent: u32| (0..).map(|i| i * 64).take_while(|o| o + 128 <= extent).count();
        assert_eq!(count(1600) * count(1200), 408);
        assert_eq!(window_grid(1600, 1200, 128, 0.5).unwrap().len(), 408);
    }

    #[test]
    fn oversized_patch_is_an_error() {
        let img = image("a", 100, 300, 1.0);
        assert!(matches!(
            extract_patches(&img, 128, 0.5),
            Err(PatchError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn split_examples() {
        let w = |x| PatchWindow { x, y: 0, side: 128 };
        assert_eq!(assign_split(&w(0), 1600, 0.6), SplitDecision::Train);
        assert_eq!(assign_split(&w(960), 1600, 0.6), SplitDecision::Test);
        assert_eq!(assign_split(&w(900), 1600, 0.6), SplitDecision::Discard);
        assert_eq!(assign_split(&w(832), 1600, 0.6), SplitDecision::Train);
    }

    #[test]
    fn dataset_records_follow_grid_and_ids() {
        let img = image("img7", 256, 256, 5.0);
        let cfg = ExtractConfig {
            side_right: 128,
            left_fraction: 0.5,
            ..Default::default()
        };
        let out = extract_dataset(&[img], &cfg).unwrap();
        // boundary 128: x=0 train, x=64 straddles, x=128 test
        assert_eq!(out.len(), 6);
        assert!(out.iter().any(|(r, _)| r.patch_id == "img7_128_64" && r.split == Split::Test));
        let (rec, px) = &out[0];
        assert_eq!((rec.x, rec.y, px.width()), (0, 0, 128));
    }

    #[test]
    fn far_images_contribute_nothing() {
        let cfg = ExtractConfig::default();
        let out = extract_dataset(&[image("far", 256, 256, 20.0)], &cfg).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn resize_maps_corners_and_constants() {
        let px = RgbImage::from_fn(128, 128, |x, y| image::Rgb([(x * 2) as u8, (y * 2) as u8, 255]));
        let t: Tensor<f64> = resize_patch(&px, 224).unwrap();
        let at = |c: usize, y: usize, x: usize| t.data()[c * 224 * 224 + y * 224 + x];
        assert_eq!(at(0, 0, 0), 0.0);
        assert!((at(0, 223, 223) - 254.0 / 255.0).abs() < 1e-12);
        assert!((at(1, 223, 0) - 254.0 / 255.0).abs() < 1e-12);
        assert!((at(2, 100, 50) - 1.0).abs() < 1e-12);

        let same: Tensor<f64> = resize_patch(&px, 128).unwrap();
        for y in 0..128 {
            for x in 0..128 {
                let expect = (x * 2) as f64 / 255.0;
                assert!((same.data()[y * 128 + x] - expect).abs() < 1e-12);
            }
        }

        let flat = RgbImage::from_pixel(16, 16, image::Rgb([51, 51, 51]));
        let t: Tensor<f32> = resize_patch(&flat, 40).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.2).abs() < 1e-6));
        assert!(resize_patch::<f32>(&flat, 4).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_rows() {
        let rec = PatchRecord {
            patch_id: "a_0_0".into(),
            image_id: "a".into(),
            sol: 1,
            site: 1,
            drive: 1,
            eye: Eye::Left,
            x: 0,
            y: 0,
            side: 256,
            split: Split::Train,
        };
        let m = Manifest {
            records: vec![rec.clone(), rec],
        };
        assert!(matches!(Manifest::parse(&m.to_tsv()), Err(PatchError::DuplicatePatch(_))));
        let bad = format!("{MANIFEST_HEADER}\na_0_0\ta\t1\n");
        assert!(matches!(Manifest::parse(&bad), Err(PatchError::Format { line: 2, .. })));
    }

    #[test]
    fn meta_file_round_trips() {
        let metas = vec![ImageMeta {
            info: info("img", 4.5),
            file: "img.png".into(),
        }];
        assert_eq!(ImageMeta::parse_file(&ImageMeta::to_file(&metas)).unwrap(), metas);
    }

    fn arb_record() -> impl Strategy<Value = PatchRecord> {
        (
            "[a-z0-9]{1,8}",
            -5i64..5000,
            0i64..100,
            0i64..5000,
            any::<bool>(),
            0u32..2000,
            0u32..2000,
            prop_oneof![Just(128u32), Just(256u32)],
            any::<bool>(),
        )
            .prop_map(|(img, sol, site, drive, left, x, y, side, train)| PatchRecord {
                patch_id: patch_id(&img, x, y),
                image_id: img,
                sol,
                site,
                drive,
                eye: if left { Eye::Left } else { Eye::Right },
                x,
                y,
                side,
                split: if train { Split::Train } else { Split::Test },
            })
    }

    proptest! {
        #[test]
        fn manifest_rows_round_trip(rec in arb_record()) {
            prop_assert_eq!(PatchRecord::from_row(&rec.to_row()).unwrap(), rec);
        }

        #[test]
        fn grid_count_formula(w in 1u32..400, h in 1u32..400, side in 1u32..200, frac in 0.05f64..1.0) {
            prop_assume!(side <= w.min(h));
            let s = stride_pixels(side, frac);
            let expected = ((w - side) / s + 1) * ((h - side) / s + 1);
            let grid = window_grid(w, h, side, frac).unwrap();
            prop_assert_eq!(grid.len() as u32, expected);
            prop_assert!(grid.iter().all(|p| p.x + side <= w && p.y + side <= h));
        }
    }
}
