//! Procedural texture corpus with known classes.
//!
//! Eight classes: horizontal and vertical gratings, blob fields and granular
//! noise, each at a fine and a coarse scale. Every image gets its own site
//! so near-duplicate exclusion never removes same-image patches only.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::patchex::{Eye, ImageInfo, ImageMeta, Manifest, PatchError};
use crate::store;

pub const IMAGES_DIR: &str = "images";
pub const META_FILE: &str = "images.tsv";
pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    /// Stripes varying along x.
    GratingX,
    /// Stripes varying along y.
    GratingY,
    Blobs,
    Granular,
}

/// One generator class: a texture family at a scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TextureClass {
    pub texture: Texture,
    pub coarse: bool,
}

impl TextureClass {
    /// All eight classes; index + 1 is the class id.
    pub fn all() -> Vec<TextureClass> {
        [Texture::GratingX, Texture::GratingY, Texture::Blobs, Texture::Granular]
            .into_iter()
            .flat_map(|texture| [false, true].map(|coarse| TextureClass { texture, coarse }))
            .collect()
    }

    pub fn name(&self) -> String {
        let t = match self.texture {
            Texture::GratingX => "grating-x",
            Texture::GratingY => "grating-y",
            Texture::Blobs => "blobs",
            Texture::Granular => "granular",
        };
        format!("{t}-{}", if self.coarse { "coarse" } else { "fine" })
    }

    /// Renders one image with per-image phase, tint and noise.
    pub fn render(&self, width: u32, height: u32, rng: &mut impl Rng) -> RgbImage {
        let (w, h) = (width as usize, height as usize);
        let mut v = vec![0.0f64; w * h];
        match self.texture {
            Texture::GratingX | Texture::GratingY => {
                let base = if self.coarse { 24.0 } else { 8.0 };
                let period = base * rng.random_range(0.9..1.1);
                let phase = rng.random_range(0.0..TAU);
                for y in 0..h {
                    for x in 0..w {
                        let t = if self.texture == Texture::GratingX { x } else { y } as f64;
                        v[y * w + x] = 0.5 + 0.35 * (TAU * t / period + phase).sin();
                    }
                }
            }
            Texture::Blobs => {
                let radius: f64 = if self.coarse { 8.0 } else { 3.0 };
                let count = (0.5 * (w * h) as f64 / (radius * radius * 4.0)) as usize;
                v.iter_mut().for_each(|p| *p = 0.25);
                for _ in 0..count {
                    let cx = rng.random_range(0.0..w as f64);
                    let cy = rng.random_range(0.0..h as f64);
                    let r = radius * rng.random_range(0.8..1.2);
                    let reach = (3.0 * r) as isize;
                    for dy in -reach..=reach {
                        for dx in -reach..=reach {
                            let (x, y) = (cx as isize + dx, cy as isize + dy);
                            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                                continue;
                            }
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            let p = &mut v[y as usize * w + x as usize];
                            *p = p.max(0.25 + 0.55 * (-d2 / (2.0 * r * r)).exp());
                        }
                    }
                }
            }
            Texture::Granular => {
                let cell = if self.coarse { 6 } else { 2 };
                let (cw, ch) = (w.div_ceil(cell) + 1, h.div_ceil(cell) + 1);
                let grid: Vec<f64> = (0..cw * ch).map(|_| rng.random_range(0.15..0.85)).collect();
                for y in 0..h {
                    for x in 0..w {
                        let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
                        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                        let g = |i: usize, j: usize| grid[j * cw + i];
                        let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
                        let bot = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
                        v[y * w + x] = top * (1.0 - ty) + bot * ty;
                    }
                }
            }
        }
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
        let gain = rng.random_range(0.8..1.2);
        let mut img = RgbImage::new(width, height);
        for y in 0..h {
            for x in 0..w {
                let px: [u8; 3] = std::array::from_fn(|c| {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.03;
                    ((v[y * w + x] * gain * tint[c] + noise).clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub images_per_class: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    /// 25 images of 320×96; 64-pixel patches at half stride give 16 kept
    /// patches per image and 400 per class.
    fn default() -> Self {
        Self {
            images_per_class: 25,
            width: 320,
            height: 96,
            seed: 20_240_601,
        }
    }
}

/// Image metadata and class id of every generated image.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub metas: Vec<ImageMeta>,
    pub image_class: HashMap<String, u32>,
}

impl Corpus {
    /// Class id of every manifest patch, by its source image.
    pub fn patch_labels(&self, manifest: &Manifest) -> HashMap<String, u32> {
        manifest
            .records
            .iter()
            .filter_map(|r| self.image_class.get(&r.image_id).map(|&c| (r.patch_id.clone(), c)))
            .collect()
    }
}

/// Image id, class id and pixels of every image, deterministically.
pub fn generate(spec: &CorpusSpec) -> Vec<(String, u32, RgbImage)> {
    let classes = TextureClass::all();
    let jobs: Vec<(usize, usize)> = (0..classes.len())
        .flat_map(|c| (0..spec.images_per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(c, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((c as u64) << 32 | i as u64));
            let img = classes[c].render(spec.width, spec.height, &mut rng);
            (format!("syn{c}_{i:03}"), c as u32 + 1, img)
        })
        .collect()
}

/// Writes `images/*.png`, the image metadata file and `labels.tsv`
/// (`image_id<TAB>class_id<TAB>name`) under `dir`.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<Corpus, PatchError> {
    let images_dir = dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir).map_err(|e| PatchError::Io {
        path: images_dir.clone(),
        source: e,
    })?;
    let classes = TextureClass::all();
    let images = generate(spec);
    let mut metas = Vec::with_capacity(images.len());
    let mut image_class = HashMap::new();
    let mut labels = String::from("image_id\tclass_id\tname\n");
    for (n, (id, class, img)) in images.iter().enumerate() {
        let file = format!("{id}.png");
        let path = images_dir.join(&file);
        img.save(&path).map_err(|source| PatchError::Image { path, source })?;
        metas.push(ImageMeta {
            info: ImageInfo {
                image_id: id.clone(),
                sol: n as i64,
                site: n as i64,
                drive: 0,
                eye: Eye::Left,
                target_range_m: 5.0,
            },
            file,
        });
        image_class.insert(id.clone(), *class);
        labels.push_str(&format!("{id}\t{class}\t{}\n", classes[*class as usize - 1].name()));
    }
    let write = |name: &str, text: &str| {
        store::write_file(&dir.join(name), text.as_bytes()).map_err(|e| PatchError::Parameter(e.to_string()))
    };
    write(META_FILE, &ImageMeta::to_file(&metas))?;
    write(LABELS_FILE, &labels)?;
    Ok(Corpus { metas, image_class })
}

/// Reads `image_id<TAB>class_id` rows written by [`write_corpus`].
pub fn read_image_labels(path: &Path) -> Result<HashMap<String, u32>, PatchError> {
    let text = std::fs::read_to_string(path).map_err(|e| PatchError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let class = f.get(1).and_then(|c| c.parse().ok()).ok_or_else(|| PatchError::Format {
            file: LABELS_FILE.into(),
            line: n + 1,
            reason: "expected image_id<TAB>class_id".into(),
        })?;
        out.insert(f[0].to_string(), class);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_distinct_classes() {
        let all = TextureClass::all();
        assert_eq!(all.len(), 8);
        let names: std::collections::HashSet<_> = all.iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec { images_per_class: 2, width: 64, height: 64, seed: 3 };
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.len(), 16);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.2.as_raw(), y.2.as_raw());
        }
    }

    #[test]
    fn grating_orientation_shows_in_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = TextureClass { texture: Texture::GratingX, coarse: false }.render(64, 64, &mut rng);
        let (mut gx, mut gy) = (0.0, 0.0);
        for y in 0..63 {
            for x in 0..63 {
                let p = img.get_pixel(x, y)[0] as f64;
                gx += (img.get_pixel(x + 1, y)[0] as f64 - p).abs();
                gy += (img.get_pixel(x, y + 1)[0] as f64 - p).abs();
            }
        }
        assert!(gx > 3.0 * gy);
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { images_per_class: 1, width: 64, height: 32, seed: 0 };
        let corpus = write_corpus(dir.path(), &spec).unwrap();
        assert_eq!(corpus.metas.len(), 8);
        let meta_text = std::fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert_eq!(ImageMeta::parse_file(&meta_text).unwrap(), corpus.metas);
        assert_eq!(read_image_labels(&dir.path().join(LABELS_FILE)).unwrap(), corpus.image_class);
    }
}
