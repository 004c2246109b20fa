//! Dataset container and loaders.
//!
//! Images are held as f32 in [0, 1], shape [N, C, H, W]; training code
//! converts batches to f64 on demand. Three sources: a seeded synthetic
//! generator with class-dependent color and stripe texture, CIFAR-10-layout
//! binary archives (1 label byte + 3072 planar RGB bytes per record), and
//! image-folder trees where each subdirectory is a class. Loaded images are
//! resized bilinearly to the configured shape.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView4, Axis};
use rand::Rng;

use crate::config::{derive_rng, Split};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path}: file size {size} is not a whole number of {record}-byte records")]
    BadRecordSize { path: PathBuf, size: u64, record: usize },
    #[error("dataset {0:?} has no images")]
    Empty(String),
    #[error("label {label} at index {index} exceeds class_count {classes}")]
    BadLabel { index: usize, label: usize, classes: usize },
    #[error("label count {labels} does not match image count {images}")]
    LabelCountMismatch { labels: usize, images: usize },
    #[error("pixel value {0} outside [0, 1]")]
    BadPixel(f32),
    #[error("bad dataset spec {spec:?}: {detail}")]
    BadSpec { spec: String, detail: String },
    #[error("no class subdirectories with images under {0}")]
    EmptyFolder(PathBuf),
}

/// In-memory image collection with optional labels.
#[derive(Clone)]
pub struct Dataset {
    pub name: String,
    images: Array4<f32>,
    labels: Option<Vec<usize>>,
    pub class_count: Option<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Array4<f32>,
        labels: Option<Vec<usize>>,
        class_count: Option<usize>,
    ) -> Result<Self, DataError> {
        let name = name.into();
        if images.dim().0 == 0 {
            return Err(DataError::Empty(name));
        }
        for &v in images.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::BadPixel(v));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != images.dim().0 {
                return Err(DataError::LabelCountMismatch {
                    labels: labels.len(),
                    images: images.dim().0,
                });
            }
            if let Some(classes) = class_count {
                for (index, &label) in labels.iter().enumerate() {
                    if label >= classes {
                        return Err(DataError::BadLabel { index, label, classes });
                    }
                }
            }
        }
        Ok(Self { name, images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn images(&self) -> ArrayView4<'_, f32> {
        self.images.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Contiguous slice of images converted to f64.
    pub fn range_f64(&self, range: Range<usize>) -> Array4<f64> {
        self.images
            .slice(ndarray::s![range, .., .., ..])
            .mapv(f64::from)
    }

    /// Gathered batch converted to f64.
    pub fn batch_f64(&self, indices: &[usize]) -> Array4<f64> {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::<f64>::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i).mapv(f64::from));
        }
        out
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::<f32>::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset {
            name: name.into(),
            images,
            labels,
            class_count: self.class_count,
        }
    }

    /// First `n` images (or all, if fewer).
    pub fn take(&self, n: usize, name: impl Into<String>) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, name)
    }
}

/// Distinct base colors, one per class, spread around the hue wheel.
fn class_color(class: usize, classes: usize) -> [f32; 3] {
    let hue = class as f32 / classes.max(1) as f32;
    hsv_to_rgb(hue, 0.75, 0.9)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

/// Seeded synthetic dataset: class identity sets a base color, a stripe
/// orientation, and a stripe frequency; each image gets its own phase,
/// brightness, and pixel noise. Labels cycle 0..classes.
pub fn synthetic_classes(
    name: impl Into<String>,
    n: usize,
    classes: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Dataset {
    assert!(n > 0 && classes > 0, "need images and classes");
    let name = name.into();
    let (c, h, w) = shape;
    let mut rng = derive_rng(seed, &format!("synthetic/{name}"));
    let mut images = Array4::<f32>::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let color = class_color(class, classes);
        let angle = std::f32::consts::FRAC_PI_2 * class as f32 / classes as f32;
        let freq = 2.0 + class as f32;
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let brightness: f32 = rng.gen_range(0.8..1.2);
        let (sin_a, cos_a) = angle.sin_cos();
        for ch in 0..c {
            let base = color[ch % 3];
            for y in 0..h {
                for x in 0..w {
                    let u = x as f32 / w as f32;
                    let v = y as f32 / h as f32;
                    let wave =
                        (std::f32::consts::TAU * freq * (u * cos_a + v * sin_a) + phase).sin();
                    let noise: f32 = rng.gen_range(-0.05..0.05);
                    let value = base * brightness * (0.55 + 0.45 * wave) + noise;
                    images[[i, ch, y, x]] = value.clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(name, images, Some(labels), Some(classes)).expect("generator output is valid")
}

/// Two classes separated by overall brightness (0.2 vs 0.8 mean), with mild
/// texture and noise; linearly separable from pooled features.
pub fn two_class_brightness(
    name: impl Into<String>,
    n: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Dataset {
    assert!(n >= 2, "need at least one image per class");
    let name = name.into();
    let (c, h, w) = shape;
    let mut rng = derive_rng(seed, &format!("two-class/{name}"));
    let mut images = Array4::<f32>::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        labels.push(class);
        let base = if class == 0 { 0.2 } else { 0.8 };
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let wave = (x as f32 * 0.7 + phase).sin() * 0.05;
                    let noise: f32 = rng.gen_range(-0.03..0.03);
                    images[[i, ch, y, x]] = (base + wave + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(name, images, Some(labels), Some(2)).expect("generator output is valid")
}

/// Bilinear resize of one [C, H, W] plane stack, half-pixel-center sampling.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let top = src[[ch, y0, x0]] * (1.0 - tx) + src[[ch, y0, x1]] * tx;
                let bot = src[[ch, y1, x0]] * (1.0 - tx) + src[[ch, y1, x1]] * tx;
                out[[ch, oy, ox]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Loads CIFAR-10-layout binary files: each record is 1 label byte followed
/// by 3072 planar RGB bytes (row-major per 32x32 plane).
pub fn load_cifar10_files(
    name: impl Into<String>,
    paths: &[PathBuf],
    target_hw: (usize, usize),
) -> Result<Dataset, DataError> {
    let name = name.into();
    let mut records: Vec<(u8, Vec<u8>)> = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::BadRecordSize {
                path: path.clone(),
                size: bytes.len() as u64,
                record: CIFAR_RECORD,
            });
        }
        for chunk in bytes.chunks_exact(CIFAR_RECORD) {
            records.push((chunk[0], chunk[1..].to_vec()));
        }
    }
    if records.is_empty() {
        return Err(DataError::Empty(name));
    }
    let (th, tw) = target_hw;
    let mut images = Array4::<f32>::zeros((records.len(), 3, th, tw));
    let mut labels = Vec::with_capacity(records.len());
    for (i, (label, raw)) in records.iter().enumerate() {
        labels.push(*label as usize);
        let plane = Array3::from_shape_fn((3, CIFAR_SIDE, CIFAR_SIDE), |(c, y, x)| {
            raw[c * CIFAR_SIDE * CIFAR_SIDE + y * CIFAR_SIDE + x] as f32 / 255.0
        });
        let resized = resize_bilinear(&plane, th, tw);
        images.index_axis_mut(Axis(0), i).assign(&resized);
    }
    Dataset::new(name, images, Some(labels), Some(10))
}

/// Loads the conventional file layout under `dir`: data_batch_*.bin for the
/// train split, test_batch.bin for the test split.
pub fn load_cifar10_dir(
    dir: &Path,
    split: Split,
    target_hw: (usize, usize),
) -> Result<Dataset, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let Some(stem) = p.file_name().and_then(|s| s.to_str()) else {
                return false;
            };
            match split {
                Split::Train => stem.starts_with("data_batch") && stem.ends_with(".bin"),
                Split::Test => stem == "test_batch.bin",
            }
        })
        .collect();
    paths.sort();
    let name = format!(
        "{}[{split}]",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("cifar10")
    );
    if paths.is_empty() {
        return Err(DataError::Empty(name));
    }
    load_cifar10_files(name, &paths, target_hw)
}

/// Loads `root/<class_name>/*.png|jpg`-style trees; classes are the sorted
/// subdirectory names.
pub fn load_image_folder(root: &Path, target_hw: (usize, usize)) -> Result<Dataset, DataError> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let (th, tw) = target_hw;
    let mut planes: Vec<Array3<f32>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)?.into_rgb8();
            let (iw, ih) = img.dimensions();
            let plane = Array3::from_shape_fn((3, ih as usize, iw as usize), |(c, y, x)| {
                img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
            });
            planes.push(resize_bilinear(&plane, th, tw));
            labels.push(class);
        }
    }
    if planes.is_empty() {
        return Err(DataError::EmptyFolder(root.to_path_buf()));
    }
    let classes = class_dirs.len();
    let mut images = Array4::<f32>::zeros((planes.len(), 3, th, tw));
    for (i, plane) in planes.iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(plane);
    }
    let name = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("folder")
        .to_string();
    Dataset::new(name, images, Some(labels), Some(classes))
}

/// Resolves a dataset spec string:
///
/// - `synthetic:n=2000,classes=10,seed=100[,name=...]`
/// - `two_class:n=512,seed=7[,name=...]`
/// - `cifar10:<dir>[:train|:test]`
/// - `folder:<dir>`
/// - bare path: treated as `cifar10:<path>:train` if the directory holds any
///   `.bin` file, otherwise as an image-folder tree.
pub fn resolve_dataset(
    spec: &str,
    target_shape: (usize, usize, usize),
) -> Result<Dataset, DataError> {
    let (_, h, w) = target_shape;
    let bad = |detail: &str| DataError::BadSpec {
        spec: spec.to_string(),
        detail: detail.to_string(),
    };
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let kv = parse_kv(spec, rest)?;
        let n = kv_usize(&kv, "n", 1000, spec)?;
        let classes = kv_usize(&kv, "classes", 10, spec)?;
        let seed = kv_usize(&kv, "seed", 0, spec)? as u64;
        let name = kv_str(&kv, "name").unwrap_or("synthetic");
        return Ok(synthetic_classes(name, n, classes, target_shape, seed));
    }
    if let Some(rest) = spec.strip_prefix("two_class:") {
        let kv = parse_kv(spec, rest)?;
        let n = kv_usize(&kv, "n", 512, spec)?;
        let seed = kv_usize(&kv, "seed", 0, spec)? as u64;
        let name = kv_str(&kv, "name").unwrap_or("two_class");
        return Ok(two_class_brightness(name, n, target_shape, seed));
    }
    if let Some(rest) = spec.strip_prefix("cifar10:") {
        let (dir, split) = match rest.rsplit_once(':') {
            Some((d, "train")) => (d, Split::Train),
            Some((d, "test")) => (d, Split::Test),
            Some((_, other)) => {
                return Err(bad(&format!("unknown split {other:?}, expected train or test")))
            }
            None => (rest, Split::Train),
        };
        return load_cifar10_dir(Path::new(dir), split, (h, w));
    }
    if let Some(dir) = spec.strip_prefix("folder:") {
        return load_image_folder(Path::new(dir), (h, w));
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(bad("not a recognized scheme and the path does not exist"));
    }
    let has_bin = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x == "bin"));
    if has_bin {
        load_cifar10_dir(path, Split::Train, (h, w))
    } else {
        load_image_folder(path, (h, w))
    }
}

fn parse_kv<'a>(spec: &str, rest: &'a str) -> Result<Vec<(&'a str, &'a str)>, DataError> {
    let mut out = Vec::new();
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| DataError::BadSpec {
            spec: spec.to_string(),
            detail: format!("expected key=value, got {part:?}"),
        })?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

fn kv_str<'a>(kv: &[(&'a str, &'a str)], key: &str) -> Option<&'a str> {
    kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

fn kv_usize(
    kv: &[(&str, &str)],
    key: &str,
    default: usize,
    spec: &str,
) -> Result<usize, DataError> {
    match kv_str(kv, key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| DataError::BadSpec {
            spec: spec.to_string(),
            detail: format!("{key} must be a non-negative integer, got {v:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_generation_is_seed_deterministic() {
        let a = synthetic_classes("s", 12, 4, (3, 16, 16), 5);
        let b = synthetic_classes("s", 12, 4, (3, 16, 16), 5);
        assert_eq!(
            a.images().as_slice().unwrap(),
            b.images().as_slice().unwrap()
        );
        let c = synthetic_classes("s", 12, 4, (3, 16, 16), 6);
        assert!(a
            .images()
            .iter()
            .zip(c.images().iter())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn synthetic_labels_cycle_and_pixels_stay_in_range() {
        let d = synthetic_classes("s", 10, 3, (3, 8, 8), 1);
        assert_eq!(d.labels().unwrap(), &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(d.class_count, Some(3));
        assert_eq!(d.image_shape(), (3, 8, 8));
        assert!(d.images().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_classes_differ_in_mean_color() {
        let d = synthetic_classes("s", 40, 2, (3, 16, 16), 2);
        let mean_rgb = |class: usize| -> [f32; 3] {
            let mut acc = [0.0f32; 3];
            let mut count = 0;
            for (i, &label) in d.labels().unwrap().iter().enumerate() {
                if label != class {
                    continue;
                }
                count += 1;
                for ch in 0..3 {
                    acc[ch] += d
                        .images()
                        .index_axis(Axis(0), i)
                        .index_axis(Axis(0), ch)
                        .mean()
                        .unwrap();
                }
            }
            acc.map(|v| v / count as f32)
        };
        let a = mean_rgb(0);
        let b = mean_rgb(1);
        let gap: f32 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(gap > 0.2, "class colors too close: {a:?} vs {b:?}");
    }

    #[test]
    fn two_class_sets_are_brightness_separated() {
        let d = two_class_brightness("t", 64, (3, 8, 8), 3);
        let mut means = [(0.0f32, 0usize); 2];
        for (i, &label) in d.labels().unwrap().iter().enumerate() {
            let m = d.images().index_axis(Axis(0), i).mean().unwrap();
            means[label].0 += m;
            means[label].1 += 1;
        }
        let m0 = means[0].0 / means[0].1 as f32;
        let m1 = means[1].0 / means[1].1 as f32;
        assert!(m1 - m0 > 0.4, "class means {m0} vs {m1}");
    }

    #[test]
    fn resize_keeps_constant_images_constant_and_matches_identity() {
        let src = Array3::from_elem((3, 5, 7), 0.42f32);
        let up = resize_bilinear(&src, 13, 11);
        assert!(up.iter().all(|&v| (v - 0.42).abs() < 1e-6));
        let same = resize_bilinear(&src, 5, 7);
        assert_eq!(same.as_slice().unwrap(), src.as_slice().unwrap());
    }

    #[test]
    fn resize_interpolates_between_known_corners() {
        // 2x2 checker upsampled to 4x4: centers of the corner cells keep the
        // source values; interior cells mix them.
        let mut src = Array3::<f32>::zeros((1, 2, 2));
        src[[0, 0, 0]] = 1.0;
        src[[0, 1, 1]] = 1.0;
        let up = resize_bilinear(&src, 4, 4);
        assert_eq!(up[[0, 0, 0]], 1.0);
        assert_eq!(up[[0, 3, 3]], 1.0);
        assert_eq!(up[[0, 0, 3]], 0.0);
        assert_eq!(up[[0, 3, 0]], 0.0);
        assert!((up[[0, 1, 1]] - 0.625).abs() < 1e-6);
        let mean = up.mean().unwrap();
        assert!((mean - 0.5).abs() < 1e-6, "bilinear preserves the mean here");
    }

    #[test]
    fn cifar_layout_roundtrips_and_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = Vec::new();
        for (label, fill) in [(3u8, 10u8), (7, 200)] {
            bytes.push(label);
            bytes.extend(std::iter::repeat(fill).take(3072));
        }
        fs::write(&path, &bytes).unwrap();

        let d = load_cifar10_files("mini", &[path.clone()], (32, 32)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels().unwrap(), &[3, 7]);
        assert_eq!(d.class_count, Some(10));
        let first = d.images().index_axis(Axis(0), 0).to_owned();
        assert!(first.iter().all(|&v| (v - 10.0 / 255.0).abs() < 1e-6));

        let mut truncated = fs::OpenOptions::new().append(true).open(&path).unwrap();
        truncated.write_all(&[1, 2, 3]).unwrap();
        drop(truncated);
        assert!(matches!(
            load_cifar10_files("mini", &[path], (32, 32)),
            Err(DataError::BadRecordSize { .. })
        ));
    }

    #[test]
    fn cifar_dir_split_selection_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let record = |label: u8, fill: u8| {
            let mut v = vec![label];
            v.extend(std::iter::repeat(fill).take(3072));
            v
        };
        fs::write(dir.path().join("data_batch_1.bin"), record(1, 50)).unwrap();
        fs::write(dir.path().join("data_batch_2.bin"), record(2, 60)).unwrap();
        fs::write(dir.path().join("test_batch.bin"), record(9, 70)).unwrap();

        let train = load_cifar10_dir(dir.path(), Split::Train, (64, 64)).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train.labels().unwrap(), &[1, 2]);
        assert_eq!(train.image_shape(), (3, 64, 64));
        let test = load_cifar10_dir(dir.path(), Split::Test, (64, 64)).unwrap();
        assert_eq!(test.len(), 1);
        assert_eq!(test.labels().unwrap(), &[9]);
        // Constant source stays constant through the resize.
        assert!(test
            .images()
            .iter()
            .all(|&v| (v - 70.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn image_folder_assigns_labels_by_sorted_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (class, fill) in [("a_cats", 40u8), ("b_dogs", 220)] {
            let sub = dir.path().join(class);
            fs::create_dir(&sub).unwrap();
            let buf = vec![fill; 8 * 8 * 3];
            image::save_buffer(
                sub.join("img.png"),
                &buf,
                8,
                8,
                image::ColorType::Rgb8,
            )
            .unwrap();
        }
        let d = load_image_folder(dir.path(), (16, 16)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels().unwrap(), &[0, 1]);
        assert_eq!(d.class_count, Some(2));
        assert_eq!(d.image_shape(), (3, 16, 16));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image_folder(empty.path(), (16, 16)),
            Err(DataError::EmptyFolder(_))
        ));
    }

    #[test]
    fn spec_strings_resolve_or_fail_clearly() {
        let d = resolve_dataset("synthetic:n=6,classes=3,seed=9", (3, 8, 8)).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.class_count, Some(3));
        let t = resolve_dataset("two_class:n=4,seed=1,name=probe", (3, 8, 8)).unwrap();
        assert_eq!(t.name, "probe");
        assert!(matches!(
            resolve_dataset("synthetic:n=abc", (3, 8, 8)),
            Err(DataError::BadSpec { .. })
        ));
        assert!(matches!(
            resolve_dataset("synthetic:oops", (3, 8, 8)),
            Err(DataError::BadSpec { .. })
        ));
        assert!(matches!(
            resolve_dataset("/no/such/path", (3, 8, 8)),
            Err(DataError::BadSpec { .. })
        ));
        assert!(matches!(
            resolve_dataset("cifar10:/tmp:validation", (3, 8, 8)),
            Err(DataError::BadSpec { .. })
        ));
    }

    #[test]
    fn subset_and_batch_conversion_preserve_content() {
        let d = synthetic_classes("s", 9, 3, (3, 8, 8), 11);
        let sub = d.subset(&[2, 5, 7], "sub");
        assert_eq!(sub.len(), 3);
        assert_eq!(
            sub.labels().unwrap(),
            &[d.labels().unwrap()[2], d.labels().unwrap()[5], d.labels().unwrap()[7]]
        );
        let batch = d.batch_f64(&[2, 5]);
        assert_eq!(batch.dim(), (2, 3, 8, 8));
        let direct = d.range_f64(2..3);
        for (a, b) in batch.index_axis(Axis(0), 0).iter().zip(direct.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(d.take(4, "head").len(), 4);
    }

    #[test]
    fn construction_rejects_inconsistent_labels_and_pixels() {
        let images = Array4::<f32>::zeros((2, 1, 2, 2));
        assert!(matches!(
            Dataset::new("d", images.clone(), Some(vec![0]), Some(2)),
            Err(DataError::LabelCountMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new("d", images.clone(), Some(vec![0, 5]), Some(2)),
            Err(DataError::BadLabel { .. })
        ));
        let mut bad = images;
        bad[[0, 0, 0, 0]] = 1.5;
        assert!(matches!(
            Dataset::new("d", bad, None, None),
            Err(DataError::BadPixel(_))
        ));
    }
}
