//! Multimodal datasets: the manifest format, image preprocessing, unpaired
//! per-modality sampling and a procedural synthetic dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb32FImage, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{compose_target_label, AttributeSchema, AttributeVector, ModalityCode};
use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "mmface-manifest 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Relative to the manifest root.
    pub path: String,
    pub attributes: AttributeVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Order defines modality code indices.
    pub modalities: Vec<String>,
    pub schema: AttributeSchema,
    /// `records[m]` lists the images of modality `m`; lists need not match.
    pub records: Vec<Vec<Record>>,
}

impl DatasetManifest {
    pub fn c(&self) -> usize {
        self.modalities.len()
    }

    pub fn d_a(&self) -> usize {
        self.schema.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
            _ => return Err(Error::Data(format!("missing `{MANIFEST_HEADER}` header"))),
        }
        let mut modalities = Vec::new();
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for (no, line) in lines {
            let line_no = no + 1;
            if let Some(name) = line.strip_prefix("modality ") {
                if !rows.is_empty() {
                    return Err(Error::Data(format!("line {line_no}: header after records")));
                }
                modalities.push(name.trim().to_string());
            } else if let Some(name) = line.strip_prefix("attribute ") {
                if !rows.is_empty() {
                    return Err(Error::Data(format!("line {line_no}: header after records")));
                }
                names.push(name.trim().to_string());
            } else {
                rows.push((line_no, line));
            }
        }
        if modalities.is_empty() {
            return Err(Error::Data("manifest declares no modalities".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = modalities.iter().find(|m| !seen.insert(m.as_str())) {
            return Err(Error::Data(format!("modality `{dup}` declared twice")));
        }
        let schema = AttributeSchema::new(names)?;
        let mut records = vec![Vec::new(); modalities.len()];
        for (line_no, line) in rows {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!(
                    "line {line_no}: expected `modality<TAB>path<TAB>values`"
                )));
            }
            let m = modalities
                .iter()
                .position(|n| n == fields[0])
                .ok_or_else(|| Error::Data(format!("line {line_no}: unknown modality `{}`", fields[0])))?;
            let values = fields[2]
                .split_whitespace()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
            if values.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "line {line_no}: {} attribute values for a {}-name schema",
                    values.len(),
                    schema.len()
                )));
            }
            let attributes = AttributeVector::new(values)
                .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
            records[m].push(Record {
                path: fields[1].to_string(),
                attributes,
            });
        }
        Ok(Self {
            root,
            modalities,
            schema,
            records,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for m in &self.modalities {
            writeln!(out, "modality {m}").unwrap();
        }
        for a in self.schema.names() {
            writeln!(out, "attribute {a}").unwrap();
        }
        for (m, recs) in self.records.iter().enumerate() {
            for r in recs {
                let values: Vec<String> = r.attributes.values().iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}\t{}\t{}", self.modalities[m], r.path, values.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Loads an image file and maps it to `[3, R, R]` values in [-1, 1].
pub fn preprocess(path: &Path, resolution: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    Ok(preprocess_image(&img, resolution))
}

/// Bilinear (area-aware) resize to `R x R`, grayscale replicated to RGB,
/// channels scaled from [0, 1] to [-1, 1].
pub fn preprocess_image(img: &DynamicImage, resolution: usize) -> Tensor {
    let rgb: Rgb32FImage = img.to_rgb32f();
    let r = resolution as u32;
    let rgb = if rgb.dimensions() == (r, r) {
        rgb
    } else {
        imageops::resize(&rgb, r, r, FilterType::Triangle)
    };
    let plane = resolution * resolution;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] * 2.0 - 1.0;
        }
    }
    Tensor::new(&[3, resolution, resolution], data)
}

/// A manifest with every image decoded into memory.
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<Vec<DynamicImage>>,
}

impl Dataset {
    pub fn open(manifest: DatasetManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.c());
        for recs in &manifest.records {
            let mut decoded = Vec::with_capacity(recs.len());
            for r in recs {
                let path = manifest.root.join(&r.path);
                let img = image::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                decoded.push(img);
            }
            images.push(decoded);
        }
        Ok(Self { manifest, images })
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::open(DatasetManifest::load(manifest_path)?)
    }

    /// Every image preprocessed to `resolution`, ready for sampling.
    pub fn at_resolution(&self, resolution: usize) -> StageData {
        let c = self.manifest.c();
        let d_a = self.manifest.d_a();
        let modalities = self
            .images
            .iter()
            .zip(&self.manifest.records)
            .enumerate()
            .map(|(m, (imgs, recs))| {
                let mut pixels = Vec::with_capacity(imgs.len() * 3 * resolution * resolution);
                for img in imgs {
                    pixels.extend_from_slice(preprocess_image(img, resolution).data());
                }
                let code = ModalityCode::new(m, c).expect("modality index within count");
                let mut labels = Vec::with_capacity(recs.len() * (d_a + c));
                for r in recs {
                    labels.extend_from_slice(compose_target_label(&r.attributes, code).values());
                }
                ModalityData {
                    count: imgs.len(),
                    pixels,
                    labels,
                }
            })
            .collect();
        StageData {
            resolution,
            c,
            d_a,
            modalities,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModalityData {
    pub count: usize,
    /// `count` images of `3 * R * R` values each.
    pub pixels: Vec<f32>,
    /// `count` target labels of `d_a + c` values each.
    pub labels: Vec<f32>,
}

/// Preprocessed images at one resolution.
#[derive(Debug, Clone)]
pub struct StageData {
    pub resolution: usize,
    pub c: usize,
    pub d_a: usize,
    pub modalities: Vec<ModalityData>,
}

impl StageData {
    pub fn image(&self, m: usize, i: usize) -> Tensor {
        let r = self.resolution;
        let per = 3 * r * r;
        Tensor::new(&[3, r, r], self.modalities[m].pixels[i * per..(i + 1) * per].to_vec())
    }

    pub fn attributes(&self, m: usize, i: usize) -> &[f32] {
        let w = self.d_a + self.c;
        &self.modalities[m].labels[i * w..i * w + self.d_a]
    }

    /// Stacks the given records of modality `m` into `[n, 3, R, R]` images
    /// and `[n, d_a + c]` labels.
    pub fn gather(&self, m: usize, indices: &[usize]) -> (Tensor, Tensor) {
        let r = self.resolution;
        let per = 3 * r * r;
        let w = self.d_a + self.c;
        let md = &self.modalities[m];
        let mut px = Vec::with_capacity(indices.len() * per);
        let mut lb = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            px.extend_from_slice(&md.pixels[i * per..(i + 1) * per]);
            lb.extend_from_slice(&md.labels[i * w..(i + 1) * w]);
        }
        (
            Tensor::new(&[indices.len(), 3, r, r], px),
            Tensor::new(&[indices.len(), w], lb),
        )
    }
}

/// Draws `n` records of modality `m` uniformly with replacement.
pub fn sample_batch(data: &StageData, m: usize, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let md = data
        .modalities
        .get(m)
        .ok_or_else(|| Error::Input(format!("modality index {m} out of range")))?;
    if md.count == 0 {
        return Err(Error::Data(format!("modality {m} has no records")));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..md.count)).collect();
    Ok(data.gather(m, &idx))
}

pub const SYNTH_MODALITIES: [&str; 3] = ["visible", "sketch", "thermal"];
pub const SYNTH_ATTRIBUTES: [&str; 3] = ["round", "large", "bright"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub c: usize,
    pub resolution: usize,
    /// Records per modality; unequal counts give an unpaired dataset.
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(c: usize, resolution: usize, per_modality: usize, seed: u64) -> Self {
        Self {
            c,
            resolution,
            counts: vec![per_modality; c],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.c > SYNTH_MODALITIES.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 1 to {} modalities, got {}",
                SYNTH_MODALITIES.len(),
                self.c
            )));
        }
        if self.counts.len() != self.c {
            return Err(Error::Config(format!("{} counts for {} modalities", self.counts.len(), self.c)));
        }
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "synthetic resolution must be a power of two >= 4, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Geometry and colour of one synthetic instance. All modalities rendered
/// from the same scene share its shape mask exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub round: bool,
    pub large: bool,
    pub bright: bool,
    /// Centre and radius as fractions of the image side.
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub hue: f32,
}

const SUPERSAMPLE: usize = 4;
const BACKGROUND: f32 = 0.08;

impl Scene {
    /// Attribute values are read by sign: positive means the named property.
    pub fn new(attributes: &[f32], rng: &mut impl Rng) -> Self {
        let flag = |i: usize| attributes.get(i).is_some_and(|&v| v > 0.0);
        let large = flag(1);
        let base = if large { 0.32 } else { 0.2 };
        Self {
            round: flag(0),
            large,
            bright: flag(2),
            cx: 0.5 + rng.random_range(-0.08..0.08),
            cy: 0.5 + rng.random_range(-0.08..0.08),
            radius: base + rng.random_range(-0.02..0.02),
            hue: rng.random_range(0.0..1.0),
        }
    }

    fn inside(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if self.round {
            dx * dx + dy * dy <= self.radius * self.radius
        } else {
            let half = self.radius;
            dx.abs() <= half && dy.abs() <= half
        }
    }

    /// Fraction of each pixel covered by the shape, `R * R` row-major.
    pub fn coverage(&self, r: usize) -> Vec<f32> {
        let mut out = vec![0.0; r * r];
        let step = 1.0 / (r * SUPERSAMPLE) as f32;
        for (i, cov) in out.iter_mut().enumerate() {
            let (py, px) = (i / r, i % r);
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = ((px * SUPERSAMPLE + sx) as f32 + 0.5) * step;
                    let y = ((py * SUPERSAMPLE + sy) as f32 + 0.5) * step;
                    hits += self.inside(x, y) as usize;
                }
            }
            *cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
        out
    }

    /// Fill colour: a hue from a palette whose channels always average 0.5,
    /// scaled by the brightness attribute.
    pub fn fill(&self) -> [f32; 3] {
        let value = if self.bright { 1.0 } else { 0.45 };
        let tau = std::f32::consts::TAU;
        [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|phase| {
            let p = 0.5 + 0.5 * (tau * (self.hue + phase)).cos();
            value * (0.35 + 0.65 * p)
        })
    }

    /// The colour image as `[3][R * R]` planes in [0, 1].
    pub fn visible(&self, r: usize) -> [Vec<f32>; 3] {
        let cov = self.coverage(r);
        let fill = self.fill();
        fill.map(|f| cov.iter().map(|&a| a * f + (1.0 - a) * BACKGROUND).collect())
    }

    pub fn luminance(&self, r: usize) -> Vec<f32> {
        let [red, green, blue] = self.visible(r);
        (0..r * r).map(|i| (red[i] + green[i] + blue[i]) / 3.0).collect()
    }

    pub fn render(&self, style: usize, r: usize) -> [Vec<f32>; 3] {
        match style {
            0 => self.visible(r),
            1 => {
                let edges = sobel_magnitude(&self.luminance(r), r);
                let v: Vec<f32> = edges.iter().map(|e| 1.0 - (2.0 * e).min(1.0)).collect();
                [v.clone(), v.clone(), v]
            }
            _ => {
                let lum = self.luminance(r);
                let mut planes = [vec![0.0; r * r], vec![0.0; r * r], vec![0.0; r * r]];
                for (i, l) in lum.iter().enumerate() {
                    let rgb = thermal_colormap(1.0 - l);
                    for ch in 0..3 {
                        planes[ch][i] = rgb[ch];
                    }
                }
                planes
            }
        }
    }
}

/// 3x3 Sobel gradient magnitude with replicated borders, scaled so a unit
/// step edge reads about 1.
pub fn sobel_magnitude(img: &[f32], r: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, r as isize - 1) as usize;
        let cy = y.clamp(0, r as isize - 1) as usize;
        img[cy * r + cx]
    };
    let mut out = vec![0.0; r * r];
    for y in 0..r as isize {
        for x in 0..r as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out[y as usize * r + x as usize] = (gx * gx + gy * gy).sqrt() / 4.0;
        }
    }
    out
}

/// Black through purple and orange to pale yellow.
pub fn thermal_colormap(t: f32) -> [f32; 3] {
    const STOPS: [(f32, [f32; 3]); 4] = [
        (0.0, [0.0, 0.0, 0.1]),
        (0.35, [0.5, 0.0, 0.55]),
        (0.7, [0.95, 0.45, 0.05]),
        (1.0, [1.0, 1.0, 0.6]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (w[0], w[1]);
        if t <= t1 {
            let u = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + u * (c1[i] - c0[i]));
        }
    }
    STOPS[3].1
}

pub fn planes_to_rgb8(planes: &[Vec<f32>; 3], r: usize) -> RgbImage {
    RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let i = y as usize * r + x as usize;
        image::Rgb([0, 1, 2].map(|ch| (planes[ch][i].clamp(0.0, 1.0) * 255.0).round_ties_even() as u8))
    })
}

/// Renders the synthetic dataset under `out_dir` and writes its manifest
/// to `out_dir/manifest.txt`.
pub fn generate_synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let modalities: Vec<String> = SYNTH_MODALITIES[..spec.c].iter().map(|s| s.to_string()).collect();
    let schema = AttributeSchema::new(SYNTH_ATTRIBUTES)?;
    let mut records = Vec::with_capacity(spec.c);
    for (m, name) in modalities.iter().enumerate() {
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(m as u64);
        let mut recs = Vec::with_capacity(spec.counts[m]);
        for i in 0..spec.counts[m] {
            let attrs: Vec<f32> = (0..SYNTH_ATTRIBUTES.len())
                .map(|_| if rng.next_u32() & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let scene = Scene::new(&attrs, &mut rng);
            let img = planes_to_rgb8(&scene.render(m, spec.resolution), spec.resolution);
            let rel = format!("{name}/{i:05}.png");
            let path = out_dir.join(&rel);
            img.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            recs.push(Record {
                path: rel,
                attributes: AttributeVector::new(attrs)?,
            });
        }
        records.push(recs);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        modalities,
        schema,
        records,
    };
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest() -> DatasetManifest {
        let text = "mmface-manifest 1\nmodality a\nmodality b\nattribute x\nattribute y\n\
                    a\ta/0.png\t1 -1\na\ta/1.png\t0.25 1\nb\tb/0.png\t-1 -0.5\n";
        DatasetManifest::parse(text, PathBuf::from("/data")).unwrap()
    }

    #[test]
    fn manifest_round_trip() {
        let m = small_manifest();
        assert_eq!(m.records[0].len(), 2);
        assert_eq!(m.records[1].len(), 1);
        let again = DatasetManifest::parse(&m.to_text(), m.root.clone()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn manifest_errors() {
        let bad_len = "mmface-manifest 1\nmodality a\nattribute x\nattribute y\na\tp.png\t1\n";
        assert!(matches!(DatasetManifest::parse(bad_len, PathBuf::new()), Err(Error::Schema(_))));
        let unknown = "mmface-manifest 1\nmodality a\nattribute x\nz\tp.png\t1\n";
        assert!(matches!(DatasetManifest::parse(unknown, PathBuf::new()), Err(Error::Data(_))));
        assert!(DatasetManifest::parse("modality a\n", PathBuf::new()).is_err());
        let out_of_range = "mmface-manifest 1\nmodality a\nattribute x\na\tp.png\t2\n";
        assert!(DatasetManifest::parse(out_of_range, PathBuf::new()).is_err());
    }

    #[test]
    fn preprocess_maps_extremes() {
        let gray = DynamicImage::ImageRgb32F(Rgb32FImage::from_pixel(8, 8, image::Rgb([0.5, 0.5, 0.5])));
        assert!(preprocess_image(&gray, 8).data().iter().all(|&v| v == 0.0));
        let white = DynamicImage::ImageLuma8(image::GrayImage::from_pixel(8, 8, image::Luma([255])));
        let t = preprocess_image(&white, 4);
        assert_eq!(t.shape(), [3, 4, 4]);
        assert!(t.data().iter().all(|&v| v == 1.0));
        let black = DynamicImage::ImageRgb8(RgbImage::new(8, 8));
        assert!(preprocess_image(&black, 8).data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn checkerboard_averages_to_zero() {
        let board = RgbImage::from_fn(256, 256, |x, y| {
            let v = if (x + y) % 2 == 0 { 255 } else { 0 };
            image::Rgb([v, v, v])
        });
        let t = preprocess_image(&DynamicImage::ImageRgb8(board), 4);
        assert!(t.data().iter().all(|v| v.abs() < 1e-4), "{:?}", t.data());
    }

    #[test]
    fn preprocess_is_idempotent_at_target_resolution() {
        let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 100]));
        let once = preprocess_image(&DynamicImage::ImageRgb8(img), 8);
        let back = Rgb32FImage::from_fn(8, 8, |x, y| {
            let i = (y * 8 + x) as usize;
            image::Rgb([0, 1, 2].map(|c| (once.data()[c * 64 + i] + 1.0) / 2.0))
        });
        let twice = preprocess_image(&DynamicImage::ImageRgb32F(back), 8);
        assert!(once.max_abs_diff(&twice) < 1e-6);
    }

    #[test]
    fn same_scene_shares_geometry_across_styles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scene = Scene::new(&[1.0, 1.0, 1.0], &mut rng);
        assert!(scene.round && scene.large && scene.bright);
        let r = 32;
        let cov = scene.coverage(r);
        // visible: pixels differ from background exactly where the shape covers them
        let vis = scene.visible(r);
        for i in 0..r * r {
            assert_eq!(cov[i] > 0.0, (vis[0][i] - BACKGROUND).abs() > 1e-6 || (vis[1][i] - BACKGROUND).abs() > 1e-6);
        }
        // sketch is the edge map of the same luminance
        let sketch = scene.render(1, r);
        let edges = sobel_magnitude(&scene.luminance(r), r);
        for i in 0..r * r {
            assert_eq!(sketch[0][i], 1.0 - (2.0 * edges[i]).min(1.0));
        }
        let mask_vis: Vec<bool> = cov.iter().map(|&c| c >= 0.5).collect();
        let mask_again: Vec<bool> = scene.coverage(r).iter().map(|&c| c >= 0.5).collect();
        assert_eq!(mask_vis, mask_again);
    }

    #[test]
    fn attributes_drive_rendering() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = Scene::new(&[1.0, 1.0, -1.0], &mut rng);
        let small = Scene { large: false, radius: 0.17, ..big };
        let area = |s: &Scene| s.coverage(32).iter().sum::<f32>();
        assert!(area(&big) > 2.0 * area(&small));
        let bright = Scene { bright: true, ..big };
        let lum = |s: &Scene| s.fill().iter().sum::<f32>();
        assert!(lum(&bright) > 1.5 * lum(&big));
    }

    #[test]
    fn synth_dataset_is_deterministic_and_samplable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            c: 3,
            resolution: 16,
            counts: vec![6, 4, 2],
            seed: 5,
        };
        let ma = generate_synth_dataset(&spec, a.path()).unwrap();
        generate_synth_dataset(&spec, b.path()).unwrap();
        for recs in &ma.records {
            for r in recs {
                assert_eq!(fs::read(a.path().join(&r.path)).unwrap(), fs::read(b.path().join(&r.path)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join("manifest.txt")).unwrap(),
            fs::read(b.path().join("manifest.txt")).unwrap()
        );

        let ds = Dataset::load(&a.path().join("manifest.txt")).unwrap();
        let stage = ds.at_resolution(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (imgs, labels) = sample_batch(&stage, 2, 16, &mut rng).unwrap();
        assert_eq!(imgs.shape(), [16, 3, 8, 8]);
        assert_eq!(labels.shape(), [16, 6]);
        for row in labels.data().chunks(6) {
            assert_eq!(&row[3..], &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn single_record_modality_always_draws_it() {
        let data = StageData {
            resolution: 4,
            c: 1,
            d_a: 1,
            modalities: vec![ModalityData {
                count: 1,
                pixels: (0..48).map(|i| i as f32).collect(),
                labels: vec![1.0, 1.0],
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (imgs, _) = sample_batch(&data, 0, 5, &mut rng).unwrap();
        for i in 0..5 {
            assert_eq!(imgs.narrow(0, i, 1).data(), &data.modalities[0].pixels[..]);
        }
        let empty = StageData {
            modalities: vec![ModalityData { count: 0, pixels: vec![], labels: vec![] }],
            ..data
        };
        assert!(matches!(sample_batch(&empty, 0, 1, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn sampled_attribute_frequencies_match_dataset() {
        let n = 50;
        let labels: Vec<f32> = (0..n).flat_map(|i| [if i % 5 == 0 { 1.0 } else { -1.0 }, 1.0]).collect();
        let data = StageData {
            resolution: 4,
            c: 1,
            d_a: 1,
            modalities: vec![ModalityData {
                count: n,
                pixels: vec![0.0; n * 48],
                labels,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, lb) = sample_batch(&data, 0, 10_000, &mut rng).unwrap();
        let pos = lb.data().chunks(2).filter(|r| r[0] > 0.0).count() as f32 / 10_000.0;
        assert!((pos - 0.2).abs() < 0.03, "{pos}");
    }
}
