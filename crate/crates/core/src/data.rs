//! Rated image records, the CSV manifest, a procedural synthetic dataset,
//! and mini-batch iteration.
//!
//! Manifest format: a header line, then one record per line:
//!
//! ```text
//! image_id,image_path,r1,...,r10,complementary_colors,...,vanishing_point
//! img001,images/img001.png,0,0,3,10,40,80,50,15,2,0,0,1,0,0,0,0,1,0,0,0,0,0,0,0
//! ```
//!
//! `r1..r10` are rater counts per rating, the style columns are 0/1 flags,
//! and relative image paths resolve against the manifest's directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::prepare_image;
use crate::augment::Pipeline;
use crate::error::{invalid, Error, Result};
use crate::network::mix_seed;
use crate::rating::{mean_rating, quantize_binary, BinaryLabel, RatingHistogram, RATING_BINS};
use crate::rgb::RgbImage;
use crate::tensor::Tensor;

pub const STYLE_COUNT: usize = 14;

pub const STYLE_NAMES: [&str; STYLE_COUNT] = [
    "complementary_colors",
    "duotones",
    "high_dynamic_range",
    "image_grain",
    "light_on_white",
    "long_exposure",
    "macro",
    "motion_blur",
    "negative_image",
    "rule_of_thirds",
    "shallow_dof",
    "silhouettes",
    "soft_focus",
    "vanishing_point",
];

pub fn style_index(name: &str) -> Option<usize> {
    STYLE_NAMES.iter().position(|n| *n == name)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image_id: String,
    /// As written in the manifest.
    pub image_path: PathBuf,
    pub ratings: RatingHistogram,
    pub styles: [bool; STYLE_COUNT],
}

impl Record {
    pub fn mean_rating(&self) -> Result<f64> {
        mean_rating(&self.ratings)
    }

    pub fn binary_label(&self, delta: f64) -> Result<BinaryLabel> {
        Ok(quantize_binary(self.mean_rating()?, delta))
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &Record) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.base_dir.join(&record.image_path)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn header() -> Vec<String> {
    let mut h = vec!["image_id".to_string(), "image_path".to_string()];
    h.extend((1..=RATING_BINS).map(|i| format!("r{}", i)));
    h.extend(STYLE_NAMES.iter().map(|s| s.to_string()));
    h
}

const FIELDS: usize = 2 + RATING_BINS + STYLE_COUNT;

fn parse_record(rec: &csv::StringRecord) -> std::result::Result<Record, String> {
    if rec.len() != FIELDS {
        return Err(format!("expected {} fields, found {}", FIELDS, rec.len()));
    }
    let id = rec[0].trim();
    if id.is_empty() {
        return Err("empty image_id".into());
    }
    let mut counts = [0u32; RATING_BINS];
    for (i, c) in counts.iter_mut().enumerate() {
        let f = rec[2 + i].trim();
        *c = f
            .parse()
            .map_err(|_| format!("rating count r{} = '{}' is not a non-negative integer", i + 1, f))?;
    }
    let mut styles = [false; STYLE_COUNT];
    for (i, s) in styles.iter_mut().enumerate() {
        *s = match rec[2 + RATING_BINS + i].trim() {
            "0" => false,
            "1" => true,
            other => return Err(format!("style flag {} = '{}' is not 0 or 1", STYLE_NAMES[i], other)),
        };
    }
    Ok(Record {
        image_id: id.to_string(),
        image_path: PathBuf::from(rec[1].trim()),
        ratings: RatingHistogram(counts),
        styles,
    })
}

/// Parses manifest text; `check_files` also requires every image to exist.
pub fn parse_manifest(text: &str, path: &Path, check_files: bool) -> Result<DatasetManifest> {
    let perr = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = DatasetManifest {
        base_dir,
        records: Vec::new(),
    };
    let mut seen = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| perr(e.position().map_or(i as u64 + 1, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 {
            let got: Vec<&str> = row.iter().map(str::trim).collect();
            if got != header() {
                return Err(perr(line, format!("header must be: {}", header().join(","))));
            }
            continue;
        }
        let rec = parse_record(&row).map_err(|m| perr(line, m))?;
        if let Some(prev) = seen.insert(rec.image_id.clone(), line) {
            return Err(perr(line, format!("image_id {} already used on line {}", rec.image_id, prev)));
        }
        if check_files && !manifest.resolve(&rec).is_file() {
            return Err(perr(line, format!("image file {} not found", manifest.resolve(&rec).display())));
        }
        manifest.records.push(rec);
    }
    if seen.is_empty() && reader.position().line() == 1 {
        return Err(perr(1, "missing header line".into()));
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    parse_manifest(&fs::read_to_string(path)?, path, true)
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| invalid(e.to_string());
    w.write_record(header()).map_err(io)?;
    for r in &manifest.records {
        let path = r
            .image_path
            .to_str()
            .ok_or_else(|| invalid(format!("image path of {} is not UTF-8", r.image_id)))?;
        let mut row = vec![r.image_id.clone(), path.to_string()];
        row.extend(r.ratings.0.iter().map(|c| c.to_string()));
        row.extend(r.styles.iter().map(|&s| if s { "1" } else { "0" }.to_string()));
        w.write_record(row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    fs::write(path, manifest_to_string(manifest)?)?;
    Ok(())
}

/// A manifest with its images in memory.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let images = manifest
            .records
            .iter()
            .map(|r| RgbImage::load(&manifest.resolve(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, images })
    }

    /// Writes images under `dir/images/` and the manifest as
    /// `dir/manifest.csv`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("images"))?;
        for (r, img) in self.manifest.records.iter().zip(&self.images) {
            img.save(&dir.join(&r.image_path))?;
        }
        let path = dir.join("manifest.csv");
        write_manifest(&self.manifest, &path)?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.manifest.records
    }

    /// The records and images at `indices`, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: DatasetManifest {
                base_dir: self.manifest.base_dir.clone(),
                records: indices.iter().map(|&i| self.manifest.records[i].clone()).collect(),
            },
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

/// Per-style texture: a zero-mean 4x4 Walsh pattern, the product of two
/// length-4 Walsh sequences indexed by row and column.
fn walsh(k: usize, i: usize) -> f64 {
    const H: [[f64; 4]; 4] = [
        [1.0, 1.0, 1.0, 1.0],
        [1.0, 1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0, -1.0],
    ];
    H[k][i]
}

/// The (row, column) Walsh indices of style `s`; never (0, 0).
fn style_pattern(s: usize) -> (usize, usize) {
    let k = s + 1;
    (k / 4, k % 4)
}

/// Texture weight of style `s` at pixel `(y, x)`, in {-1, 1}.
pub fn style_texture(s: usize, y: usize, x: usize) -> f64 {
    let (u, v) = style_pattern(s);
    walsh(u, y % 4) * walsh(v, x % 4)
}

/// Generator settings for the synthetic rated-image task.
///
/// Each style present in an image adds its own 4x4 texture, with a random
/// sign, equally to R, G and B over a smooth random colour field. The
/// textures average to zero over aligned 4x4 blocks, so they leave the
/// downsampled colour planes unchanged. The mean rating is
/// `2 + 7 * clamp(sum_i w_i f_i, 0, 1)` and the rater spread is
/// `0.5 + 0.25 * |mu - 5.5|`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub height: usize,
    pub width: usize,
    pub raters: u32,
    /// Probability each style is present.
    pub positive_rate: [f64; STYLE_COUNT],
    /// Contribution of each style to the rating score.
    pub rating_weights: [f64; STYLE_COUNT],
    /// Texture amplitude in 8-bit intensity levels.
    pub amplitude: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            height: 64,
            width: 64,
            raters: 200,
            positive_rate: [0.45; STYLE_COUNT],
            rating_weights: [1.0 / STYLE_COUNT as f64; STYLE_COUNT],
            amplitude: 6.0,
        }
    }
}

impl SyntheticTaskSpec {
    /// Ratings driven only by `styles`, equally weighted.
    pub fn focused(styles: &[usize]) -> Result<Self> {
        let mut spec = SyntheticTaskSpec::default();
        if styles.is_empty() || styles.iter().any(|&s| s >= STYLE_COUNT) {
            return Err(invalid(format!("invalid style subset {:?}", styles)));
        }
        spec.rating_weights = [0.0; STYLE_COUNT];
        for &s in styles {
            spec.rating_weights[s] = 1.0 / styles.len() as f64;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(invalid("synthetic images must be at least 16x16"));
        }
        if self.raters == 0 {
            return Err(invalid("rater count must be positive"));
        }
        if let Some(p) = self.positive_rate.iter().find(|p| !(0.1..=0.9).contains(*p)) {
            return Err(invalid(format!("positive rate {} outside [0.1, 0.9]", p)));
        }
        if self.rating_weights.iter().any(|w| !w.is_finite()) || !(self.amplitude > 0.0) {
            return Err(invalid("rating weights and amplitude must be finite, amplitude positive"));
        }
        Ok(())
    }

    pub fn mean_for(&self, styles: &[bool; STYLE_COUNT]) -> f64 {
        let score: f64 = styles
            .iter()
            .zip(&self.rating_weights)
            .map(|(&f, w)| if f { *w } else { 0.0 })
            .sum();
        2.0 + 7.0 * score.clamp(0.0, 1.0)
    }

    pub fn sigma_for(mu: f64) -> f64 {
        0.5 + 0.25 * (mu - 5.5).abs()
    }
}

/// Draws `raters` ratings from N(mu, sigma), rounded and clamped to 1..=10.
pub fn rater_histogram(mu: f64, sigma: f64, raters: u32, rng: &mut impl Rng) -> Result<RatingHistogram> {
    let normal = Normal::new(mu, sigma).map_err(|e| invalid(e.to_string()))?;
    let mut counts = [0u32; RATING_BINS];
    for _ in 0..raters {
        let r = normal.sample(rng).round().clamp(1.0, RATING_BINS as f64) as usize;
        counts[r - 1] += 1;
    }
    Ok(RatingHistogram(counts))
}

/// Deterministic synthetic dataset of `n` images.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let mut styles = [false; STYLE_COUNT];
        let mut signs = [0.0; STYLE_COUNT];
        for s in 0..STYLE_COUNT {
            styles[s] = rng.random_bool(spec.positive_rate[s]);
            signs[s] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(100.0..155.0));
        let gy: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let gx: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let (h, w) = (spec.height, spec.width);
        let img = RgbImage::from_fn(h, w, |y, x| {
            let texture: f64 = (0..STYLE_COUNT)
                .filter(|&s| styles[s])
                .map(|s| signs[s] * style_texture(s, y, x))
                .sum::<f64>()
                * spec.amplitude;
            let fy = y as f64 / h as f64 - 0.5;
            let fx = x as f64 / w as f64 - 0.5;
            std::array::from_fn(|c| (base[c] + gy[c] * fy + gx[c] * fx + texture).round().clamp(0.0, 255.0) as u8)
        })?;
        let mu = spec.mean_for(&styles);
        let ratings = rater_histogram(mu, SyntheticTaskSpec::sigma_for(mu), spec.raters, &mut rng)?;
        let id = format!("syn{:05}", i);
        records.push(Record {
            image_path: PathBuf::from(format!("images/{}.png", id)),
            image_id: id,
            ratings,
            styles,
        });
        images.push(img);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            base_dir: PathBuf::new(),
            records,
        },
        images,
    })
}

/// Rule-based style detector for synthetic images: projects the mean of
/// the three channels, with each 4x4 block's mean removed, onto every
/// style texture and thresholds at half the texture amplitude.
pub fn detect_styles(img: &RgbImage, amplitude: f64) -> [bool; STYLE_COUNT] {
    let (bh, bw) = (img.height() / 4, img.width() / 4);
    let mut proj = [0.0; STYLE_COUNT];
    for by in 0..bh {
        for bx in 0..bw {
            let mut block = [[0.0; 4]; 4];
            let mut mean = 0.0;
            for (dy, row) in block.iter_mut().enumerate() {
                for (dx, v) in row.iter_mut().enumerate() {
                    let p = img.get(by * 4 + dy, bx * 4 + dx);
                    *v = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
                    mean += *v / 16.0;
                }
            }
            for (s, acc) in proj.iter_mut().enumerate() {
                for (dy, row) in block.iter().enumerate() {
                    for (dx, v) in row.iter().enumerate() {
                        *acc += (v - mean) * style_texture(s, dy, dx);
                    }
                }
            }
        }
    }
    let count = (bh * bw * 16).max(1) as f64;
    proj.map(|p| (p / count).abs() > amplitude / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled, augmented.
    Train,
    /// Stored order, unmodified images.
    Eval,
}

/// Images for one mini-batch, with their dataset indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<RgbImage>,
}

/// Same-size images of a batch stacked into one tensor.
#[derive(Clone, Debug)]
pub struct Bucket {
    /// Positions within the batch.
    pub positions: Vec<usize>,
    pub input: Tensor,
    pub hsv: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Pads every image to a multiple of 4 and groups equal sizes, in
    /// order of first appearance.
    pub fn buckets(&self, with_hsv: bool) -> Result<Vec<Bucket>> {
        let mut keys: Vec<(usize, usize)> = Vec::new();
        let mut groups: Vec<(Vec<usize>, Vec<Tensor>, Vec<Tensor>)> = Vec::new();
        for (pos, img) in self.images.iter().enumerate() {
            let (x, hsv) = prepare_image(img, with_hsv)?;
            let key = (x.shape().h, x.shape().w);
            let g = match keys.iter().position(|k| *k == key) {
                Some(g) => g,
                None => {
                    keys.push(key);
                    groups.push(Default::default());
                    groups.len() - 1
                }
            };
            groups[g].0.push(pos);
            groups[g].1.push(x);
            if let Some(h) = hsv {
                groups[g].2.push(h);
            }
        }
        groups
            .into_iter()
            .map(|(positions, xs, hs)| {
                Ok(Bucket {
                    positions,
                    input: Tensor::stack(&xs)?,
                    hsv: if with_hsv { Some(Tensor::stack(&hs)?) } else { None },
                })
            })
            .collect()
    }
}

/// Mini-batches over `indices`; the last batch may be short.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    next: usize,
    batch_size: usize,
    pipeline: &'a Pipeline,
    seed: u64,
    mode: BatchMode,
}

pub fn batch_iterator<'a>(
    dataset: &'a Dataset,
    indices: &[usize],
    batch_size: usize,
    pipeline: &'a Pipeline,
    seed: u64,
    mode: BatchMode,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(invalid(format!("index {} outside a dataset of {}", i, dataset.len())));
    }
    let mut order = indices.to_vec();
    if mode == BatchMode::Train {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        dataset,
        order,
        next: 0,
        batch_size,
        pipeline,
        seed,
        mode,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let indices = self.order[self.next..end].to_vec();
        self.next = end;
        let images = indices
            .iter()
            .map(|&i| {
                let img = &self.dataset.images[i];
                match self.mode {
                    BatchMode::Train if !self.pipeline.is_empty() => {
                        self.pipeline.apply(img, mix_seed(self.seed, 0x5EED_0000 + i as u64))
                    }
                    _ => img.clone(),
                }
            })
            .collect();
        Some(Batch { indices, images })
    }
}
