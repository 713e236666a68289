//! Tile ingestion, preprocessing, synthetic speckled scenes and fold splits.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::blocks::SPATIAL_MULTIPLE;
use crate::error::{Error, Result};
use crate::tensor::kernels::IGNORE_LABEL;
use crate::tensor::Tensor;

pub const TILE_MAGIC: &[u8; 8] = b"PSARTIL1";
pub const LABEL_MAGIC: &[u8; 8] = b"PSARLBL1";

/// Largest element count a tile or label file may declare.
pub const MAX_ELEMENTS: u64 = 1 << 30;

/// Per-pixel class ids; [`IGNORE_LABEL`] marks unscored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("label_map", "pixels", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Every value must be below `num_classes` or be the ignore label.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| v != IGNORE_LABEL && v as usize >= num_classes)
        {
            None => Ok(()),
            Some(i) => Err(Error::LabelOutOfRange {
                value: self.data[i],
                num_classes,
                n: 0,
                y: i / self.width,
                x: i % self.width,
            }),
        }
    }
}

/// Multi-channel intensity image, channel-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolSarTile {
    pub id: String,
    /// Ground sample distance in metres.
    pub gsd_m: f64,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub label: Option<LabelMap>,
}

impl PolSarTile {
    pub fn new(id: impl Into<String>, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Parse(format!("empty tile {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape("tile", "values", channels * height * width, data.len()));
        }
        Ok(Self {
            id: id.into(),
            gsd_m: 0.0,
            channels,
            height,
            width,
            data,
            label: None,
        })
    }

    pub fn with_label(mut self, label: LabelMap) -> Result<Self> {
        if (label.height, label.width) != (self.height, self.width) {
            return Err(Error::shape(
                "tile",
                "label extent",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", label.height, label.width),
            ));
        }
        self.label = Some(label);
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn magic(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        let head = &bytes[..bytes.len().min(8)];
        if head != magic {
            return Err(Error::BadMagic {
                offset: 0,
                expected: String::from_utf8_lossy(magic).into(),
                found: String::from_utf8_lossy(head).into(),
            });
        }
        Ok(Self { bytes, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// The remaining bytes, which must be exactly `n`.
    fn payload(&mut self, n: u64) -> Result<&'a [u8]> {
        let rest = (self.bytes.len() - self.pos) as u64;
        if rest != n {
            if rest < n {
                return Err(Error::Truncated {
                    expected: self.pos as u64 + n,
                    actual: self.bytes.len() as u64,
                });
            }
            return Err(Error::Parse(format!("{} trailing bytes after payload", rest - n)));
        }
        self.take(n as usize)
    }
}

fn checked_extent(dims: &[u64], bytes_per_value: u64) -> Result<u64> {
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= MAX_ELEMENTS)
        .ok_or_else(|| Error::ExtentOverflow(format!("extents {dims:?} exceed {MAX_ELEMENTS} elements")))?;
    if count == 0 {
        return Err(Error::Parse(format!("zero extent in {dims:?}")));
    }
    Ok(count * bytes_per_value)
}

pub fn encode_tile(tile: &PolSarTile) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 4 * tile.data.len());
    out.extend_from_slice(TILE_MAGIC);
    out.extend_from_slice(&(tile.channels as u16).to_le_bytes());
    out.extend_from_slice(&(tile.height as u32).to_le_bytes());
    out.extend_from_slice(&(tile.width as u32).to_le_bytes());
    for v in &tile.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tile(bytes: &[u8], id: impl Into<String>) -> Result<PolSarTile> {
    let mut r = Reader::magic(bytes, TILE_MAGIC)?;
    let (c, h, w) = (r.u16()? as u64, r.u32()? as u64, r.u32()? as u64);
    let payload = r.payload(checked_extent(&[c, h, w], 4)?)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    PolSarTile::new(id, c as usize, h as usize, w as usize, data)
}

pub fn encode_label(label: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + label.data.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(label.height as u32).to_le_bytes());
    out.extend_from_slice(&(label.width as u32).to_le_bytes());
    out.extend_from_slice(&label.data);
    out
}

pub fn decode_label(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::magic(bytes, LABEL_MAGIC)?;
    let (h, w) = (r.u32()? as u64, r.u32()? as u64);
    let payload = r.payload(checked_extent(&[h, w], 1)?)?;
    LabelMap::new(h as usize, w as usize, payload.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the image only; labels live in a separate file.
pub fn load_tile(path: &Path) -> Result<PolSarTile> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_tile(&read(path)?, id)
}

pub fn save_tile(tile: &PolSarTile, path: &Path) -> Result<()> {
    write(path, &encode_tile(tile))
}

pub fn load_label(path: &Path) -> Result<LabelMap> {
    decode_label(&read(path)?)
}

pub fn save_label(label: &LabelMap, path: &Path) -> Result<()> {
    write(path, &encode_label(label))
}

/// `DIR/tile_0007.psar`
pub fn tile_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("tile_{index:04}.psar"))
}

/// `DIR/tile_0007.lbl`
pub fn label_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("tile_{index:04}.lbl"))
}

/// Load tile `index` of a dataset directory together with its label.
pub fn load_pair(dir: &Path, index: usize) -> Result<PolSarTile> {
    let tile = load_tile(&tile_path(dir, index))?;
    tile.with_label(load_label(&label_path(dir, index))?)
}

pub fn save_pair(dir: &Path, index: usize, tile: &PolSarTile) -> Result<()> {
    save_tile(tile, &tile_path(dir, index))?;
    if let Some(label) = &tile.label {
        save_label(label, &label_path(dir, index))?;
    }
    Ok(())
}

/// Number of consecutive `tile_NNNN.psar` files starting at 0.
pub fn dataset_len(dir: &Path) -> usize {
    (0..).take_while(|&i| tile_path(dir, i).is_file()).count()
}

pub const DEFAULT_CLIP_QUANTILE: f64 = 0.99;

/// Per channel: clip at the nearest-rank `clip_quantile` value (sorted index
/// `floor(q·(n−1))`), then min-max scale into [0, 1]. Constant channels map
/// to zeros.
pub fn preprocess(tile: &PolSarTile, clip_quantile: f64) -> Tensor<f32> {
    let q = clip_quantile.clamp(0.0, 1.0);
    let n = tile.height * tile.width;
    let mut out = Vec::with_capacity(tile.data.len());
    let mut sorted = Vec::with_capacity(n);
    for c in 0..tile.channels {
        let plane = tile.plane(c);
        sorted.clear();
        sorted.extend_from_slice(plane);
        sorted.sort_by(f32::total_cmp);
        let clip = sorted[(q * (n - 1) as f64).floor() as usize] as f64;
        let lo = sorted[0] as f64;
        let range = clip - lo;
        out.extend(plane.iter().map(|&v| {
            if range > 0.0 {
                ((v as f64).min(clip) - lo) as f32 / range as f32
            } else {
                0.0
            }
        }));
    }
    Tensor::new(&[tile.channels, tile.height, tile.width], out).expect("extents come from the tile")
}

/// Mean backscatter of every (class, channel) pair. Fixed for the generator
/// so that class signatures agree across tiles.
pub fn class_signatures(num_classes: usize, channels: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5157_4e41_5455_5245);
    let (lo, hi) = (0.02f64.ln(), 1.0f64.ln());
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(num_classes);
    while out.len() < num_classes {
        let candidate: Vec<f64> = (0..channels).map(|_| rng.gen_range(lo..hi)).collect();
        // Keep signatures apart in log space; relax the margin if sampling stalls.
        let margin = 0.8 / (1.0 + out.len() as f64 / 8.0);
        let far = out.iter().all(|s| {
            let d2: f64 = s.iter().zip(&candidate).map(|(a, b)| ((*a as f64).ln() - b).powi(2)).sum();
            d2.sqrt() >= margin
        });
        if far {
            out.push(candidate.iter().map(|v| v.exp() as f32).collect());
        }
    }
    out
}

/// Synthetic scene: a blob map covering every class, per-class channel means
/// from [`class_signatures`], multiplied by `looks`-look gamma speckle.
pub fn synth_scene(seed: u64, height: usize, width: usize, num_classes: usize, looks: f64) -> Result<PolSarTile> {
    if !height.is_multiple_of(SPATIAL_MULTIPLE) || !width.is_multiple_of(SPATIAL_MULTIPLE) || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "scene extents {height}x{width} must be positive multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    if !(looks >= 1.0) {
        return Err(Error::Config(format!("looks {looks} must be at least 1")));
    }
    if num_classes == 0 || num_classes >= IGNORE_LABEL as usize {
        return Err(Error::Config(format!("num_classes {num_classes} out of range")));
    }
    let channels = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = blob_map(&mut rng, height, width, num_classes);
    let means = class_signatures(num_classes, channels);
    let speckle = Gamma::new(looks, 1.0 / looks).expect("looks is positive");
    let mut data = vec![0f32; channels * height * width];
    for c in 0..channels {
        for (i, &l) in labels.iter().enumerate() {
            let g: f64 = speckle.sample(&mut rng);
            data[c * height * width + i] = means[l as usize][c] * g as f32;
        }
    }
    let mut tile = PolSarTile::new(format!("synth-{seed}"), channels, height, width, data)?;
    tile.gsd_m = 8.0;
    tile.with_label(LabelMap::new(height, width, labels)?)
}

/// Weighted Voronoi map. The first `num_classes` sites carry one class each
/// and own their own pixel, so every class appears.
fn blob_map(rng: &mut ChaCha8Rng, height: usize, width: usize, num_classes: usize) -> Vec<u8> {
    let sites_wanted = num_classes.max(height * width / 2048);
    let mut sites: Vec<(f64, f64, f64, u8)> = Vec::with_capacity(sites_wanted);
    let mut taken = std::collections::HashSet::new();
    while sites.len() < sites_wanted.min(height * width) {
        let (y, x) = (rng.gen_range(0..height), rng.gen_range(0..width));
        if !taken.insert((y, x)) {
            continue;
        }
        let class = if sites.len() < num_classes {
            sites.len() as u8
        } else {
            rng.gen_range(0..num_classes) as u8
        };
        let weight = rng.gen_range(0.6..1.4);
        sites.push((y as f64, x as f64, weight, class));
    }
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut best = (f64::INFINITY, 0u8);
            for &(sy, sx, wt, class) in &sites {
                let d = ((y as f64 - sy).powi(2) + (x as f64 - sx).powi(2)).sqrt() / wt;
                if d < best.0 {
                    best = (d, class);
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// Train/validation proportions, written `train:val`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self { train: 9, val: 1 }
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.train, self.val)
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid ratio {s:?}, expected train:val"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let train = a.trim().parse().map_err(|_| bad())?;
        let val = b.trim().parse().map_err(|_| bad())?;
        if train == 0 || val == 0 {
            return Err(bad());
        }
        Ok(Self { train, val })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of fold `fold` under master seed `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    splitmix64(seed ^ splitmix64(fold as u64))
}

/// Validation ids of one fold: `ceil(n·val/(train+val))` items drawn by a
/// seeded shuffle.
pub fn fold_validation(num_items: usize, ratio: SplitRatio, seed: u64) -> Vec<usize> {
    let total = (ratio.train + ratio.val) as usize;
    let n_val = (num_items * ratio.val as usize).div_ceil(total);
    let mut ids: Vec<usize> = (0..num_items).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = ids[..n_val].to_vec();
    val.sort_unstable();
    val
}

/// Independent random train/validation resamples, one per fold.
pub fn kfold_split(num_items: usize, num_folds: usize, ratio: SplitRatio, seed: u64) -> Result<Vec<FoldSpec>> {
    if ratio.train == 0 || ratio.val == 0 {
        return Err(Error::Config(format!("invalid split ratio {ratio}")));
    }
    if num_folds == 0 || num_items < num_folds {
        return Err(Error::Config(format!(
            "need at least as many items ({num_items}) as folds ({num_folds}), and one fold"
        )));
    }
    let total = (ratio.train + ratio.val) as usize;
    if (num_items * ratio.val as usize).div_ceil(total) >= num_items {
        return Err(Error::Config(format!("{num_items} items leave no training data at ratio {ratio}")));
    }
    Ok((0..num_folds)
        .map(|fold| {
            let seed = fold_seed(seed, fold);
            let val = fold_validation(num_items, ratio, seed);
            FoldSpec {
                fold,
                seed,
                train: complement(num_items, &val),
                val,
            }
        })
        .collect())
}

fn complement(num_items: usize, val: &[usize]) -> Vec<usize> {
    let mut in_val = vec![false; num_items];
    for &v in val {
        in_val[v] = true;
    }
    (0..num_items).filter(|&i| !in_val[i]).collect()
}

/// Text manifest: a `# items=N` header, then `fold<TAB>seed<TAB>v1,v2,…` per fold.
pub fn write_manifest(folds: &[FoldSpec], num_items: usize) -> String {
    let mut s = format!("# items={num_items}\n");
    for f in folds {
        let ids: Vec<String> = f.val.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{}\t{}\t{}\n", f.fold, f.seed, ids.join(",")));
    }
    s
}

pub fn parse_manifest(doc: &str) -> Result<Vec<FoldSpec>> {
    let bad = |line: usize, why: &str| Error::Parse(format!("fold manifest line {}: {why}", line + 1));
    let mut lines = doc.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty manifest"))?;
    let num_items: usize = header
        .trim()
        .strip_prefix("# items=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(0, "expected '# items=N' header"))?;
    let mut folds = Vec::new();
    for (i, line) in lines {
        let mut fields = line.split('\t');
        let (Some(fold), Some(seed), Some(ids), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad(i, "expected three tab-separated fields"));
        };
        let fold = fold.trim().parse().map_err(|_| bad(i, "fold index"))?;
        let seed = seed.trim().parse().map_err(|_| bad(i, "seed"))?;
        let val: Vec<usize> = ids
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| bad(i, "validation id")))
            .collect::<Result<_>>()?;
        if let Some(&v) = val.iter().find(|&&v| v >= num_items) {
            return Err(bad(i, &format!("validation id {v} not below {num_items}")));
        }
        folds.push(FoldSpec {
            fold,
            seed,
            train: complement(num_items, &val),
            val,
        });
    }
    Ok(folds)
}
