//! Dataset ingestion, deterministic splitting, network tensor conversion,
//! procedural hazy/clear pair generation and batch ordering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use haze_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze_model::{synthesize_haze, DepthMap, HazeParams};
use crate::image::{decode_image, save_image, Image, Plane};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_PARAMS_FILE: &str = "scenes.json";
pub const DEFAULT_NET_SIZE: usize = 256;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub id: String,
    pub hazy: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clear: Option<PathBuf>,
}

/// Ordered (by id) list of hazy images and their optional references.
/// Paths are absolute or relative to the process working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_name: String,
    pub has_references: bool,
    pub pairs: Vec<ImagePair>,
}

impl DatasetManifest {
    pub fn new(source_name: impl Into<String>, mut pairs: Vec<ImagePair>) -> Result<Self> {
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = pairs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::DatasetContract(format!("duplicate id {:?}", w[0].id)));
        }
        let has_references = !pairs.is_empty() && pairs.iter().all(|p| p.clear.is_some());
        Ok(Self {
            source_name: source_name.into(),
            has_references,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&ImagePair> {
        self.pairs
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.pairs[i])
    }

    /// Writes JSON with paths relative to the file's directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| relative_to(p, base);
        let stored = DatasetManifest {
            source_name: self.source_name.clone(),
            has_references: self.has_references,
            pairs: self
                .pairs
                .iter()
                .map(|p| ImagePair {
                    id: p.id.clone(),
                    hazy: rel(&p.hazy),
                    clear: p.clear.as_deref().map(rel),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&stored)?;
        write_atomic(path, text.as_bytes())
    }

    /// Reads a manifest written by [`DatasetManifest::save`]; relative paths
    /// resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in &mut m.pairs {
            p.hazy = base.join(&p.hazy);
            p.clear = p.clear.as_ref().map(|c| base.join(c));
        }
        let name = m.source_name.clone();
        let has_refs = m.has_references;
        let mut out = Self::new(name, m.pairs)?;
        if has_refs && !out.has_references {
            return Err(Error::DatasetContract(format!("{} claims references but some pairs lack one", path.display())));
        }
        out.has_references = has_refs && out.has_references;
        Ok(out)
    }

    fn subset(&self, ids: &[usize]) -> Self {
        let mut pairs: Vec<ImagePair> = ids.iter().map(|&i| self.pairs[i].clone()).collect();
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            source_name: self.source_name.clone(),
            has_references: self.has_references,
            pairs,
        }
    }
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    if base.as_os_str().is_empty() {
        return path.to_path_buf();
    }
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// How hazy and clear files are paired on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// `<root>/<hazy>/<stem>.ext` with `<root>/<clear>/<stem>.ext`.
    Subdirs { hazy: String, clear: String },
    /// `<root>/<stem><hazy>.ext` with `<root>/<stem><clear>.ext`.
    Suffix { hazy: String, clear: String },
}

impl Default for Layout {
    fn default() -> Self {
        Layout::Subdirs {
            hazy: "hazy".into(),
            clear: "clear".into(),
        }
    }
}

impl Layout {
    pub fn suffix() -> Self {
        Layout::Suffix {
            hazy: "_hazy".into(),
            clear: "_gt".into(),
        }
    }
}

/// A loaded manifest plus one line per skipped or rejected file.
#[derive(Debug)]
pub struct LoadReport {
    pub manifest: DatasetManifest,
    pub diagnostics: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// `stem -> path` for image files in `dir` whose stem ends in `suffix`.
fn scan(dir: &Path, suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(id) = stem.strip_suffix(suffix) {
            if !id.is_empty() {
                out.insert(id.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn load_manifest(root: &Path, layout: &Layout) -> Result<LoadReport> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let (hazy, clear) = match layout {
        Layout::Subdirs { hazy, clear } => (scan(&root.join(hazy), "")?, scan(&root.join(clear), "")?),
        Layout::Suffix { hazy, clear } => (scan(root, hazy)?, scan(root, clear)?),
    };
    let has_references = !clear.is_empty();
    let mut diagnostics = Vec::new();
    let mut pairs = Vec::new();
    for (id, hazy_path) in hazy {
        let hazy_dims = match image::image_dimensions(&hazy_path) {
            Ok(d) => d,
            Err(e) => {
                diagnostics.push(format!("{}: skipped, cannot decode ({e})", hazy_path.display()));
                continue;
            }
        };
        let clear_path = match clear.get(&id) {
            Some(c) => c.clone(),
            None if has_references => {
                diagnostics.push(format!("{}: skipped, no matching clear image", hazy_path.display()));
                continue;
            }
            None => {
                pairs.push(ImagePair { id, hazy: hazy_path, clear: None });
                continue;
            }
        };
        match image::image_dimensions(&clear_path) {
            Ok(d) if d == hazy_dims => pairs.push(ImagePair {
                id,
                hazy: hazy_path,
                clear: Some(clear_path),
            }),
            Ok(d) => diagnostics.push(format!(
                "{id}: rejected, hazy is {}x{} but clear is {}x{}",
                hazy_dims.0, hazy_dims.1, d.0, d.1
            )),
            Err(e) => diagnostics.push(format!("{}: skipped, cannot decode ({e})", clear_path.display())),
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    for d in &diagnostics {
        log::warn!("{d}");
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string());
    let mut manifest = DatasetManifest::new(name, pairs)?;
    manifest.has_references = has_references;
    Ok(LoadReport { manifest, diagnostics })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub seed: u64,
    pub ratio: f64,
}

pub fn test_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Seeded shuffle of the id-sorted pairs; the first `round(ratio * N)` go to
/// the test side. Both sides come back sorted by id.
pub fn split(manifest: &DatasetManifest, test_ratio: f64, seed: u64) -> Result<SplitResult> {
    if !(test_ratio > 0.0 && test_ratio < 1.0) {
        return Err(Error::invalid(format!("test ratio must lie in (0, 1), got {test_ratio}")));
    }
    if manifest.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = test_count(manifest.len(), test_ratio);
    Ok(SplitResult {
        test: manifest.subset(&order[..n_test]),
        train: manifest.subset(&order[n_test..]),
        seed,
        ratio: test_ratio,
    })
}

/// Network-side image: 3×S×S values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetTensor {
    pub values: Tensor,
    pub id: String,
}

/// Bilinear resize to `size × size`, then `x ↦ 2x − 1`, as a 3×S×S tensor.
pub fn to_net_tensor(image: &Image, size: usize, id: impl Into<String>) -> NetTensor {
    let resized = image.resize_bilinear(size, size);
    let plane = size * size;
    let mut values = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            values[c * plane + i] = (2.0 * px[c].clamp(0.0, 1.0) - 1.0).clamp(-1.0, 1.0);
        }
    }
    NetTensor {
        values: Tensor::from_vec(&[3, size, size], values).expect("length matches shape"),
        id: id.into(),
    }
}

pub fn load_net_tensor(path: &Path, size: usize) -> Result<NetTensor> {
    let decoded = decode_image(path)?;
    if let Some(note) = &decoded.conversion {
        log::warn!("{note}");
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(to_net_tensor(&decoded.image, size, id))
}

/// Inverse affine map of a 3×H×W tensor back to a `[0, 1]` image.
pub fn from_net_tensor(values: &Tensor) -> Result<Image> {
    let s = values.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("[3, H, W]", s));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = values.data();
    Image::new(
        w,
        h,
        (0..plane)
            .flat_map(|i| (0..3).map(move |c| ((d[c * plane + i] + 1.0) * 0.5).clamp(0.0, 1.0)))
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub k_range: (f32, f32),
    pub airlight_range: (f32, f32),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            seed: 7,
            k_range: (0.5, 2.5),
            airlight_range: (0.75, 1.0),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("synthetic dataset needs at least one image"));
        }
        if self.size < 8 {
            return Err(Error::invalid(format!("synthetic image size must be >= 8, got {}", self.size)));
        }
        let (k0, k1) = self.k_range;
        if !(k0.is_finite() && k1.is_finite() && 0.0 <= k0 && k0 <= k1) {
            return Err(Error::invalid(format!("k range must satisfy 0 <= min <= max, got {:?}", self.k_range)));
        }
        let (a0, a1) = self.airlight_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::invalid(format!(
                "airlight range must satisfy 0 <= min <= max <= 1, got {:?}",
                self.airlight_range
            )));
        }
        Ok(())
    }
}

/// Per-image haze parameters written alongside a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub params: HazeParams,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn saturated_color(rng: &mut impl Rng) -> [f32; 3] {
    hsv(rng.gen(), rng.gen_range(0.55..1.0), rng.gen_range(0.2..1.0))
}

/// Smooth field: random `grid × grid` values upsampled bilinearly.
fn smooth_field(rng: &mut impl Rng, size: usize, grid: usize, range: (f32, f32)) -> Plane {
    let coarse = Image::from_fn(grid, grid, |_, _| [rng.gen_range(range.0..=range.1); 3]);
    let fine = coarse.resize_bilinear(size, size);
    Plane::from_fn(size, size, |x, y| fine.pixel(x, y)[0])
}

/// Renders a random clear scene and its depth: a smooth colour backdrop
/// receding with height, plus nearer flat-coloured rectangles and discs
/// with stripe texture and a little per-pixel grain.
pub fn render_scene(rng: &mut impl Rng, size: usize) -> (Image, DepthMap) {
    let corners = Image::from_fn(3, 3, |_, _| saturated_color(rng));
    let mut clear = corners.resize_bilinear(size, size);

    let tilt: f32 = rng.gen_range(-0.3..0.3);
    let bumps = smooth_field(rng, size, 4, (-0.15, 0.15));
    let s = size as f32;
    let mut depth: Vec<f32> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32 / s, (i / size) as f32 / s);
            // Top of the frame is far away.
            let far = 1.0 - y + tilt * (x - 0.5);
            (0.15 + 0.85 * far + bumps.data()[i]).clamp(0.1, 1.0)
        })
        .collect();

    let shapes = rng.gen_range(4..10);
    for _ in 0..shapes {
        let color = saturated_color(rng);
        let stripe: f32 = rng.gen_range(0.0..0.25);
        let period = rng.gen_range(4.0..10.0f32);
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.2 * s..s));
        let (rx, ry) = (rng.gen_range(0.06 * s..0.25 * s), rng.gen_range(0.06 * s..0.25 * s));
        let disc = rng.gen_bool(0.5);
        let nearer = rng.gen_range(0.4..0.9f32);
        let object_depth = {
            let (xi, yi) = ((cx as usize).min(size - 1), (cy as usize).min(size - 1));
            depth[yi * size + xi] * nearer
        };
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if !inside {
                    continue;
                }
                let phase = (x as f32 * angle.cos() + y as f32 * angle.sin()) / period;
                let shade = 1.0 - stripe * (0.5 + 0.5 * (phase * std::f32::consts::TAU).sin());
                clear.set_pixel(x, y, color.map(|c| c * shade));
                depth[y * size + x] = object_depth.max(0.05);
            }
        }
    }
    let depth = DepthMap::new(Plane::new(size, size, depth).expect("square plane")).expect("depth is positive");
    (clear, depth)
}

fn sample_params(rng: &mut impl Rng, cfg: &SyntheticConfig) -> HazeParams {
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    // Reseed a child stream so range changes do not shift scene rendering.
    let mut child = ChaCha8Rng::seed_from_u64(rng.gen());
    let k = uniform(&mut child, cfg.k_range);
    let grey = uniform(&mut child, cfg.airlight_range);
    let tint: [f32; 3] = std::array::from_fn(|_| child.gen_range(-0.04..=0.04f32));
    let airlight = tint.map(|t| (grey + t).clamp(cfg.airlight_range.0, cfg.airlight_range.1));
    HazeParams { k, airlight }
}

/// Procedurally renders `count` clear scenes with depth, hazes them and
/// writes `clear/`, `hazy/`, `manifest.json` and `scenes.json` under `out`.
/// The output is a pure function of the config.
pub fn generate_synthetic_dataset(out: &Path, cfg: &SyntheticConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (hazy_dir, clear_dir) = (out.join("hazy"), out.join("clear"));
    for d in [&hazy_dir, &clear_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let digits = cfg.count.to_string().len().max(4);
    let mut pairs = Vec::with_capacity(cfg.count);
    let mut scenes = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let id = format!("syn{i:0digits$}");
        let (clear, depth) = render_scene(&mut rng, cfg.size);
        let params = sample_params(&mut rng, cfg);
        let hazy = synthesize_haze(&clear, &depth, &params)?;
        let (hp, cp) = (hazy_dir.join(format!("{id}.png")), clear_dir.join(format!("{id}.png")));
        save_image(&hp, &hazy)?;
        save_image(&cp, &clear)?;
        pairs.push(ImagePair {
            id: id.clone(),
            hazy: hp,
            clear: Some(cp),
        });
        scenes.push(SceneRecord { id, params });
    }
    let manifest = DatasetManifest::new("synthetic", pairs)?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    write_atomic(&out.join(SCENE_PARAMS_FILE), serde_json::to_string_pretty(&scenes)?.as_bytes())?;
    Ok(manifest)
}

/// Hazy and clear network tensors for one pair.
#[derive(Clone, Debug)]
pub struct PairTensors {
    pub id: String,
    pub hazy: Tensor,
    pub clear: Tensor,
}

/// Stacked hazy/clear tensors, each `[N, 3, S, S]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub hazy: Tensor,
    pub clear: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn from_pairs(items: &[&PairTensors]) -> Result<Self> {
        let stack = |f: fn(&PairTensors) -> &Tensor| {
            Tensor::stack(&items.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
                .map_err(|e| Error::shape("equal pair tensors", e.to_string()))
        };
        Ok(Self {
            ids: items.iter().map(|p| p.id.clone()).collect(),
            hazy: stack(|p| &p.hazy)?,
            clear: stack(|p| &p.clear)?,
        })
    }
}

/// Pair tensors for a referenced manifest. Decoded tensors are kept in
/// memory when they fit `cache_budget_bytes`; otherwise each access decodes
/// from disk.
pub struct PairSource {
    manifest: DatasetManifest,
    size: usize,
    cache: Option<Vec<PairTensors>>,
}

impl PairSource {
    pub fn open(manifest: &DatasetManifest, size: usize, cache_budget_bytes: usize) -> Result<Self> {
        if !manifest.has_references {
            return Err(Error::DatasetContract(format!(
                "{} has no clear references; paired training needs them",
                manifest.source_name
            )));
        }
        if manifest.is_empty() {
            return Err(Error::DatasetContract(format!("{} is empty", manifest.source_name)));
        }
        let bytes = manifest.len() * 2 * 3 * size * size * std::mem::size_of::<f32>();
        let mut source = Self {
            manifest: manifest.clone(),
            size,
            cache: None,
        };
        if bytes <= cache_budget_bytes {
            let all = (0..manifest.len()).map(|i| source.load(i)).collect::<Result<Vec<_>>>()?;
            source.cache = Some(all);
        }
        Ok(source)
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, i: usize) -> Result<PairTensors> {
        let pair = &self.manifest.pairs[i];
        let clear_path = pair.clear.as_ref().expect("manifest has references");
        Ok(PairTensors {
            id: pair.id.clone(),
            hazy: load_net_tensor(&pair.hazy, self.size)?.values,
            clear: load_net_tensor(clear_path, self.size)?.values,
        })
    }

    pub fn get(&self, i: usize) -> Result<PairTensors> {
        match &self.cache {
            Some(all) => Ok(all[i].clone()),
            None => self.load(i),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let items = indices.iter().map(|&i| self.get(i)).collect::<Result<Vec<_>>>()?;
        Batch::from_pairs(&items.iter().collect::<Vec<_>>())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Permutation of `0..n` for one pass of a batch stream; a pure function of
/// `(seed, stream, epoch)`.
pub fn epoch_order(n: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let key = splitmix(splitmix(seed ^ splitmix(stream)) ^ epoch);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    order
}

/// Position in a stream of shuffled passes over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCursor {
    pub epoch: u64,
    pub offset: usize,
}

/// Deterministic batch stream. In per-epoch mode the last batch of a pass
/// may be short and passes never mix; in continuous mode batches are always
/// full and wrap into the next pass.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    stream: u64,
    continuous: bool,
    pub cursor: StreamCursor,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64, stream: u64, continuous: bool, cursor: StreamCursor) -> Self {
        assert!(n > 0 && batch_size > 0);
        Self {
            n,
            batch_size,
            seed,
            stream,
            continuous,
            cursor,
            order: epoch_order(n, seed, stream, cursor.epoch),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    fn advance_epoch(&mut self) {
        self.cursor.epoch += 1;
        self.cursor.offset = 0;
        self.order = epoch_order(self.n, self.seed, self.stream, self.cursor.epoch);
    }

    /// Indices of the next batch and the epoch it belongs to.
    pub fn next_batch(&mut self) -> (u64, Vec<usize>) {
        if self.cursor.offset >= self.n {
            self.advance_epoch();
        }
        let epoch = self.cursor.epoch;
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor.offset >= self.n {
                if !self.continuous {
                    break;
                }
                self.advance_epoch();
            }
            out.push(self.order[self.cursor.offset]);
            self.cursor.offset += 1;
        }
        (epoch, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_of(n: usize) -> DatasetManifest {
        let pairs = (0..n)
            .map(|i| ImagePair {
                id: format!("img{i:05}"),
                hazy: PathBuf::from(format!("h/{i}.png")),
                clear: Some(PathBuf::from(format!("c/{i}.png"))),
            })
            .collect();
        DatasetManifest::new("fixture", pairs).unwrap()
    }

    #[test]
    fn split_sizes_follow_rounding() {
        assert_eq!(split(&manifest_of(1449), 0.2, 1).unwrap().test.len(), 290);
        assert_eq!(split(&manifest_of(45), 0.2, 1).unwrap().test.len(), 9);
        assert_eq!(split(&manifest_of(200), 0.2, 1).unwrap().test.len(), 40);
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let m = manifest_of(50);
        assert_eq!(split(&m, 0.3, 9).unwrap(), split(&m, 0.3, 9).unwrap());
        assert_ne!(split(&m, 0.3, 9).unwrap().test, split(&m, 0.3, 10).unwrap().test);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let m = manifest_of(5);
        for r in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(split(&m, r, 0).is_err(), "{r}");
        }
    }

    #[test]
    fn net_tensor_extremes() {
        let black = to_net_tensor(&Image::filled(10, 7, [0.0; 3]), 16, "b");
        assert_eq!(black.values.shape(), &[3, 16, 16]);
        assert!(black.values.data().iter().all(|&v| v == -1.0));
        let white = to_net_tensor(&Image::filled(10, 7, [1.0; 3]), 16, "w");
        assert!(white.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn net_tensor_roundtrip_same_size() {
        let img = Image::from_fn(32, 32, |x, y| [x as f32 / 31.0, y as f32 / 31.0, ((x * y) % 7) as f32 / 6.0]).quantized();
        let back = from_net_tensor(&to_net_tensor(&img, 32, "x").values).unwrap();
        let max = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(max <= 1.0 / 255.0, "{max}");
    }

    #[test]
    fn from_net_tensor_clamps() {
        let t = Tensor::from_vec(&[3, 1, 2], vec![-3.0, 3.0, 0.0, 0.5, -1.0, 1.0]).unwrap();
        let img = from_net_tensor(&t).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.5, 0.0]);
        assert_eq!(img.pixel(1, 0), [1.0, 0.75, 1.0]);
        assert!(from_net_tensor(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn per_epoch_stream_covers_each_item_once() {
        let mut s = BatchStream::new(10, 4, 3, 0, false, StreamCursor::default());
        let mut seen = Vec::new();
        for _ in 0..3 {
            let (epoch, b) = s.next_batch();
            assert_eq!(epoch, 0);
            seen.extend(b);
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch().0, 1);
    }

    #[test]
    fn continuous_stream_wraps_with_full_batches() {
        let mut s = BatchStream::new(10, 4, 3, 1, true, StreamCursor::default());
        for _ in 0..10 {
            assert_eq!(s.next_batch().1.len(), 4);
        }
        assert_eq!(s.cursor.epoch, 3);
    }

    #[test]
    fn stream_resumes_from_cursor() {
        let mut a = BatchStream::new(7, 3, 5, 0, false, StreamCursor::default());
        for _ in 0..4 {
            a.next_batch();
        }
        let mut b = BatchStream::new(7, 3, 5, 0, false, a.cursor);
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv(0.5, 0.0, 0.4), [0.4, 0.4, 0.4]);
    }
}
