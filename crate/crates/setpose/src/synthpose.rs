//! Deterministic synthetic multi-person pose data: stick figures with known
//! keypoints rendered into small grayscale images, streamed to a packed
//! single-file dataset.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::GroundTruthPose;

const MAGIC: &[u8; 4] = b"SPSE";
const VERSION: u16 = 1;

/// Peak intensity of a visible keypoint blob; the amplitude ramps with the
/// keypoint index so every keypoint type has a distinct local appearance
/// (as body parts do in real imagery), and occluded ones render dimmer.
const BLOB_AMP_VISIBLE: f32 = 1.0;
const BLOB_AMP_VISIBLE_MIN: f32 = 0.7;
const BLOB_AMP_OCCLUDED: f32 = 0.4;
const LIMB_AMP: f32 = 0.35;
const LIMB_AMP_OCCLUDED: f32 = 0.15;
/// Blob σ and limb half-width as fractions of the figure's pixel extent.
const BLOB_SIGMA_FRAC: f64 = 0.15;
const LIMB_WIDTH_FRAC: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_keypoints: usize,
    pub max_instances: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Keypoints must land inside [margin, 1−margin]².
    pub margin: f64,
    /// Per-keypoint probability of being flagged occluded.
    pub p_occluded: f64,
    /// Bias figure centers toward a shared crowd center.
    pub crowding: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 64,
            width: 64,
            n_keypoints: 5,
            max_instances: 8,
            scale_min: 0.12,
            scale_max: 0.22,
            margin: 0.05,
            p_occluded: 0.1,
            crowding: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("image extent must be at least 8".into()));
        }
        if self.n_keypoints == 0 {
            return Err(Error::Config("need at least one keypoint".into()));
        }
        if self.max_instances == 0 {
            return Err(Error::Config("max_instances must be ≥ 1".into()));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max < 0.5) {
            return Err(Error::Config("need 0 < scale_min ≤ scale_max < 0.5".into()));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Config("margin must be in [0, 0.5)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_occluded) {
            return Err(Error::Config("p_occluded must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Canonical unit-scale skeleton: K=5 gives head + two hands + two feet; any
/// other K gives a hub with K−1 evenly spaced spokes.
pub fn skeleton_template(k: usize) -> Vec<[f64; 2]> {
    if k == 5 {
        vec![[0.0, -1.0], [-0.95, -0.05], [0.95, -0.05], [-0.55, 1.0], [0.55, 1.0]]
    } else if k == 1 {
        vec![[0.0, 0.0]]
    } else {
        let mut t = vec![[0.0, 0.0]];
        for i in 1..k {
            let a = 2.0 * std::f64::consts::PI * (i - 1) as f64 / (k - 1) as f64;
            t.push([a.cos(), a.sin()]);
        }
        t
    }
}

/// Limb segments as keypoint index pairs.
pub fn skeleton_limbs(k: usize) -> Vec<(usize, usize)> {
    if k < 2 {
        Vec::new()
    } else {
        (1..k).map(|i| (0, i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FigureSpec {
    pub template: Vec<[f64; 2]>,
    pub center: [f64; 2],
    /// Fraction of image extent occupied by the unit template radius.
    pub scale: f64,
    pub rotation: f64,
    pub occluded: Vec<bool>,
}

impl FigureSpec {
    /// Transformed keypoints, normalized image coordinates (x, y).
    pub fn keypoints(&self) -> Vec<[f64; 2]> {
        let (s, c) = self.rotation.sin_cos();
        self.template
            .iter()
            .map(|&[tx, ty]| {
                [
                    self.center[0] + self.scale * (c * tx - s * ty),
                    self.center[1] + self.scale * (s * tx + c * ty),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub figures: Vec<FigureSpec>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RenderedSample {
    /// H×W grayscale, row-major, values in [0, 1].
    pub image: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub gts: Vec<GroundTruthPose<f32>>,
}

/// Draw a scene: figure count, then per figure up to 100 rejection retries
/// to keep every keypoint inside the margin box (and at least one keypoint
/// visible).
pub fn sample_scene(seed: u64, cfg: &DataConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=cfg.max_instances);
    let template = skeleton_template(cfg.n_keypoints);
    let crowd_center = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let mut figures = Vec::with_capacity(count);
    for fi in 0..count {
        let mut placed = None;
        for _ in 0..100 {
            let center = if cfg.crowding {
                [
                    (crowd_center[0] + rng.random_range(-0.18..0.18f64)).clamp(0.0, 1.0),
                    (crowd_center[1] + rng.random_range(-0.18..0.18f64)).clamp(0.0, 1.0),
                ]
            } else {
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
            };
            let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
            let rotation = rng.random_range(0.0..std::f64::consts::TAU);
            let occluded: Vec<bool> = (0..cfg.n_keypoints).map(|_| rng.random_bool(cfg.p_occluded)).collect();
            let fig = FigureSpec { template: template.clone(), center, scale, rotation, occluded };
            if fig.occluded.iter().all(|&o| o) {
                continue;
            }
            let lo = cfg.margin;
            let hi = 1.0 - cfg.margin;
            if fig.keypoints().iter().all(|p| p[0] >= lo && p[0] <= hi && p[1] >= lo && p[1] <= hi) {
                placed = Some(fig);
                break;
            }
        }
        match placed {
            Some(fig) => figures.push(fig),
            None => {
                return Err(Error::Data(format!(
                    "figure {fi}: no placement satisfied margin {} after 100 retries",
                    cfg.margin
                )))
            }
        }
    }
    Ok(Scene { figures, height: cfg.height, width: cfg.width, seed })
}

fn splat_gaussian(image: &mut [f32], h: usize, w: usize, cx: f64, cy: f64, sigma: f64, amp: f32) {
    let reach = (3.0 * sigma).ceil() as isize;
    let px = cx * w as f64 - 0.5;
    let py = cy * h as f64 - 0.5;
    let r0 = ((py.round() as isize) - reach).max(0) as usize;
    let r1 = ((py.round() as isize) + reach).min(h as isize - 1) as usize;
    let c0 = ((px.round() as isize) - reach).max(0) as usize;
    let c1 = ((px.round() as isize) + reach).min(w as isize - 1) as usize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dx = c as f64 - px;
            let dy = r as f64 - py;
            image[r * w + c] += amp * (-(dx * dx + dy * dy) * inv).exp() as f32;
        }
    }
}

fn splat_segment(image: &mut [f32], h: usize, w: usize, a: [f64; 2], b: [f64; 2], half_width: f64, amp: f32) {
    let ax = a[0] * w as f64 - 0.5;
    let ay = a[1] * h as f64 - 0.5;
    let bx = b[0] * w as f64 - 0.5;
    let by = b[1] * h as f64 - 0.5;
    let pad = half_width + 1.0;
    let r0 = ((ay.min(by) - pad).floor().max(0.0)) as usize;
    let r1 = ((ay.max(by) + pad).ceil().min(h as f64 - 1.0)) as usize;
    let c0 = ((ax.min(bx) - pad).floor().max(0.0)) as usize;
    let c1 = ((ax.max(bx) + pad).ceil().min(w as f64 - 1.0)) as usize;
    let vx = bx - ax;
    let vy = by - ay;
    let len2 = vx * vx + vy * vy;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let px = c as f64 - ax;
            let py = r as f64 - ay;
            let t = if len2 > 0.0 { ((px * vx + py * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let dx = px - t * vx;
            let dy = py - t * vy;
            let d = (dx * dx + dy * dy).sqrt();
            // linear falloff over one pixel past the half-width
            let cov = (half_width + 0.5 - d).clamp(0.0, 1.0);
            image[r * w + c] += amp * cov as f32;
        }
    }
}

/// Rasterize: anti-aliased limbs plus a Gaussian blob per keypoint (occluded
/// ones dimmer), additively composed and clamped to [0, 1].
pub fn render_sample(scene: &Scene) -> RenderedSample {
    let (h, w) = (scene.height, scene.width);
    let mut image = vec![0.0f32; h * w];
    let extent = h.min(w) as f64;
    let mut gts = Vec::with_capacity(scene.figures.len());
    for fig in &scene.figures {
        let kpts = fig.keypoints();
        let sigma = (BLOB_SIGMA_FRAC * fig.scale * extent).max(0.6);
        let half_width = (LIMB_WIDTH_FRAC * fig.scale * extent).max(0.5);
        for (i, j) in skeleton_limbs(fig.template.len()) {
            let amp = if fig.occluded[i] || fig.occluded[j] { LIMB_AMP_OCCLUDED } else { LIMB_AMP };
            splat_segment(&mut image, h, w, kpts[i], kpts[j], half_width, amp);
        }
        let ramp = (BLOB_AMP_VISIBLE - BLOB_AMP_VISIBLE_MIN) / (kpts.len().max(2) - 1) as f32;
        for (k, p) in kpts.iter().enumerate() {
            let amp = if fig.occluded[k] {
                BLOB_AMP_OCCLUDED
            } else if kpts.len() == 1 {
                BLOB_AMP_VISIBLE
            } else {
                BLOB_AMP_VISIBLE_MIN + ramp * k as f32
            };
            splat_gaussian(&mut image, h, w, p[0], p[1], sigma, amp);
        }
        let coords: Vec<f32> = kpts.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect();
        let vis: Vec<bool> = fig.occluded.iter().map(|&o| !o).collect();
        gts.push(
            GroundTruthPose::new(coords, vis, (fig.scale * fig.scale) as f32)
                .expect("scene invariants guarantee a valid pose"),
        );
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    RenderedSample { image, height: h, width: w, gts }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Scene for sample `index` of a dataset stream.
pub fn scene_for_index(seed: u64, index: usize, cfg: &DataConfig) -> Result<Scene> {
    sample_scene(mix_seed(seed, index as u64), cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DataConfig,
    pub seed: u64,
    pub count: usize,
    /// Byte offset of each sample, relative to the start of the data section.
    pub offsets: Vec<u64>,
}

fn encode_sample(sample: &RenderedSample, out: &mut Vec<u8>) {
    for &v in &sample.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(sample.gts.len() as u16).to_le_bytes());
    for gt in &sample.gts {
        for &c in &gt.keypoints {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for &v in &gt.visibility {
            out.push(v as u8);
        }
        out.extend_from_slice(&gt.area.to_le_bytes());
    }
}

/// Generate `count` samples and write the packed dataset file.
pub fn generate_dataset(cfg: &DataConfig, count: usize, seed: u64, path: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(count);
    for i in 0..count {
        offsets.push(data.len() as u64);
        let sample = render_sample(&scene_for_index(seed, i, cfg)?);
        encode_sample(&sample, &mut data);
    }
    let manifest = DatasetManifest { config: cfg.clone(), seed, count, offsets };
    let json = serde_json::to_vec(&manifest)?;

    let mut crc = crc32fast::Hasher::new();
    crc.update(&data);
    let checksum = crc.finalize();

    let io_err = |e: std::io::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    let mut header = Vec::with_capacity(10 + json.len());
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(json.len() as u32).to_le_bytes());
    header.extend_from_slice(&json);
    file.write_all(&header).map_err(io_err)?;
    file.write_all(&data).map_err(io_err)?;
    file.write_all(&checksum.to_le_bytes()).map_err(io_err)?;
    Ok(manifest)
}

/// A loaded dataset: manifest plus the raw (checksum-verified) data section.
/// Samples decode on access; the struct is read-only after open.
#[derive(Debug)]
pub struct Dataset {
    manifest: DatasetManifest,
    data: Vec<u8>,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    let fmt = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 10 {
        return Err(fmt("file too short for header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt(format!("bad magic {:?}, expected \"SPSE\"", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}, expected {VERSION}")));
    }
    let json_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + json_len + 4 {
        return Err(fmt("truncated manifest".into()));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&bytes[10..10 + json_len])
        .map_err(|e| fmt(format!("manifest JSON: {e}")))?;
    let data = &bytes[10 + json_len..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut crc = crc32fast::Hasher::new();
    crc.update(data);
    let computed = crc.finalize();
    if stored != computed {
        return Err(fmt(format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")));
    }
    if manifest.offsets.len() != manifest.count {
        return Err(fmt("offset table length disagrees with count".into()));
    }
    Ok(Dataset { manifest, data: data.to_vec() })
}

impl Dataset {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn get(&self, index: usize) -> Result<RenderedSample> {
        if index >= self.manifest.count {
            return Err(Error::Data(format!("sample {index} out of range ({} samples)", self.manifest.count)));
        }
        let cfg = &self.manifest.config;
        let (h, w, k) = (cfg.height, cfg.width, cfg.n_keypoints);
        let start = self.manifest.offsets[index] as usize;
        let end = if index + 1 < self.manifest.count {
            self.manifest.offsets[index + 1] as usize
        } else {
            self.data.len()
        };
        let buf = self
            .data
            .get(start..end)
            .ok_or_else(|| Error::Data(format!("sample {index}: offset out of bounds")))?;
        let mut pos = 0usize;
        let take = |buf: &[u8], pos: &mut usize, n: usize| -> Result<Vec<u8>> {
            let s = buf
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::Data(format!("sample {index}: truncated record")))?;
            *pos += n;
            Ok(s.to_vec())
        };
        let img_bytes = take(buf, &mut pos, h * w * 4)?;
        let image: Vec<f32> = img_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let nb = take(buf, &mut pos, 2)?;
        let n_inst = u16::from_le_bytes([nb[0], nb[1]]) as usize;
        let mut gts = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let kb = take(buf, &mut pos, k * 2 * 4)?;
            let coords: Vec<f32> = kb
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let vb = take(buf, &mut pos, k)?;
            let vis: Vec<bool> = vb.iter().map(|&b| b != 0).collect();
            let ab = take(buf, &mut pos, 4)?;
            let area = f32::from_le_bytes(ab.try_into().unwrap());
            gts.push(GroundTruthPose::new(coords, vis, area)?);
        }
        if pos != buf.len() {
            return Err(Error::Data(format!("sample {index}: {} trailing bytes", buf.len() - pos)));
        }
        Ok(RenderedSample { image, height: h, width: w, gts })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<RenderedSample>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}
