//! Synthetic 5-class texture phantoms, partial-annotation synthesis,
//! majority-vote merging, intensity normalization, and the on-disk layout.
//!
//! Each case is a small volume with an elliptical two-lobe lung mask. The
//! lung is filled with normal-tissue speckle; one to three ellipsoidal
//! lesions carry the other class textures. Intensities live in an HU-like
//! range and are windowed to [0,1] before entering the network. Everything
//! is a pure function of the configured seed.

use crate::error::{Error, Result};
use crate::loss::{ClassId, PixelLabel, NUM_CLASSES};
use crate::tensor::{ByteMap, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Truth-map byte for pixels outside the lung.
pub const OUTSIDE_LUNG: u8 = 255;

/// Per-class intensity recipe in HU-like units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureParams {
    /// Normal tissue speckle mean.
    pub nor_mean: f64,
    /// Consolidation: bright, nearly homogeneous.
    pub con_mean: f64,
    /// Ground-glass opacity: mid intensity, spatially smoothed noise.
    pub ggo_mean: f64,
    /// Honeycombing wall intensity (the ring lattice).
    pub hcm_wall: f64,
    /// Honeycombing interior intensity.
    pub hcm_interior: f64,
    /// Emphysema hole intensity, punched into the emphysema background.
    pub emp_hole: f64,
    /// Emphysema background between holes: darker and smoother than
    /// normal tissue, so the two classes never share an appearance.
    pub emp_base: f64,
    /// Standard deviation of the global speckle field.
    pub noise_sd: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            nor_mean: -850.0,
            con_mean: -50.0,
            ggo_mean: -430.0,
            hcm_wall: -200.0,
            hcm_interior: -950.0,
            emp_hole: -990.0,
            emp_base: -905.0,
            noise_sd: 45.0,
        }
    }
}

fn default_weights() -> [f64; NUM_CLASSES] {
    [150.0, 114.0, 129.0, 163.0, 55.0]
}

fn default_slices_min() -> usize {
    8
}

fn default_slices_max() -> usize {
    12
}

/// Phantom generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_cases: usize,
    pub image_size: usize,
    pub context_slices: usize,
    /// Slices per case are drawn uniformly from this inclusive range.
    #[serde(default = "default_slices_min")]
    pub slices_min: usize,
    #[serde(default = "default_slices_max")]
    pub slices_max: usize,
    /// Relative frequency with which each class is chosen for annotation.
    #[serde(default = "default_weights")]
    pub class_slice_weights: [f64; NUM_CLASSES],
    #[serde(default)]
    pub texture: TextureParams,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    /// The default dataset: 250 cases are enough for 5-fold plans to track
    /// the global class mix closely even for the rarest class.
    fn default() -> Self {
        GeneratorConfig {
            num_cases: 250,
            image_size: 32,
            context_slices: 3,
            slices_min: default_slices_min(),
            slices_max: default_slices_max(),
            class_slice_weights: default_weights(),
            texture: TextureParams::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size {} is below the minimum of 32",
                self.image_size
            )));
        }
        if self.context_slices == 0 {
            return Err(Error::Config("context_slices must be at least 1".into()));
        }
        if self.slices_min == 0 || self.slices_min > self.slices_max {
            return Err(Error::Config(format!(
                "slice range {}..={} is invalid",
                self.slices_min, self.slices_max
            )));
        }
        if self.class_slice_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("class_slice_weights must be non-negative".into()));
        }
        if self.class_slice_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("class_slice_weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// One phantom case: a volume, its lung mask, the generator's dense ground
/// truth, and which slices are annotated with which chosen class.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: String,
    /// (S,H,W) HU-like intensities.
    pub volume: Tensor,
    /// (S,H,W), 1 inside the lung.
    pub lung_mask: ByteMap,
    /// (S,H,W) class indices inside the lung, [`OUTSIDE_LUNG`] elsewhere.
    pub full_truth: ByteMap,
    /// Up to three (slice index, chosen class) pairs.
    pub annotated_slices: Vec<(usize, ClassId)>,
}

impl Case {
    pub fn num_slices(&self) -> usize {
        self.volume.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.volume.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.volume.shape()[2]
    }
}

/// Per-pixel labels of one annotated slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAnnotation {
    pub slice_index: usize,
    pub chosen_class: ClassId,
    /// Raster (H,W) labels: Strong/Weak inside the lung, Ignore outside.
    pub labels: Vec<PixelLabel>,
    /// Raster (H,W) lung mask, 1 inside.
    pub lung: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

fn case_rng(seed: u64, case_seed: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"phantom-case");
    hasher.update(seed.to_le_bytes());
    hasher.update(case_seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Draws a class index from the (internally normalized) slice weights.
fn draw_class(rng: &mut ChaCha8Rng, weights: &[f64; NUM_CLASSES]) -> ClassId {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return ClassId::from_index(i).expect("class index in range");
        }
        u -= w;
    }
    // numerically possible only when u lands exactly on the upper edge
    let last = weights.iter().rposition(|&w| w > 0.0).expect("positive weight");
    ClassId::from_index(last).expect("class index in range")
}

/// Synthesizes one case. Bitwise deterministic in `(cfg.seed, case_seed)`.
pub fn synth_case(cfg: &GeneratorConfig, case_seed: u64) -> Result<Case> {
    cfg.validate()?;
    let mut rng = case_rng(cfg.seed, case_seed);
    let n = cfg.image_size;
    let slices = cfg.slices_min + rng.random_range(0..=(cfg.slices_max - cfg.slices_min));

    // elliptical two-lobe lung mask, slightly breathing across slices
    let mut lung = vec![0u8; slices * n * n];
    let cy = 0.52 * n as f64;
    let ry = 0.36 * n as f64;
    let rx = 0.17 * n as f64;
    let lobe_cx = [0.30 * n as f64, 0.70 * n as f64];
    let slice_scale: Vec<f64> = (0..slices).map(|_| 0.88 + 0.12 * rng.random::<f64>()).collect();
    for z in 0..slices {
        let s = slice_scale[z];
        for y in 0..n {
            for x in 0..n {
                let inside = lobe_cx.iter().any(|&cx| {
                    let dy = (y as f64 - cy) / (ry * s);
                    let dx = (x as f64 - cx) / (rx * s);
                    dy * dy + dx * dx <= 1.0
                });
                if inside {
                    lung[(z * n + y) * n + x] = 1;
                }
            }
        }
    }

    // background truth: normal tissue everywhere inside the lung
    let mut truth = vec![OUTSIDE_LUNG; slices * n * n];
    for (t, &m) in truth.iter_mut().zip(&lung) {
        if m == 1 {
            *t = ClassId::Nor.index() as u8;
        }
    }

    // 1-3 annotations on distinct slices; non-NOR picks paint one
    // bilateral lesion region, an ellipsoid in each lung lobe
    let annotation_count = rng.random_range(1..=3.min(slices));
    let mut free_slices: Vec<usize> = (0..slices).collect();
    let mut annotated = Vec::with_capacity(annotation_count);
    for _ in 0..annotation_count {
        let slot = rng.random_range(0..free_slices.len());
        let zc = free_slices.remove(slot);
        let class = draw_class(&mut rng, &cfg.class_slice_weights);
        annotated.push((zc, class));

        if class != ClassId::Nor {
            for &lobe in &lobe_cx {
                let mut yc = cy;
                let mut xc = lobe;
                for _ in 0..24 {
                    let cand_y = cy + (rng.random::<f64>() - 0.5) * 1.2 * ry;
                    let cand_x = lobe + (rng.random::<f64>() - 0.5) * 1.2 * rx;
                    let (yi, xi) = (cand_y as usize, cand_x as usize);
                    if yi < n && xi < n && lung[(zc * n + yi) * n + xi] == 1 {
                        yc = cand_y;
                        xc = cand_x;
                        break;
                    }
                }
                let rz = rng.random_range(1..=2) as f64;
                let lry = (0.20 + 0.08 * rng.random::<f64>()) * n as f64;
                let lrx = (0.20 + 0.08 * rng.random::<f64>()) * n as f64;
                for z in 0..slices {
                    let dz = (z as f64 - zc as f64) / rz;
                    if dz * dz > 1.0 {
                        continue;
                    }
                    for y in 0..n {
                        for x in 0..n {
                            let i = (z * n + y) * n + x;
                            if lung[i] == 0 {
                                continue;
                            }
                            let dy = (y as f64 - yc) / lry;
                            let dx = (x as f64 - xc) / lrx;
                            if dz * dz + dy * dy + dx * dx <= 1.0 {
                                truth[i] = class.index() as u8;
                            }
                        }
                    }
                }
            }
        }
    }
    annotated.sort_by_key(|&(z, _)| z);

    // one global speckle field, drawn in raster order
    let normal = Normal::new(0.0, cfg.texture.noise_sd).expect("positive noise sd");
    let noise: Vec<f64> = (0..slices * n * n).map(|_| normal.sample(&mut rng)).collect();

    // per-slice 3x3 box blur of the speckle, for the smoothed GGO texture
    let mut blurred = vec![0.0f64; noise.len()];
    for z in 0..slices {
        for y in 0..n {
            for x in 0..n {
                let mut sum = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, n as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, n as i64 - 1) as usize;
                        sum += noise[(z * n + yy) * n + xx];
                    }
                }
                blurred[(z * n + y) * n + x] = sum / 9.0;
            }
        }
    }

    // per-case texture phases so lattices differ between cases
    let hcm_phase = (rng.random_range(0..6usize), rng.random_range(0..6usize));
    let emp_phase = rng.random_range(0..97usize);

    let tex = &cfg.texture;
    let mut volume = vec![0.0f64; slices * n * n];
    for z in 0..slices {
        for y in 0..n {
            for x in 0..n {
                let i = (z * n + y) * n + x;
                let v = if lung[i] == 0 {
                    -1000.0 + 0.5 * noise[i].abs()
                } else {
                    match ClassId::from_index(truth[i] as usize).expect("lung pixel class") {
                        ClassId::Nor => tex.nor_mean + noise[i],
                        ClassId::Con => tex.con_mean + 0.4 * noise[i],
                        ClassId::Ggo => tex.ggo_mean + 2.2 * blurred[i],
                        ClassId::Hcm => {
                            let wall = (y + hcm_phase.0) % 6 < 2 || (x + hcm_phase.1) % 6 < 2;
                            let base = if wall { tex.hcm_wall } else { tex.hcm_interior };
                            base + 0.4 * noise[i]
                        }
                        ClassId::Emp => {
                            let h = (y * 31 + x * 17 + z * 7 + emp_phase) % 13;
                            if h < 6 {
                                tex.emp_hole + 0.4 * noise[i]
                            } else {
                                tex.emp_base + 0.6 * noise[i]
                            }
                        }
                    }
                };
                volume[i] = v.clamp(-1000.0, 100.0);
            }
        }
    }

    // partial-volume smoothing: one in-plane binomial pass gives lesion
    // rims ambiguous intermediate intensities, as scanners do
    let raw = volume.clone();
    for z in 0..slices {
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy < 0 || xx < 0 || yy >= n as i64 || xx >= n as i64 {
                            continue;
                        }
                        let w = ((2 - dy.abs()) * (2 - dx.abs())) as f64;
                        acc += w * raw[(z * n + yy as usize) * n + xx as usize];
                        weight += w;
                    }
                }
                volume[(z * n + y) * n + x] = acc / weight;
            }
        }
    }

    Ok(Case {
        case_id: format!("case{case_seed:04}"),
        volume: Tensor::new(vec![slices, n, n], volume)?,
        lung_mask: ByteMap::new(vec![slices, n, n], lung)?,
        full_truth: ByteMap::new(vec![slices, n, n], truth)?,
        annotated_slices: annotated,
    })
}

/// Synthesizes the whole dataset with case seeds `0..num_cases`.
pub fn synth_dataset(cfg: &GeneratorConfig) -> Result<Vec<Case>> {
    cfg.validate()?;
    (0..cfg.num_cases as u64).map(|i| synth_case(cfg, i)).collect()
}

/// Labels one designated slice: Strong(chosen) where the truth is the chosen
/// class, Weak(chosen) elsewhere in the lung, Ignore outside.
///
/// Chosen-class pixels touching the truth boundary (8-neighborhood) stay
/// unlabeled, the way annotators shade strictly inside a lesion and skip the
/// rim where partial-volume mixing makes membership genuinely uncertain. The
/// surrounding lung keeps its weak label right up to the boundary.
pub fn make_partial_annotation(
    case: &Case,
    slice_index: usize,
    chosen: ClassId,
) -> Result<PartialAnnotation> {
    if !case.annotated_slices.contains(&(slice_index, chosen)) {
        return Err(Error::Contract(format!(
            "slice {slice_index} of {} is not designated for {chosen}",
            case.case_id
        )));
    }
    let (h, w) = (case.height(), case.width());
    let base = slice_index * h * w;
    let lung = &case.lung_mask.data()[base..base + h * w];
    let truth = &case.full_truth.data()[base..base + h * w];
    let chosen_byte = chosen.index() as u8;
    let mut labels: Vec<PixelLabel> = lung
        .iter()
        .zip(truth)
        .map(|(&m, &t)| {
            if m == 0 {
                PixelLabel::Ignore
            } else if t == chosen_byte {
                PixelLabel::Strong(chosen)
            } else {
                PixelLabel::Weak(chosen)
            }
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if lung[idx] == 0 {
                continue;
            }
            if truth[idx] != chosen_byte {
                continue;
            }
            let mut mixed = false;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    if truth[yy as usize * w + xx as usize] != chosen_byte {
                        mixed = true;
                        break 'scan;
                    }
                }
            }
            if mixed {
                labels[idx] = PixelLabel::Ignore;
            }
        }
    }
    Ok(PartialAnnotation {
        slice_index,
        chosen_class: chosen,
        labels,
        lung: lung.to_vec(),
        height: h,
        width: w,
    })
}

/// Majority-merges three annotators' strong masks for one slice: a pixel is
/// Strong(chosen) when at least two maps mark it, Weak(chosen) elsewhere in
/// the lung, Ignore outside.
pub fn merge_annotations(
    maps: [&[u8]; 3],
    lung: &[u8],
    slice_index: usize,
    chosen: ClassId,
    height: usize,
    width: usize,
) -> Result<PartialAnnotation> {
    let n = height * width;
    for (i, m) in maps.iter().enumerate() {
        if m.len() != n {
            return Err(Error::dimension(
                "shape",
                format!("annotator map {i} has {} pixels, expected {n}", m.len()),
            ));
        }
    }
    if lung.len() != n {
        return Err(Error::dimension(
            "shape",
            format!("lung mask has {} pixels, expected {n}", lung.len()),
        ));
    }
    let labels = (0..n)
        .map(|i| {
            if lung[i] == 0 {
                PixelLabel::Ignore
            } else {
                let votes = maps.iter().filter(|m| m[i] != 0).count();
                if votes >= 2 {
                    PixelLabel::Strong(chosen)
                } else {
                    PixelLabel::Weak(chosen)
                }
            }
        })
        .collect();
    Ok(PartialAnnotation {
        slice_index,
        chosen_class: chosen,
        labels,
        lung: lung.to_vec(),
        height,
        width,
    })
}

/// Windows intensities to `[center - width/2, center + width/2]` and maps
/// that interval affinely onto [0,1].
pub fn normalize_intensity(volume: &Tensor, center: f64, width: f64) -> Result<Tensor> {
    if !(width > 0.0) {
        return Err(Error::Config(format!("window width must be positive, got {width}")));
    }
    let lo = center - width / 2.0;
    let mut out = volume.clone();
    for v in out.data_mut() {
        *v = ((*v - lo) / width).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Default lung window: center −600, width 1500.
pub fn normalize_default(volume: &Tensor) -> Result<Tensor> {
    normalize_intensity(volume, -600.0, 1500.0)
}

/// Cuts the normalized (Z,H,W,1) context stack around one slice, replicating
/// edge slices at the volume boundary. The target slice lands at z-offset
/// `context / 2` (rounded down).
pub fn context_volume(case: &Case, slice_index: usize, context: usize) -> Result<Tensor> {
    if context == 0 {
        return Err(Error::Config("context must be at least 1".into()));
    }
    let s = case.num_slices();
    if slice_index >= s {
        return Err(Error::dimension(
            "z",
            format!("slice {slice_index} out of range for {s} slices"),
        ));
    }
    let (h, w) = (case.height(), case.width());
    let normalized = normalize_default(&case.volume)?;
    let mut data = Vec::with_capacity(context * h * w);
    let half = (context / 2) as i64;
    for dz in 0..context as i64 {
        let z = (slice_index as i64 + dz - half).clamp(0, s as i64 - 1) as usize;
        data.extend_from_slice(&normalized.data()[z * h * w..(z + 1) * h * w]);
    }
    Tensor::new(vec![context, h, w, 1], data)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCase {
    case_id: String,
    case_seed: u64,
    num_slices: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    generator: GeneratorConfig,
    cases: Vec<ManifestCase>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    slice_index: usize,
    chosen_class: ClassId,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path.display().to_string(), e.to_string())
}

/// Writes the dataset directory: `manifest.json` plus per-case volume, lung
/// mask, truth map, and annotation list.
pub fn save_dataset(cfg: &GeneratorConfig, cases: &[Case], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = Manifest {
        generator: cfg.clone(),
        cases: cases
            .iter()
            .enumerate()
            .map(|(i, c)| ManifestCase {
                case_id: c.case_id.clone(),
                case_seed: i as u64,
                num_slices: c.num_slices(),
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&manifest_path, e))?;
    std::fs::write(&manifest_path, body).map_err(|e| io_err(&manifest_path, e))?;

    for case in cases {
        let case_dir = dir.join(&case.case_id);
        std::fs::create_dir_all(&case_dir).map_err(|e| io_err(&case_dir, e))?;
        case.volume.save(&case_dir.join("volume.f64"))?;
        case.lung_mask.save(&case_dir.join("lung.u8"))?;
        case.full_truth.save(&case_dir.join("truth.u8"))?;
        let records: Vec<AnnotationRecord> = case
            .annotated_slices
            .iter()
            .map(|&(slice_index, chosen_class)| AnnotationRecord { slice_index, chosen_class })
            .collect();
        let ann_path = case_dir.join("annotations.json");
        let body = serde_json::to_string_pretty(&records).map_err(|e| io_err(&ann_path, e))?;
        std::fs::write(&ann_path, body).map_err(|e| io_err(&ann_path, e))?;
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(GeneratorConfig, Vec<Case>)> {
    let manifest_path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&body).map_err(|e| io_err(&manifest_path, e))?;

    let mut cases = Vec::with_capacity(manifest.cases.len());
    for entry in &manifest.cases {
        let case_dir = dir.join(&entry.case_id);
        let volume = Tensor::load(&case_dir.join("volume.f64"))?;
        let lung_mask = ByteMap::load(&case_dir.join("lung.u8"))?;
        let full_truth = ByteMap::load(&case_dir.join("truth.u8"))?;
        if volume.shape().len() != 3 {
            return Err(Error::dimension(
                "shape",
                format!("{}: volume must be (S,H,W), got {:?}", entry.case_id, volume.shape()),
            ));
        }
        if lung_mask.shape() != volume.shape() || full_truth.shape() != volume.shape() {
            return Err(Error::dimension(
                "shape",
                format!("{}: mask shapes do not match the volume", entry.case_id),
            ));
        }
        let ann_path = case_dir.join("annotations.json");
        let body = std::fs::read_to_string(&ann_path).map_err(|e| io_err(&ann_path, e))?;
        let records: Vec<AnnotationRecord> =
            serde_json::from_str(&body).map_err(|e| io_err(&ann_path, e))?;
        cases.push(Case {
            case_id: entry.case_id.clone(),
            volume,
            lung_mask,
            full_truth,
            annotated_slices: records
                .into_iter()
                .map(|r| (r.slice_index, r.chosen_class))
                .collect(),
        });
    }
    Ok((manifest.generator, cases))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_cases: 4,
            image_size: 32,
            context_slices: 3,
            slices_min: 6,
            slices_max: 9,
            class_slice_weights: default_weights(),
            texture: TextureParams::default(),
            seed,
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = small_cfg(7);
        let a = synth_case(&cfg, 3).unwrap();
        let b = synth_case(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_case(&cfg, 4).unwrap();
        assert_ne!(a.volume.data(), c.volume.data());
    }

    #[test]
    fn rejects_small_images() {
        let cfg = GeneratorConfig { image_size: 31, ..small_cfg(0) };
        assert!(matches!(synth_case(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_weights_pin_the_class() {
        let cfg = GeneratorConfig {
            class_slice_weights: [1.0, 0.0, 0.0, 0.0, 0.0],
            ..small_cfg(11)
        };
        for i in 0..6 {
            let case = synth_case(&cfg, i).unwrap();
            assert!(!case.annotated_slices.is_empty());
            for &(_, class) in &case.annotated_slices {
                assert_eq!(class, ClassId::Con);
            }
        }
    }

    #[test]
    fn annotation_counts_and_truth_domain() {
        let cfg = small_cfg(5);
        for i in 0..cfg.num_cases as u64 {
            let case = synth_case(&cfg, i).unwrap();
            assert!((1..=3).contains(&case.annotated_slices.len()));
            let mut slice_ids: Vec<usize> =
                case.annotated_slices.iter().map(|&(z, _)| z).collect();
            slice_ids.dedup();
            assert_eq!(slice_ids.len(), case.annotated_slices.len());
            for (&m, &t) in case.lung_mask.data().iter().zip(case.full_truth.data()) {
                if m == 0 {
                    assert_eq!(t, OUTSIDE_LUNG);
                } else {
                    assert!((t as usize) < NUM_CLASSES);
                }
            }
            assert!(case
                .volume
                .data()
                .iter()
                .all(|&v| (-1000.0..=100.0).contains(&v)));
        }
    }

    #[test]
    fn class_choice_follows_the_weights() {
        // enough annotations for a multinomial 3-sigma bound per class
        let cfg = GeneratorConfig { num_cases: 120, ..small_cfg(2) };
        let mut counts = [0usize; NUM_CLASSES];
        let mut total = 0usize;
        for case in synth_dataset(&cfg).unwrap() {
            for &(_, class) in &case.annotated_slices {
                counts[class.index()] += 1;
                total += 1;
            }
        }
        assert!(total >= 200, "only {total} annotations");
        let wsum: f64 = cfg.class_slice_weights.iter().sum();
        for (i, &count) in counts.iter().enumerate() {
            let p = cfg.class_slice_weights[i] / wsum;
            let mean = total as f64 * p;
            let sd = (total as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (count as f64 - mean).abs() <= 3.0 * sd,
                "class {i}: {count} vs {mean:.1} +/- 3*{sd:.1}"
            );
        }
    }

    #[test]
    fn partial_annotation_partitions_the_lung() {
        let cfg = small_cfg(13);
        let case = synth_case(&cfg, 1).unwrap();
        let &(slice, chosen) = &case.annotated_slices[0];
        let ann = make_partial_annotation(&case, slice, chosen).unwrap();
        let (h, w) = (case.height(), case.width());
        let base = slice * h * w;
        let truth = &case.full_truth.data()[base..base + h * w];
        let on_chosen_rim = |i: usize| {
            if truth[i] != chosen.index() as u8 {
                return false;
            }
            let (y, x) = (i / w, i % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    if truth[yy as usize * w + xx as usize] != chosen.index() as u8 {
                        return true;
                    }
                }
            }
            false
        };
        let (mut strong, mut weak) = (0usize, 0usize);
        for i in 0..h * w {
            let in_lung = case.lung_mask.data()[base + i] == 1;
            match ann.labels[i] {
                PixelLabel::Ignore => assert!(!in_lung || on_chosen_rim(i)),
                PixelLabel::Strong(c) => {
                    assert!(in_lung && !on_chosen_rim(i));
                    assert_eq!(c, chosen);
                    assert_eq!(truth[i], chosen.index() as u8);
                    strong += 1;
                }
                PixelLabel::Weak(c) => {
                    assert!(in_lung);
                    assert_eq!(c, chosen);
                    assert_ne!(truth[i], chosen.index() as u8);
                    weak += 1;
                }
            }
        }
        assert!(strong > 0, "the unlabeled rim must not swallow the core");
        assert!(weak > 0, "the unlabeled rim must not swallow the outside");
    }

    fn tiny_case(truth_class: u8) -> Case {
        // 1-slice 2x2 case: pixels 0,1 in lung, 2,3 outside
        Case {
            case_id: "tiny".into(),
            volume: Tensor::zeros(&[1, 2, 2]),
            lung_mask: ByteMap::new(vec![1, 2, 2], vec![1, 1, 0, 0]).unwrap(),
            full_truth: ByteMap::new(
                vec![1, 2, 2],
                vec![truth_class, truth_class, OUTSIDE_LUNG, OUTSIDE_LUNG],
            )
            .unwrap(),
            annotated_slices: vec![(0, ClassId::Con)],
        }
    }

    #[test]
    fn all_chosen_slice_has_no_weak_pixels() {
        let case = Case {
            case_id: "solid".into(),
            volume: Tensor::zeros(&[1, 3, 3]),
            lung_mask: ByteMap::new(vec![1, 3, 3], vec![1; 9]).unwrap(),
            full_truth: ByteMap::new(vec![1, 3, 3], vec![0; 9]).unwrap(),
            annotated_slices: vec![(0, ClassId::Con)],
        };
        let ann = make_partial_annotation(&case, 0, ClassId::Con).unwrap();
        assert_eq!(ann.labels, vec![PixelLabel::Strong(ClassId::Con); 9]);
    }

    #[test]
    fn chosen_rim_is_unlabeled_but_weak_side_keeps_its_label() {
        // 4x4 lung, chosen class fills the left half: the chosen column
        // touching the boundary is unlabeled, the far side stays weak
        let truth = vec![0, 0, 4, 4, 0, 0, 4, 4, 0, 0, 4, 4, 0, 0, 4, 4];
        let case = Case {
            case_id: "split".into(),
            volume: Tensor::zeros(&[1, 4, 4]),
            lung_mask: ByteMap::new(vec![1, 4, 4], vec![1; 16]).unwrap(),
            full_truth: ByteMap::new(vec![1, 4, 4], truth).unwrap(),
            annotated_slices: vec![(0, ClassId::Con)],
        };
        let ann = make_partial_annotation(&case, 0, ClassId::Con).unwrap();
        for y in 0..4 {
            assert_eq!(ann.labels[y * 4], PixelLabel::Strong(ClassId::Con));
            assert_eq!(ann.labels[y * 4 + 1], PixelLabel::Ignore);
            assert_eq!(ann.labels[y * 4 + 2], PixelLabel::Weak(ClassId::Con));
            assert_eq!(ann.labels[y * 4 + 3], PixelLabel::Weak(ClassId::Con));
        }
    }

    #[test]
    fn chosen_class_absent_gives_no_strong_pixels() {
        let case = tiny_case(4);
        let ann = make_partial_annotation(&case, 0, ClassId::Con).unwrap();
        assert_eq!(
            ann.labels,
            vec![
                PixelLabel::Weak(ClassId::Con),
                PixelLabel::Weak(ClassId::Con),
                PixelLabel::Ignore,
                PixelLabel::Ignore
            ]
        );
    }

    #[test]
    fn undesignated_slice_is_a_contract_error() {
        let case = tiny_case(0);
        assert!(matches!(
            make_partial_annotation(&case, 0, ClassId::Ggo),
            Err(Error::Contract(_))
        ));
        assert!(make_partial_annotation(&case, 1, ClassId::Con).is_err());
    }

    #[test]
    fn majority_vote_rules() {
        let lung = [1u8, 1, 1, 0];
        let a = [1u8, 1, 0, 0];
        let b = [1u8, 0, 0, 0];
        let c = [0u8, 1, 1, 0];
        let merged =
            merge_annotations([&a, &b, &c], &lung, 0, ClassId::Ggo, 2, 2).unwrap();
        // votes per pixel: 2, 2, 1, outside
        assert_eq!(
            merged.labels,
            vec![
                PixelLabel::Strong(ClassId::Ggo),
                PixelLabel::Strong(ClassId::Ggo),
                PixelLabel::Weak(ClassId::Ggo),
                PixelLabel::Ignore
            ]
        );

        // permutation invariance
        let maps = [&a[..], &b[..], &c[..]];
        for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let m = merge_annotations(
                [maps[perm[0]], maps[perm[1]], maps[perm[2]]],
                &lung,
                0,
                ClassId::Ggo,
                2,
                2,
            )
            .unwrap();
            assert_eq!(m.labels, merged.labels);
        }

        // unanimity reproduces the input inside the lung
        let same = merge_annotations([&a, &a, &a], &lung, 0, ClassId::Ggo, 2, 2).unwrap();
        for i in 0..3 {
            let expect = if a[i] == 1 {
                PixelLabel::Strong(ClassId::Ggo)
            } else {
                PixelLabel::Weak(ClassId::Ggo)
            };
            assert_eq!(same.labels[i], expect);
        }

        let short = [1u8, 0];
        assert!(merge_annotations([&a, &b, &short], &lung, 0, ClassId::Ggo, 2, 2).is_err());
    }

    #[test]
    fn lesion_slices_balance_strong_and_weak_mass() {
        // Weak pixels must not swamp strong ones, or the weak penalty at
        // high lambda can bury the supervised signal before it learns.
        let cfg = GeneratorConfig { num_cases: 24, ..small_cfg(3) };
        let (mut strong, mut weak, mut lesion_slices) = (0u64, 0u64, 0u32);
        for case in synth_dataset(&cfg).unwrap() {
            for &(z, chosen) in &case.annotated_slices {
                if chosen == ClassId::Nor {
                    continue;
                }
                let ann = make_partial_annotation(&case, z, chosen).unwrap();
                strong += ann
                    .labels
                    .iter()
                    .filter(|l| matches!(l, PixelLabel::Strong(_)))
                    .count() as u64;
                weak += ann
                    .labels
                    .iter()
                    .filter(|l| matches!(l, PixelLabel::Weak(_)))
                    .count() as u64;
                lesion_slices += 1;
            }
        }
        assert!(lesion_slices >= 20, "only {lesion_slices} lesion slices");
        let ratio = strong as f64 / weak as f64;
        assert!(
            (0.5..=3.0).contains(&ratio),
            "strong:weak ratio {ratio:.2} outside the trainable band"
        );
    }

    #[test]
    fn normalization_window() {
        let v = Tensor::new(
            vec![1, 1, 5],
            vec![-600.0, -1350.0, -2000.0, 150.0, 500.0],
        )
        .unwrap();
        let n = normalize_default(&v).unwrap();
        let d = n.data();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 1.0);
        assert_eq!(d[4], 1.0);

        let constant = Tensor::filled(&[2, 2, 2], -600.0);
        let nc = normalize_default(&constant).unwrap();
        assert!(nc.data().iter().all(|&x| (x - 0.5).abs() < 1e-12));

        assert!(normalize_intensity(&v, -600.0, 0.0).is_err());
    }

    #[test]
    fn normalization_is_monotone() {
        let mut values: Vec<f64> = (0..60).map(|i| -1500.0 + 30.0 * i as f64).collect();
        values.push(-1350.0);
        values.push(150.0);
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t = Tensor::new(vec![values.len()], values).unwrap();
        let n = normalize_default(&t).unwrap();
        for pair in n.data().windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn context_stack_centers_and_replicates() {
        let cfg = small_cfg(17);
        let case = synth_case(&cfg, 0).unwrap();
        let s = case.num_slices();
        let ctx = 6usize;
        let normalized = normalize_default(&case.volume).unwrap();
        let hw = case.height() * case.width();

        let stack = context_volume(&case, 0, ctx).unwrap();
        assert_eq!(stack.shape(), &[ctx, case.height(), case.width(), 1]);
        // slice 0 with the target at offset 3: window indices clamp to
        // [0,0,0,0,1,2]
        for (dz, expect_z) in [(0usize, 0usize), (1, 0), (2, 0), (3, 0), (4, 1), (5, 2)] {
            assert_eq!(
                &stack.data()[dz * hw..(dz + 1) * hw],
                &normalized.data()[expect_z * hw..(expect_z + 1) * hw]
            );
        }

        let last = s - 1;
        let stack2 = context_volume(&case, last, ctx).unwrap();
        for dz in 0..ctx {
            let expect_z = (last as i64 + dz as i64 - 3).clamp(0, s as i64 - 1) as usize;
            assert_eq!(
                &stack2.data()[dz * hw..(dz + 1) * hw],
                &normalized.data()[expect_z * hw..(expect_z + 1) * hw]
            );
        }

        assert!(context_volume(&case, s, ctx).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let cfg = small_cfg(23);
        let cases = synth_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&cfg, &cases, dir.path()).unwrap();
        let (loaded_cfg, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded, cases);
    }

    #[test]
    fn truncated_volume_is_an_io_error() {
        let cfg = small_cfg(29);
        let cases = synth_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&cfg, &cases, dir.path()).unwrap();
        let victim = dir.path().join(&cases[0].case_id).join("volume.f64");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("volume.f64"), "{err}");
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let cfg = GeneratorConfig { num_cases: 0, ..small_cfg(31) };
        let cases = synth_dataset(&cfg).unwrap();
        assert!(cases.is_empty());
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&cfg, &cases, dir.path()).unwrap();
        let (_, loaded) = load_dataset(dir.path()).unwrap();
        assert!(loaded.is_empty());
    }
}
