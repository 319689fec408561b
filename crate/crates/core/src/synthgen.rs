//! Procedural multi-domain single-cell image generator.
//!
//! Produces labeled crops of a stylized white blood cell surrounded by
//! red-blood-cell distractors, plus a deterministic pseudo-RoI feature
//! vector per crop. Class identity is carried by a fixed morphology
//! template (lobe count, nucleus area, granularity, radius) while
//! domain identity is carried by parametric appearance shifts (hue,
//! brightness, blur, tint, distractor density), so the same cytology
//! renders differently per acquisition site.

use crate::datamodel::{Dataset, DatasetMeta, DomainId, ImageU8, InstanceRecord};
use crate::error::{Error, Result};
use crate::seeds;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const GENERATOR_VERSION: u32 = 1;

/// Per-domain appearance shift applied after rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShift {
    pub hue_shift_deg: f32,
    pub brightness_scale: f32,
    pub blur_sigma: f32,
    pub background_tint: (i16, i16, i16),
    pub rbc_density: f32,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            hue_shift_deg: 0.0,
            brightness_scale: 1.0,
            blur_sigma: 0.0,
            background_tint: (0, 0, 0),
            rbc_density: 0.0,
        }
    }
}

/// Built-in shift table; domain 0 is the near-identity anchor.
pub fn default_shifts(num_domains: u32) -> Vec<DomainShift> {
    const BASE: [DomainShift; 5] = [
        DomainShift {
            hue_shift_deg: 0.0,
            brightness_scale: 1.0,
            blur_sigma: 0.0,
            background_tint: (0, 0, 0),
            rbc_density: 0.35,
        },
        DomainShift {
            hue_shift_deg: 40.0,
            brightness_scale: 1.18,
            blur_sigma: 0.8,
            background_tint: (10, -6, 12),
            rbc_density: 0.55,
        },
        DomainShift {
            hue_shift_deg: -35.0,
            brightness_scale: 0.82,
            blur_sigma: 1.3,
            background_tint: (-10, 8, -4),
            rbc_density: 0.15,
        },
        DomainShift {
            hue_shift_deg: 70.0,
            brightness_scale: 1.30,
            blur_sigma: 0.4,
            background_tint: (0, 12, -12),
            rbc_density: 0.45,
        },
        DomainShift {
            hue_shift_deg: -60.0,
            brightness_scale: 0.75,
            blur_sigma: 1.8,
            background_tint: (14, 0, 6),
            rbc_density: 0.25,
        },
    ];
    (0..num_domains)
        .map(|k| {
            let mut s = BASE[(k as usize) % BASE.len()];
            s.hue_shift_deg += 7.0 * (k / BASE.len() as u32) as f32;
            s
        })
        .collect()
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub num_domains: u32,
    pub num_classes: u32,
    pub per_class_per_domain: usize,
    pub image_side: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// One entry per domain.
    pub shifts: Vec<DomainShift>,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_domains: 3,
            num_classes: 5,
            per_class_per_domain: 40,
            image_side: 64,
            feature_dim: 256,
            seed: 42,
            shifts: default_shifts(3),
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::Config("num_domains must be >= 2".into()));
        }
        if !(2..=13).contains(&self.num_classes) {
            return Err(Error::Config("num_classes must be in [2, 13]".into()));
        }
        if self.per_class_per_domain == 0 {
            return Err(Error::Config("per_class_per_domain must be positive".into()));
        }
        if self.image_side < 16 || self.image_side % 16 != 0 {
            return Err(Error::Config(
                "image_side must be a positive multiple of 16".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.shifts.len() != self.num_domains as usize {
            return Err(Error::Config(format!(
                "expected {} domain shifts, got {}",
                self.num_domains,
                self.shifts.len()
            )));
        }
        for (k, s) in self.shifts.iter().enumerate() {
            let finite = s.hue_shift_deg.is_finite()
                && s.brightness_scale.is_finite()
                && s.blur_sigma.is_finite();
            if !finite || s.brightness_scale <= 0.0 || s.blur_sigma < 0.0 {
                return Err(Error::Config(format!("invalid shift params for domain {k}")));
            }
            if !(0.0..=1.0).contains(&s.rbc_density) {
                return Err(Error::Config(format!(
                    "rbc_density for domain {k} must be in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Class-defining shape parameters; one fixed template per label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMorphology {
    pub nucleus_lobe_count: u32,
    pub nucleus_area_fraction: f32,
    pub cytoplasm_granularity: f32,
    pub cell_radius_fraction: f32,
}

const MORPHOLOGIES: [CellMorphology; 13] = [
    // basophil
    CellMorphology { nucleus_lobe_count: 1, nucleus_area_fraction: 0.52, cytoplasm_granularity: 0.85, cell_radius_fraction: 0.40 },
    // eosinophil
    CellMorphology { nucleus_lobe_count: 2, nucleus_area_fraction: 0.42, cytoplasm_granularity: 0.65, cell_radius_fraction: 0.37 },
    // erythroblast
    CellMorphology { nucleus_lobe_count: 1, nucleus_area_fraction: 0.68, cytoplasm_granularity: 0.10, cell_radius_fraction: 0.29 },
    // myeloblast
    CellMorphology { nucleus_lobe_count: 1, nucleus_area_fraction: 0.60, cytoplasm_granularity: 0.05, cell_radius_fraction: 0.42 },
    // promyelocyte
    CellMorphology { nucleus_lobe_count: 2, nucleus_area_fraction: 0.50, cytoplasm_granularity: 0.45, cell_radius_fraction: 0.34 },
    // myelocyte
    CellMorphology { nucleus_lobe_count: 1, nucleus_area_fraction: 0.45, cytoplasm_granularity: 0.35, cell_radius_fraction: 0.36 },
    // metamyelocyte
    CellMorphology { nucleus_lobe_count: 2, nucleus_area_fraction: 0.38, cytoplasm_granularity: 0.30, cell_radius_fraction: 0.36 },
    // neutrophil_banded
    CellMorphology { nucleus_lobe_count: 3, nucleus_area_fraction: 0.34, cytoplasm_granularity: 0.25, cell_radius_fraction: 0.37 },
    // neutrophil_segmented
    CellMorphology { nucleus_lobe_count: 4, nucleus_area_fraction: 0.30, cytoplasm_granularity: 0.25, cell_radius_fraction: 0.37 },
    // monocyte
    CellMorphology { nucleus_lobe_count: 2, nucleus_area_fraction: 0.55, cytoplasm_granularity: 0.15, cell_radius_fraction: 0.42 },
    // lymphocyte_typical
    CellMorphology { nucleus_lobe_count: 1, nucleus_area_fraction: 0.72, cytoplasm_granularity: 0.05, cell_radius_fraction: 0.28 },
    // lymphocyte_atypical
    CellMorphology { nucleus_lobe_count: 1, nucleus_area_fraction: 0.58, cytoplasm_granularity: 0.18, cell_radius_fraction: 0.33 },
    // smudge_cell
    CellMorphology { nucleus_lobe_count: 1, nucleus_area_fraction: 0.78, cytoplasm_granularity: 0.08, cell_radius_fraction: 0.31 },
];

/// Morphology template for a class id (< 13).
pub fn morphology_for(class: u32) -> CellMorphology {
    MORPHOLOGIES[class as usize]
}

const BACKGROUND: [f32; 3] = [235.0, 228.0, 225.0];
const CYTOPLASM: [f32; 3] = [168.0, 158.0, 212.0];
const NUCLEUS: [f32; 3] = [92.0, 58.0, 128.0];
const RBC: [f32; 3] = [214.0, 128.0, 118.0];

/// Rendered crop before the domain transform, with ground-truth masks.
#[derive(Debug, Clone)]
pub struct RenderedCell {
    pub image: ImageU8,
    /// True where any cell body coverage exists (soft edge included).
    pub cell_mask: Vec<bool>,
    /// True where a nucleus lobe covers at least half the pixel.
    pub nucleus_mask: Vec<bool>,
}

fn soft_disk_alpha(dx: f32, dy: f32, radius: f32) -> f32 {
    let dist = (dx * dx + dy * dy).sqrt();
    (radius + 0.5 - dist).clamp(0.0, 1.0)
}

/// Renders the white blood cell plus distractors onto a fresh canvas.
///
/// Per-draw jitter (center, radius, lobe phase, speckle, distractor
/// layout) comes entirely from `rng`.
pub fn render_cell(class: u32, rbc_density: f32, side: usize, rng: &mut ChaCha8Rng) -> RenderedCell {
    let morph = morphology_for(class);
    let s = side as f32;
    let mut canvas = vec![0.0f32; 3 * side * side];
    for c in 0..3 {
        canvas[c * side * side..(c + 1) * side * side].fill(BACKGROUND[c]);
    }

    let r_cell = morph.cell_radius_fraction * s * rng.random_range(0.92..1.08f32);
    let cx = s / 2.0 + s * rng.random_range(-0.03..0.03f32);
    let cy = s / 2.0 + s * rng.random_range(-0.03..0.03f32);

    // Distractor disks, only outside the central cell body.
    let rbc_count = (rbc_density * 14.0).round() as usize;
    let mut rbc_disks: Vec<(f32, f32, f32)> = Vec::new();
    for _ in 0..rbc_count {
        for _attempt in 0..50 {
            let x = rng.random_range(0.0..s);
            let y = rng.random_range(0.0..s);
            let r = s * rng.random_range(0.07..0.10f32);
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            if d > r_cell + 0.6 * r {
                rbc_disks.push((x, y, r));
                break;
            }
        }
    }
    for &(x, y, r) in &rbc_disks {
        let pale = rng.random_range(0.88..1.0f32);
        blend_disk(&mut canvas, side, x, y, r, [RBC[0] * pale, RBC[1] * pale, RBC[2] * pale]);
    }

    // Cell body with granular speckle, then nucleus lobes.
    let lobes = morph.nucleus_lobe_count.max(1);
    let r_lobe = (morph.nucleus_area_fraction / lobes as f32).sqrt() * r_cell;
    let ring = if lobes == 1 {
        0.0
    } else {
        (r_cell * 0.50).min(r_cell * 0.95 - r_lobe).max(0.0)
    };
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let lobe_centers: Vec<(f32, f32)> = (0..lobes)
        .map(|i| {
            let a = phase + std::f32::consts::TAU * i as f32 / lobes as f32;
            (cx + ring * a.cos(), cy + ring * a.sin())
        })
        .collect();

    let mut cell_mask = vec![false; side * side];
    let mut nucleus_mask = vec![false; side * side];
    let speckle_amp = morph.cytoplasm_granularity * 30.0;
    for y in 0..side {
        for x in 0..side {
            let fx = x as f32 + 0.5;
            let fy = y as f32 + 0.5;
            let cell_a = soft_disk_alpha(fx - cx, fy - cy, r_cell);
            if cell_a <= 0.0 {
                continue;
            }
            cell_mask[y * side + x] = true;
            let speckle = if speckle_amp > 0.0 {
                rng.random_range(-speckle_amp..speckle_amp)
            } else {
                // Keep the rng stream aligned across classes.
                let _ = rng.random::<f32>();
                0.0
            };
            let mut nuc_a = 0.0f32;
            let mut nuc_d = f32::MAX;
            for &(lx, ly) in &lobe_centers {
                let a = soft_disk_alpha(fx - lx, fy - ly, r_lobe);
                nuc_a = nuc_a.max(a);
                let d = ((fx - lx).powi(2) + (fy - ly).powi(2)).sqrt();
                nuc_d = nuc_d.min(d / r_lobe.max(1e-6));
            }
            if nuc_a >= 0.5 {
                nucleus_mask[y * side + x] = true;
            }
            for c in 0..3 {
                let idx = c * side * side + y * side + x;
                let cyto = CYTOPLASM[c] + speckle;
                let shade = NUCLEUS[c] * (0.85 + 0.15 * nuc_d.min(1.0));
                let body = cyto * (1.0 - nuc_a) + shade * nuc_a;
                canvas[idx] = canvas[idx] * (1.0 - cell_a) + body * cell_a;
            }
        }
    }

    let mut image = ImageU8::new(side);
    for (dst, &v) in image.data.iter_mut().zip(canvas.iter()) {
        *dst = v.round().clamp(0.0, 255.0) as u8;
    }
    RenderedCell {
        image,
        cell_mask,
        nucleus_mask,
    }
}

fn blend_disk(canvas: &mut [f32], side: usize, x: f32, y: f32, r: f32, color: [f32; 3]) {
    let lo_y = ((y - r - 1.0).floor().max(0.0)) as usize;
    let hi_y = ((y + r + 1.0).ceil().min(side as f32 - 1.0)) as usize;
    let lo_x = ((x - r - 1.0).floor().max(0.0)) as usize;
    let hi_x = ((x + r + 1.0).ceil().min(side as f32 - 1.0)) as usize;
    for py in lo_y..=hi_y {
        for px in lo_x..=hi_x {
            let a = soft_disk_alpha(px as f32 + 0.5 - x, py as f32 + 0.5 - y, r);
            if a <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let idx = c * side * side + py * side + px;
                canvas[idx] = canvas[idx] * (1.0 - a) + color[c] * a;
            }
        }
    }
}

/// Hue rotation, brightness scaling, Gaussian blur, and additive tint,
/// in that fixed order. Identity parameters leave the image unchanged.
pub fn domain_transform(img: &ImageU8, shift: &DomainShift) -> ImageU8 {
    let side = img.side;
    let n = side * side;
    let mut buf: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();

    if shift.hue_shift_deg != 0.0 {
        let theta = shift.hue_shift_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        // Luminance-preserving RGB hue rotation matrix.
        let m = [
            [0.213 + cos * 0.787 - sin * 0.213, 0.715 - cos * 0.715 - sin * 0.715, 0.072 - cos * 0.072 + sin * 0.928],
            [0.213 - cos * 0.213 + sin * 0.143, 0.715 + cos * 0.285 + sin * 0.140, 0.072 - cos * 0.072 - sin * 0.283],
            [0.213 - cos * 0.213 - sin * 0.787, 0.715 - cos * 0.715 + sin * 0.715, 0.072 + cos * 0.928 + sin * 0.072],
        ];
        for p in 0..n {
            let r = buf[p];
            let g = buf[n + p];
            let b = buf[2 * n + p];
            for (c, row) in m.iter().enumerate() {
                buf[c * n + p] = (row[0] * r + row[1] * g + row[2] * b).clamp(0.0, 255.0);
            }
        }
    }

    if shift.brightness_scale != 1.0 {
        for v in buf.iter_mut() {
            *v = (*v * shift.brightness_scale).clamp(0.0, 255.0);
        }
    }

    if shift.blur_sigma > 0.0 {
        let sigma = shift.blur_sigma;
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for i in -radius..=radius {
            kernel.push((-((i * i) as f32) / (2.0 * sigma * sigma)).exp());
        }
        let norm: f32 = kernel.iter().sum();
        for k in kernel.iter_mut() {
            *k /= norm;
        }
        let clamp_idx = |i: isize| -> usize { i.clamp(0, side as isize - 1) as usize };
        for c in 0..3 {
            let plane = buf[c * n..(c + 1) * n].to_vec();
            let mut tmp = vec![0.0f32; n];
            for y in 0..side {
                for x in 0..side {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sx = clamp_idx(x as isize + ki as isize - radius);
                        acc += k * plane[y * side + sx];
                    }
                    tmp[y * side + x] = acc;
                }
            }
            for y in 0..side {
                for x in 0..side {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sy = clamp_idx(y as isize + ki as isize - radius);
                        acc += k * tmp[sy * side + x];
                    }
                    buf[c * n + y * side + x] = acc;
                }
            }
        }
    }

    let tint = [
        shift.background_tint.0 as f32,
        shift.background_tint.1 as f32,
        shift.background_tint.2 as f32,
    ];
    if tint != [0.0, 0.0, 0.0] {
        for c in 0..3 {
            for p in 0..n {
                buf[c * n + p] = (buf[c * n + p] + tint[c]).clamp(0.0, 255.0);
            }
        }
    }

    let mut out = ImageU8::new(side);
    for (dst, &v) in out.data.iter_mut().zip(buf.iter()) {
        *dst = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// One labeled crop: render with per-draw jitter, then apply the
/// domain's appearance shift. Deterministic given all arguments.
pub fn gen_cell_image(class: u32, domain: u32, spec: &GenSpec, draw_seed: u64) -> Result<ImageU8> {
    if class >= spec.num_classes {
        return Err(Error::Config(format!(
            "class {class} out of range (C = {})",
            spec.num_classes
        )));
    }
    let shift = spec
        .shifts
        .get(domain as usize)
        .ok_or_else(|| Error::Config(format!("domain {domain} out of range")))?;
    let mut rng = seeds::rng(spec.seed, &[u64::from(domain), u64::from(class), draw_seed]);
    let rendered = render_cell(class, shift.rbc_density, spec.image_side, &mut rng);
    Ok(domain_transform(&rendered.image, shift))
}

/// Frozen random-projection backbone shared by every domain.
///
/// The projection matrix is seeded solely by `GenSpec::seed`, never
/// retrained, and identical for all domains.
pub struct FeatureProjector {
    rows: usize,
    cols: usize,
    matrix: Vec<f32>,
}

const PATCH_GRID: usize = 4;
const PATCH_FEATURES: usize = PATCH_GRID * PATCH_GRID * 3 * 2;
const POOL_SIDE: usize = 16;
const PROJECTION_STREAM: u64 = 0x70726f6a; // "proj"

impl FeatureProjector {
    pub fn new(spec: &GenSpec) -> Self {
        let cols = POOL_SIDE * POOL_SIDE * 3;
        let rows = spec.feature_dim.saturating_sub(PATCH_FEATURES);
        let mut rng = seeds::rng(spec.seed, &[PROJECTION_STREAM]);
        let mut matrix = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            matrix.push(sample_standard_normal(&mut rng));
        }
        Self { rows, cols, matrix }
    }

    /// Pseudo-RoI feature vector: patch statistics concatenated with a
    /// tanh-squashed random projection of the pooled image, truncated
    /// or zero-padded to the configured dimension.
    pub fn features(&self, img: &ImageU8, feature_dim: usize) -> Result<Vec<f32>> {
        let side = img.side;
        if side % PATCH_GRID != 0 || side % POOL_SIDE != 0 {
            return Err(Error::Config(format!(
                "image side {side} is not divisible by the patch grid"
            )));
        }
        let mut out = Vec::with_capacity(feature_dim);

        // (a) per-channel mean/variance over a fixed 4x4 grid.
        let ps = side / PATCH_GRID;
        let mut means = Vec::with_capacity(PATCH_FEATURES / 2);
        let mut vars = Vec::with_capacity(PATCH_FEATURES / 2);
        for gy in 0..PATCH_GRID {
            for gx in 0..PATCH_GRID {
                for c in 0..3 {
                    let mut sum = 0.0f64;
                    let mut sum_sq = 0.0f64;
                    for y in gy * ps..(gy + 1) * ps {
                        for x in gx * ps..(gx + 1) * ps {
                            let v = img.get(c, y, x) as f64 / 255.0;
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let m = sum / (ps * ps) as f64;
                    let v = (sum_sq / (ps * ps) as f64 - m * m).max(0.0);
                    means.push((2.0 * m - 1.0) as f32);
                    vars.push((8.0 * v - 1.0) as f32);
                }
            }
        }
        out.extend_from_slice(&means);
        out.extend_from_slice(&vars);

        // (b) random projection of the average-pooled image.
        if self.rows > 0 {
            let pool = side / POOL_SIDE;
            let mut pooled = vec![0.0f32; self.cols];
            for c in 0..3 {
                for py in 0..POOL_SIDE {
                    for px in 0..POOL_SIDE {
                        let mut sum = 0.0f32;
                        for y in py * pool..(py + 1) * pool {
                            for x in px * pool..(px + 1) * pool {
                                sum += img.get(c, y, x) as f32 / 255.0;
                            }
                        }
                        pooled[c * POOL_SIDE * POOL_SIDE + py * POOL_SIDE + px] =
                            sum / (pool * pool) as f32 - 0.5;
                    }
                }
            }
            for r in 0..self.rows {
                let row = &self.matrix[r * self.cols..(r + 1) * self.cols];
                let dot: f32 = row.iter().zip(pooled.iter()).map(|(a, b)| a * b).sum();
                out.push((dot / 8.0).tanh());
            }
        }

        out.truncate(feature_dim);
        out.resize(feature_dim, 0.0);
        Ok(out)
    }
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller on uniform draws.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Convenience wrapper building the projector on the fly.
pub fn pseudo_roi_features(img: &ImageU8, spec: &GenSpec) -> Result<Vec<f32>> {
    FeatureProjector::new(spec).features(img, spec.feature_dim)
}

/// Generates the full K x C x per_class_per_domain dataset.
///
/// Records are ordered by (domain, class, replicate) with contiguous
/// ids; each record's draw seed mixes the spec seed with its record id,
/// so parallel generation matches sequential generation exactly.
pub fn gen_dataset(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let projector = FeatureProjector::new(spec);
    let mut layout = Vec::new();
    let mut id = 0u64;
    for d in 0..spec.num_domains {
        for c in 0..spec.num_classes {
            for _ in 0..spec.per_class_per_domain {
                layout.push((id, d, c));
                id += 1;
            }
        }
    }
    let records: Result<Vec<InstanceRecord>> = layout
        .par_iter()
        .map(|&(record_id, domain, class)| {
            let image = gen_cell_image(class, domain, spec, record_id)?;
            let features = projector.features(&image, spec.feature_dim)?;
            Ok(InstanceRecord {
                record_id,
                features,
                image,
                domain: DomainId(domain),
                label: Some(class),
            })
        })
        .collect();
    Dataset::new(
        records?,
        DatasetMeta {
            feature_dim: spec.feature_dim,
            image_side: spec.image_side,
            num_classes: spec.num_classes,
            num_domains: spec.num_domains,
            seed: spec.seed,
            generator_version: GENERATOR_VERSION,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GenSpec {
        GenSpec {
            num_domains: 2,
            num_classes: 3,
            per_class_per_domain: 4,
            image_side: 32,
            feature_dim: 128,
            seed: 7,
            shifts: default_shifts(2),
        }
    }

    #[test]
    fn cell_image_is_deterministic() {
        let spec = small_spec();
        let a = gen_cell_image(1, 1, &spec, 5).unwrap();
        let b = gen_cell_image(1, 1, &spec, 5).unwrap();
        assert_eq!(a, b);
        let c = gen_cell_image(1, 1, &spec, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_density_leaves_background_clean() {
        let mut rng = seeds::rng(3, &[]);
        let rendered = render_cell(0, 0.0, 32, &mut rng);
        let side = 32;
        for y in 0..side {
            for x in 0..side {
                if !rendered.cell_mask[y * side + x] {
                    for c in 0..3 {
                        assert_eq!(
                            rendered.image.get(c, y, x),
                            BACKGROUND[c].round() as u8,
                            "pixel ({x},{y}) channel {c} is not pure background"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn lobe_count_drives_nucleus_area() {
        // Classes 0 and 1 differ in lobe count; the generator's own
        // masks are the oracle for nucleus pixel counts.
        let mut counts = [0.0f64; 2];
        for class in 0..2u32 {
            let mut total = 0usize;
            for draw in 0..100u64 {
                let mut rng = seeds::rng(11, &[u64::from(class), draw]);
                let rendered = render_cell(class, 0.3, 64, &mut rng);
                total += rendered.nucleus_mask.iter().filter(|&&m| m).count();
            }
            counts[class as usize] = total as f64 / 100.0;
        }
        let rel = (counts[0] - counts[1]).abs() / counts[0].max(counts[1]);
        assert!(
            rel > 0.10,
            "mean nucleus areas {counts:?} differ by only {:.1}%",
            rel * 100.0
        );
    }

    #[test]
    fn identity_transform_is_exact() {
        let spec = small_spec();
        let img = gen_cell_image(0, 0, &spec, 1).unwrap();
        let out = domain_transform(&img, &DomainShift::identity());
        assert_eq!(img, out);
    }

    #[test]
    fn brightness_doubles_mid_gray_with_clamp() {
        let mut img = ImageU8::new(16);
        img.data.fill(100);
        let shift = DomainShift {
            brightness_scale: 2.0,
            ..DomainShift::identity()
        };
        let out = domain_transform(&img, &shift);
        assert!(out.data.iter().all(|&v| v == 200));
        img.data.fill(200);
        let out = domain_transform(&img, &shift);
        assert!(out.data.iter().all(|&v| v == 255));
    }

    #[test]
    fn full_turn_hue_matches_identity_within_rounding() {
        let spec = small_spec();
        let img = gen_cell_image(2, 0, &spec, 9).unwrap();
        let full = domain_transform(
            &img,
            &DomainShift {
                hue_shift_deg: 360.0,
                ..DomainShift::identity()
            },
        );
        let zero = domain_transform(
            &img,
            &DomainShift {
                hue_shift_deg: 0.0,
                ..DomainShift::identity()
            },
        );
        for (a, b) in full.data.iter().zip(zero.data.iter()) {
            assert!((*a as i16 - *b as i16).abs() <= 1);
        }
    }

    #[test]
    fn features_are_deterministic_and_bounded() {
        let spec = small_spec();
        let img = gen_cell_image(0, 1, &spec, 2).unwrap();
        let a = pseudo_roi_features(&img, &spec).unwrap();
        let b = pseudo_roi_features(&img, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), spec.feature_dim);
        assert!(a.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn all_black_image_gives_floor_patch_stats() {
        let spec = small_spec();
        let img = ImageU8::new(spec.image_side);
        let f = pseudo_roi_features(&img, &spec).unwrap();
        // Means of 0 map to -1, variances of 0 map to -1.
        for v in &f[..PATCH_FEATURES] {
            assert!((v + 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let spec = GenSpec {
            num_domains: 3,
            num_classes: 5,
            per_class_per_domain: 2,
            image_side: 32,
            feature_dim: 64,
            seed: 42,
            shifts: default_shifts(3),
        };
        let ds = gen_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 30);
        for d in 0..3u32 {
            let n = ds.records().iter().filter(|r| r.domain.0 == d).count();
            assert_eq!(n, 10);
        }
        let ds2 = gen_dataset(&spec).unwrap();
        assert_eq!(ds, ds2);
    }
}
