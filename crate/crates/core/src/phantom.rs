//! Synthetic abdominal CT phantoms with a hidden VAT ground truth.
//!
//! Geometry lives on integer half-voxel coordinates (voxel `i` of `n` sits at
//! `2i - (n - 1)`), so every point-in-shape test is exact integer arithmetic.
//! Randomness comes from a counter-based hash keyed by the seed, so each voxel's
//! noise depends only on `(seed, voxel index)`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KevsError, Result};
use crate::grid::{BinaryMask, GridGeometry, LabelMap, ScalarVolume};
use crate::nifti;
use crate::schema::{LabelSchema, Role};

pub const SAT_LABEL: u32 = 1;
pub const CAVITY_LABEL: u32 = 2;
/// L1..L5 are `VERTEBRA_LABEL_BASE + 1 ..= + 5`.
pub const VERTEBRA_LABEL_BASE: u32 = 2;
/// Organ k (1-based) is `ORGAN_LABEL_BASE + k`.
pub const ORGAN_LABEL_BASE: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueModel {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Body ellipse semi-axes (x, y) in mm.
    pub body_semi_axes_mm: [f64; 2],
    pub sat_thickness_mm: f64,
    pub vertebra_radius_mm: f64,
    /// Central fraction of the z-range split into the five lumbar bands.
    pub lumbar_extent: f64,
    pub organ_count: usize,
    pub organ_radius_mm: [f64; 2],
    /// Upper bound on the number of VAT blobs.
    pub vat_blob_count: usize,
    pub vat_blob_radius_mm: [f64; 2],
    /// Stop adding blobs once this fraction of the organ-free cavity is VAT.
    pub vat_target_fraction: Option<f64>,
    pub background_hu: f64,
    /// Shared by SAT and VAT.
    pub adipose: TissueModel,
    pub organ: TissueModel,
    pub vertebra: TissueModel,
    pub filler: TissueModel,
    /// Multiplies every tissue standard deviation.
    pub noise_scale: f64,
}

impl Default for PhantomSpec {
    /// Adult-sized torso on a 384 mm field of view.
    fn default() -> Self {
        Self {
            seed: 42,
            dims: [256, 256, 64],
            spacing: [1.5; 3],
            body_semi_axes_mm: [176.0, 136.0],
            sat_thickness_mm: 30.0,
            vertebra_radius_mm: 20.0,
            lumbar_extent: 0.8,
            organ_count: 3,
            organ_radius_mm: [25.0, 40.0],
            vat_blob_count: 600,
            vat_blob_radius_mm: [16.0, 40.0],
            vat_target_fraction: Some(0.85),
            background_hu: -1000.0,
            adipose: TissueModel { mean: -110.0, sd: 20.0 },
            organ: TissueModel { mean: 40.0, sd: 12.0 },
            vertebra: TissueModel { mean: 300.0, sd: 50.0 },
            filler: TissueModel { mean: 10.0, sd: 15.0 },
            noise_scale: 1.0,
        }
    }
}

impl PhantomSpec {
    /// Default anatomy rescaled to another grid: in-plane lengths follow the smaller
    /// in-plane axis, and the blob budget grows with the cavity volume in blob units.
    pub fn with_dims(dims: [usize; 3]) -> Self {
        let d = Self::default();
        let f = dims[0].min(dims[1]) as f64 / 256.0;
        let vol = (dims[0] * dims[1] * dims[2]) as f64 / (256.0 * 256.0 * 64.0);
        Self {
            dims,
            body_semi_axes_mm: d.body_semi_axes_mm.map(|a| a * f),
            sat_thickness_mm: d.sat_thickness_mm * f,
            vertebra_radius_mm: d.vertebra_radius_mm * f,
            organ_radius_mm: d.organ_radius_mm.map(|r| r * f),
            vat_blob_radius_mm: d.vat_blob_radius_mm.map(|r| r * f),
            vat_blob_count: ((d.vat_blob_count as f64) * vol / f.powi(3)).ceil().max(d.vat_blob_count as f64) as usize,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KevsError::InfeasiblePhantom(msg));
        if self.dims.iter().any(|&n| n < 8) {
            return bad(format!("dims {:?} too small (need >= 8 per axis)", self.dims));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        let models = [self.adipose, self.organ, self.vertebra, self.filler];
        if models.iter().any(|m| !(m.sd > 0.0 && m.sd.is_finite() && m.mean.is_finite())) {
            return bad("tissue standard deviations must be finite and > 0".into());
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return bad(format!("noise scale {} must be > 0", self.noise_scale));
        }
        let [a, b] = self.body_semi_axes_mm;
        for (axis, semi) in [(0, a), (1, b)] {
            let half_extent = (self.dims[axis] as f64 - 1.0) * self.spacing[axis] / 2.0;
            if !(semi > 0.0 && semi < half_extent) {
                return bad(format!("body semi-axis {semi} mm does not fit the grid along axis {axis}"));
            }
        }
        let t = self.sat_thickness_mm;
        if !(t > 0.0 && a - t > 2.0 * self.vertebra_radius_mm && b - t > 2.0 * self.vertebra_radius_mm) {
            return bad("SAT thickness and vertebra leave no abdominal cavity".into());
        }
        if self.vertebra_radius_mm.is_nan() || self.vertebra_radius_mm <= 0.0 {
            return bad("vertebra radius must be > 0".into());
        }
        for (name, [lo, hi]) in [("organ", self.organ_radius_mm), ("VAT blob", self.vat_blob_radius_mm)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} radius range [{lo}, {hi}] invalid"));
            }
        }
        if !(self.lumbar_extent > 0.0 && self.lumbar_extent <= 1.0) {
            return bad(format!("lumbar extent {} not in (0, 1]", self.lumbar_extent));
        }
        if lumbar_bands(self.dims[2], self.lumbar_extent).iter().any(|(lo, hi)| lo >= hi) {
            return bad("too few slices for five lumbar bands".into());
        }
        if let Some(f) = self.vat_target_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("VAT target fraction {f} not in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in half-voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub centre: [i64; 3],
    pub semi_axes: [i64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [i64; 3]) -> bool {
        let d: [i128; 3] = std::array::from_fn(|a| (p[a] - self.centre[a]) as i128);
        let r2: [i128; 3] = self.semi_axes.map(|r| (r as i128) * (r as i128));
        d[0] * d[0] * r2[1] * r2[2] + d[1] * d[1] * r2[0] * r2[2] + d[2] * d[2] * r2[0] * r2[1] <= r2[0] * r2[1] * r2[2]
    }
}

/// Axis-aligned ellipse in the axial plane, in half-voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ellipse {
    pub centre: [i64; 2],
    pub semi_axes: [i64; 2],
}

impl Ellipse {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        let (dx, dy) = ((x - self.centre[0]) as i128, (y - self.centre[1]) as i128);
        let (a2, b2) = (
            (self.semi_axes[0] as i128).pow(2),
            (self.semi_axes[1] as i128).pow(2),
        );
        dx * dx * b2 + dy * dy * a2 <= a2 * b2
    }
}

/// Shapes actually placed by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomLayout {
    pub body: Ellipse,
    pub cavity: Ellipse,
    pub vertebra: Ellipse,
    /// Half-open z ranges for L1..L5 (L1 highest).
    pub lumbar_bands: [(usize, usize); 5],
    pub organs: Vec<Ellipsoid>,
    pub vat_blobs: Vec<Ellipsoid>,
}

#[inline]
pub fn half_voxel(i: usize, n: usize) -> i64 {
    2 * i as i64 - (n as i64 - 1)
}

fn to_half(mm: f64, spacing: f64) -> i64 {
    (2.0 * mm / spacing).round() as i64
}

fn lumbar_bands(nz: usize, extent: f64) -> [(usize, usize); 5] {
    let span = ((nz as f64 * extent).round() as usize).min(nz);
    let start = (nz - span) / 2;
    // band 0 is the lowest slab (L5)
    let edge = |k: usize| start + k * span / 5;
    std::array::from_fn(|level| {
        let k = 4 - level;
        (edge(k), edge(k + 1))
    })
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LAYOUT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit value for `(seed, stream, counter)`.
pub fn counter_u64(seed: u64, stream: u64, counter: u64) -> u64 {
    let key = splitmix(seed ^ splitmix(stream.wrapping_mul(GOLDEN)));
    splitmix(key.wrapping_add(counter.wrapping_mul(GOLDEN)))
}

/// Uniform on the open interval (0, 1).
fn to_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw for `(seed, stream, counter)` via Box-Muller.
pub fn counter_normal(seed: u64, stream: u64, counter: u64) -> f64 {
    let u1 = to_unit(counter_u64(seed, stream, 2 * counter));
    let u2 = to_unit(counter_u64(seed, stream, 2 * counter + 1));
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

struct Stream {
    seed: u64,
    counter: u64,
}

impl Stream {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = to_unit(counter_u64(self.seed, LAYOUT_STREAM, self.counter));
        self.counter += 1;
        lo + (hi - lo) * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Adipose,
    Organ,
    Bone,
    Filler,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub ct: ScalarVolume,
    pub labels: LabelMap,
    pub gt_vat: BinaryMask,
    pub layout: PhantomLayout,
}

/// Label schema of a phantom with `organ_count` organs named `organ_1`...
pub fn phantom_schema(organ_count: usize) -> LabelSchema {
    let mut b = LabelSchema::builder().sat(SAT_LABEL).abdominal_cavity(CAVITY_LABEL);
    for level in 1..=5u8 {
        b = b.vertebra(level, VERTEBRA_LABEL_BASE + level as u32);
    }
    for k in 1..=organ_count {
        b = b.organ(&format!("organ_{k}"), ORGAN_LABEL_BASE + k as u32);
    }
    b.build().expect("phantom schema is injective")
}

/// Organ centres and radii in mm.
type Placed = Vec<([f64; 3], f64)>;

fn place_layout(spec: &PhantomSpec) -> Result<(PhantomLayout, Placed)> {
    let s = spec.spacing;
    let [a, b] = spec.body_semi_axes_mm;
    let t = spec.sat_thickness_mm;
    let (a_in, b_in) = (a - t, b - t);
    let rv = spec.vertebra_radius_mm;
    let vy = b_in - rv - 3.0;
    let body = Ellipse { centre: [0, 0], semi_axes: [to_half(a, s[0]), to_half(b, s[1])] };
    let cavity = Ellipse { centre: [0, 0], semi_axes: [to_half(a_in, s[0]), to_half(b_in, s[1])] };
    let vertebra = Ellipse { centre: [0, to_half(vy, s[1])], semi_axes: [to_half(rv, s[0]), to_half(rv, s[1])] };
    let nz = spec.dims[2];
    let z_half = (nz as f64 - 1.0) * s[2] / 2.0;

    let mut rng = Stream { seed: spec.seed, counter: 0 };
    let gap = 3.0;
    let mut placed: Vec<([f64; 3], f64)> = Vec::new();
    for k in 0..spec.organ_count {
        let mut ok = false;
        for _ in 0..10_000 {
            let r = rng.uniform(spec.organ_radius_mm[0], spec.organ_radius_mm[1]);
            let c = [rng.uniform(-a_in, a_in), rng.uniform(-b_in, b_in), rng.uniform(-z_half, z_half)];
            let (ea, eb) = (a_in - r - gap, b_in - r - gap);
            if ea <= 0.0 || eb <= 0.0 || (c[0] / ea).powi(2) + (c[1] / eb).powi(2) > 1.0 {
                continue;
            }
            if c[2].abs() + r > z_half {
                continue;
            }
            if (c[0].powi(2) + (c[1] - vy).powi(2)).sqrt() < r + rv + gap {
                continue;
            }
            let dist = |p: &[f64; 3]| ((0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>()).sqrt();
            if placed.iter().any(|(p, q)| dist(p) < r + q + gap) {
                continue;
            }
            placed.push((c, r));
            ok = true;
            break;
        }
        if !ok {
            return Err(KevsError::InfeasiblePhantom(format!(
                "could not place organ {} of {} without overlap",
                k + 1,
                spec.organ_count
            )));
        }
    }
    let organs = placed
        .iter()
        .map(|(c, r)| Ellipsoid {
            centre: std::array::from_fn(|i| to_half(c[i], s[i])),
            semi_axes: std::array::from_fn(|i| to_half(*r, s[i]).max(1)),
        })
        .collect();

    let mut vat_blobs = Vec::with_capacity(spec.vat_blob_count);
    for _ in 0..spec.vat_blob_count {
        let c = [rng.uniform(-a_in, a_in), rng.uniform(-b_in, b_in), rng.uniform(-z_half, z_half)];
        let [lo, hi] = spec.vat_blob_radius_mm;
        let r = [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)];
        vat_blobs.push(Ellipsoid {
            centre: std::array::from_fn(|i| to_half(c[i], s[i])),
            semi_axes: std::array::from_fn(|i| to_half(r[i], s[i]).max(1)),
        });
    }
    Ok((
        PhantomLayout {
            body,
            cavity,
            vertebra,
            lumbar_bands: lumbar_bands(nz, spec.lumbar_extent),
            organs,
            vat_blobs,
        },
        placed,
    ))
}

/// Voxel index range `[lo, hi]` covered by `centre ± semi` (half-voxel units) on an axis of `n`.
fn axis_span(centre: i64, semi: i64, n: usize) -> Option<(usize, usize)> {
    let n1 = n as i64 - 1;
    // half-voxel h = 2i - n1  =>  i = (h + n1) / 2
    let lo = (centre - semi + n1 + 1).div_euclid(2).max(0);
    let hi = (centre + semi + n1).div_euclid(2).min(n1);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (mut layout, _) = place_layout(spec)?;
    let geometry = GridGeometry::new(spec.dims, spec.spacing, [0.0; 3])?;
    let [nx, ny, nz] = spec.dims;
    let plane = nx * ny;

    let mut labels = vec![0u32; geometry.len()];
    let mut tissue = vec![Tissue::Background; geometry.len()];
    labels
        .par_chunks_mut(plane)
        .zip(tissue.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(z, (lab, tis))| {
            let hz = half_voxel(z, nz);
            let band = layout.lumbar_bands.iter().position(|&(lo, hi)| (lo..hi).contains(&z));
            for y in 0..ny {
                let hy = half_voxel(y, ny);
                for x in 0..nx {
                    let hx = half_voxel(x, nx);
                    let i = x + nx * y;
                    let (l, t) = if !layout.body.contains(hx, hy) {
                        (0, Tissue::Background)
                    } else if !layout.cavity.contains(hx, hy) {
                        (SAT_LABEL, Tissue::Adipose)
                    } else if layout.vertebra.contains(hx, hy) {
                        (band.map_or(0, |lv| VERTEBRA_LABEL_BASE + 1 + lv as u32), Tissue::Bone)
                    } else if let Some(k) = layout.organs.iter().position(|o| o.contains([hx, hy, hz])) {
                        (ORGAN_LABEL_BASE + 1 + k as u32, Tissue::Organ)
                    } else {
                        (CAVITY_LABEL, Tissue::Filler)
                    };
                    lab[i] = l;
                    tis[i] = t;
                }
            }
        });

    // blobs are rasterised in order until the VAT share of the organ-free cavity reaches the target
    let eligible = labels.iter().filter(|&&l| l == CAVITY_LABEL).count();
    let target = spec.vat_target_fraction.map(|f| (f * eligible as f64).ceil() as usize);
    let mut vat = vec![false; geometry.len()];
    let mut covered = 0usize;
    let mut used = 0usize;
    for blob in &layout.vat_blobs {
        if target.is_some_and(|t| covered >= t) {
            break;
        }
        used += 1;
        let spans: Vec<Option<(usize, usize)>> =
            (0..3).map(|a| axis_span(blob.centre[a], blob.semi_axes[a], spec.dims[a])).collect();
        let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) = (spans[0], spans[1], spans[2]) else {
            continue;
        };
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = x + nx * (y + ny * z);
                    if labels[i] == CAVITY_LABEL
                        && !vat[i]
                        && blob.contains([half_voxel(x, nx), half_voxel(y, ny), half_voxel(z, nz)])
                    {
                        vat[i] = true;
                        covered += 1;
                    }
                }
            }
        }
    }
    layout.vat_blobs.truncate(used);

    let noise = spec.noise_scale;
    let seed = spec.seed;
    let data: Vec<f32> = (0..geometry.len())
        .into_par_iter()
        .map(|i| {
            let model = match tissue[i] {
                Tissue::Background => return spec.background_hu as f32,
                Tissue::Adipose => spec.adipose,
                Tissue::Filler if vat[i] => spec.adipose,
                Tissue::Filler => spec.filler,
                Tissue::Organ => spec.organ,
                Tissue::Bone => spec.vertebra,
            };
            (model.mean + model.sd * noise * counter_normal(seed, NOISE_STREAM, i as u64)) as f32
        })
        .collect();

    let schema = phantom_schema(spec.organ_count);
    Ok(Phantom {
        ct: ScalarVolume::new(geometry.clone(), data)?,
        labels: LabelMap::new(geometry.clone(), labels, schema)?,
        gt_vat: BinaryMask::new(geometry, vat)?,
        layout,
    })
}

/// One phantom case; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub id: String,
    pub seed: u64,
    pub noise_scale: f64,
    pub ct: PathBuf,
    pub labels: PathBuf,
    pub gt_vat: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub schema: PathBuf,
    pub base_spec: PhantomSpec,
    pub cases: Vec<SuiteCase>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "schema.json";

impl SuiteManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| KevsError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn case_id(seed: u64, noise_scale: f64) -> String {
    format!("seed{seed}_noise{noise_scale}")
}

/// Writes one case's volumes into `dir` and returns its manifest entry.
pub fn write_case(dir: &Path, spec: &PhantomSpec) -> Result<SuiteCase> {
    let p = generate_phantom(spec)?;
    let id = case_id(spec.seed, spec.noise_scale);
    let name = |what: &str| PathBuf::from(format!("{id}_{what}.nii.gz"));
    let case = SuiteCase {
        id: id.clone(),
        seed: spec.seed,
        noise_scale: spec.noise_scale,
        ct: name("ct"),
        labels: name("labels"),
        gt_vat: name("gt_vat"),
    };
    nifti::write_scalar(&p.ct, dir.join(&case.ct))?;
    nifti::write_labels(&p.labels, dir.join(&case.labels))?;
    nifti::write_mask(&p.gt_vat, dir.join(&case.gt_vat))?;
    Ok(case)
}

/// Generates every `(seed, noise)` combination into `out_dir` with a shared schema and a manifest.
pub fn phantom_suite(out_dir: impl AsRef<Path>, base: &PhantomSpec, seeds: &[u64], noise_scales: &[f64]) -> Result<SuiteManifest> {
    let dir = out_dir.as_ref();
    if seeds.is_empty() || noise_scales.is_empty() {
        return Err(KevsError::InvalidArgument("phantom suite needs at least one seed and one noise scale".into()));
    }
    base.validate()?;
    fs::create_dir_all(dir).map_err(|e| KevsError::io(dir, e))?;
    let mut cases = Vec::new();
    for &seed in seeds {
        for &noise_scale in noise_scales {
            let spec = PhantomSpec { seed, noise_scale, ..base.clone() };
            cases.push(write_case(dir, &spec)?);
        }
    }
    phantom_schema(base.organ_count).save(dir.join(SCHEMA_FILE))?;
    let manifest = SuiteManifest { schema: PathBuf::from(SCHEMA_FILE), base_spec: base.clone(), cases };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| KevsError::io(&path, e))?;
    Ok(manifest)
}

/// Union of the phantom's organ labels.
pub fn organ_roles(organ_count: usize) -> Vec<Role> {
    (1..=organ_count).map(|k| Role::Organ(format!("organ_{k}"))).collect()
}
