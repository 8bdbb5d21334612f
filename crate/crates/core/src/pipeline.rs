//! VAT segmentation: SAT-informed density rejection over the organ-free
//! abdominal cavity, plus fixed-window HU thresholding baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{fit_gkde, pd_rank_and_cut, BandwidthMode, Candidate, DensityModel, SampleSet, DEFAULT_GRID_SIZE};
use crate::error::{KevsError, Result};
use crate::grid::{BinaryMask, LabelMap, ScalarVolume, CANONICAL_SPACING};
use crate::maskops::{
    crop_to_z, erode_to_fraction, extract_role, extract_roles, mask_subtract, median_z, z_extent, SliceMask,
    StructuringElement,
};
use crate::resample::{resample_nearest, resample_trilinear};
use crate::schema::Role;

/// Inclusive HU window `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct ThresholdRange {
    lo: f64,
    hi: f64,
}

impl ThresholdRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(KevsError::InvalidArgument(format!(
                "threshold range needs finite lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn contains(&self, hu: f64) -> bool {
        self.lo <= hu && hu <= self.hi
    }
}

impl TryFrom<(f64, f64)> for ThresholdRange {
    type Error = KevsError;

    fn try_from((lo, hi): (f64, f64)) -> Result<Self> {
        Self::new(lo, hi)
    }
}

impl From<ThresholdRange> for (f64, f64) {
    fn from(r: ThresholdRange) -> Self {
        (r.lo, r.hi)
    }
}

impl fmt::Display for ThresholdRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl FromStr for ThresholdRange {
    type Err = KevsError;

    /// Parses `lo:hi`, e.g. `-190:-30`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || KevsError::InvalidArgument(format!("malformed range `{s}`, expected lo:hi"));
        let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        Self::new(lo, hi)
    }
}

/// The five fixed windows used as thresholding baselines.
pub fn default_threshold_ranges() -> Vec<ThresholdRange> {
    [(-190.0, -30.0), (-195.0, -45.0), (-200.0, -10.0), (-200.0, -20.0), (-250.0, -50.0)]
        .into_iter()
        .map(|(lo, hi)| ThresholdRange { lo, hi })
        .collect()
}

/// Evaluation / output region along z.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsMode {
    #[default]
    FullCavity,
    /// Restricted to the z-range of the lumbar vertebrae.
    VertebralBounds,
}

impl fmt::Display for BoundsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundsMode::FullCavity => "full_cavity",
            BoundsMode::VertebralBounds => "vertebral_bounds",
        })
    }
}

impl FromStr for BoundsMode {
    type Err = KevsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_cavity" => Ok(BoundsMode::FullCavity),
            "lumbar" | "vertebral_bounds" => Ok(BoundsMode::VertebralBounds),
            _ => Err(KevsError::InvalidArgument(format!("bounds `{s}` is not one of full, lumbar"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub reject_fraction: f64,
    pub erosion_fraction: f64,
    pub kde_grid_size: usize,
    pub canonical_spacing: [f64; 3],
    /// Organ roles removed from the cavity; `None` means every organ in the schema.
    pub organ_roles: Option<Vec<Role>>,
    pub threshold_ranges: Vec<ThresholdRange>,
    pub bounds_mode: BoundsMode,
    pub bandwidth_mode: BandwidthMode,
    pub structuring_element: StructuringElement,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            reject_fraction: 0.15,
            erosion_fraction: 0.20,
            kde_grid_size: DEFAULT_GRID_SIZE,
            canonical_spacing: CANONICAL_SPACING,
            organ_roles: None,
            threshold_ranges: default_threshold_ranges(),
            bounds_mode: BoundsMode::FullCavity,
            bandwidth_mode: BandwidthMode::ScottSigma,
            structuring_element: StructuringElement::Cross,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.reject_fraction) {
            return Err(KevsError::InvalidArgument(format!(
                "reject fraction {} not in [0, 1)",
                self.reject_fraction
            )));
        }
        if !(self.erosion_fraction > 0.0 && self.erosion_fraction <= 1.0) {
            return Err(KevsError::InvalidArgument(format!(
                "erosion fraction {} not in (0, 1]",
                self.erosion_fraction
            )));
        }
        if self.kde_grid_size < 2 {
            return Err(KevsError::InvalidArgument(format!(
                "KDE grid size must be >= 2, got {}",
                self.kde_grid_size
            )));
        }
        if self.canonical_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(KevsError::InvalidArgument(format!(
                "canonical spacing must be positive, got {:?}",
                self.canonical_spacing
            )));
        }
        for r in &self.threshold_ranges {
            ThresholdRange::new(r.lo, r.hi)?;
        }
        if let Some(roles) = &self.organ_roles {
            if let Some(r) = roles.iter().find(|r| !matches!(r, Role::Organ(_))) {
                return Err(KevsError::InvalidArgument(format!("`{r}` is not an organ role")));
            }
        }
        Ok(())
    }

    fn organ_roles_for(&self, l: &LabelMap) -> Vec<Role> {
        match &self.organ_roles {
            Some(r) => r.clone(),
            None => l.schema().organ_roles(),
        }
    }
}

/// Checks the pair shares a grid and resamples both to the canonical spacing.
pub fn prepare_inputs(v: &ScalarVolume, l: &LabelMap, cfg: &PipelineConfig) -> Result<(ScalarVolume, LabelMap)> {
    v.geometry().ensure_same(l.geometry(), "CT volume vs label map")?;
    let spacing = v.geometry().spacing();
    if spacing == cfg.canonical_spacing {
        return Ok((v.clone(), l.clone()));
    }
    Ok((
        resample_trilinear(v, cfg.canonical_spacing)?,
        resample_nearest(l, cfg.canonical_spacing)?,
    ))
}

/// Union of the configured organ masks (empty when no organs are configured).
pub fn organ_union(l: &LabelMap, cfg: &PipelineConfig) -> Result<BinaryMask> {
    extract_roles(l, &cfg.organ_roles_for(l))
}

/// Cavity voxels not covered by any configured organ.
pub fn organ_free_cavity(l: &LabelMap, cfg: &PipelineConfig) -> Result<BinaryMask> {
    let cavity = extract_role(l, &Role::AbdominalCavity)?;
    mask_subtract(&cavity, &organ_union(l, cfg)?)
}

/// The anatomical cavity: cavity label together with the organ labels that sit inside it.
pub fn full_cavity_region(l: &LabelMap, cfg: &PipelineConfig) -> Result<BinaryMask> {
    let mut roles = cfg.organ_roles_for(l);
    roles.push(Role::AbdominalCavity);
    extract_roles(l, &roles)
}

/// Inclusive z-range of the lumbar vertebrae present in the schema.
pub fn lumbar_z_range(l: &LabelMap) -> Result<(usize, usize)> {
    let roles = l.schema().lumbar_roles();
    if roles.is_empty() {
        return Err(KevsError::MissingRole("vertebra_L1..L5".into()));
    }
    let masks = roles.iter().map(|r| extract_role(l, r)).collect::<Result<Vec<_>>>()?;
    z_extent(&masks.iter().collect::<Vec<_>>())
}

pub fn crop_to_lumbar(m: &BinaryMask, l: &LabelMap) -> Result<BinaryMask> {
    m.geometry().ensure_same(l.geometry(), "mask vs label map")?;
    let (lo, hi) = lumbar_z_range(l)?;
    crop_to_z(m, lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatSamples {
    pub samples: SampleSet,
    /// Axial slice the samples were taken from.
    pub z: usize,
    pub original_area: usize,
    pub erosion_iterations: usize,
    pub degenerate_erosion: bool,
    /// Linear voxel indices of the sampled pixels.
    pub voxels: Vec<usize>,
}

/// Intensities of the eroded SAT ring on the median L3 slice.
pub fn sat_l3_samples(v: &ScalarVolume, l: &LabelMap, cfg: &PipelineConfig) -> Result<SatSamples> {
    v.geometry().ensure_same(l.geometry(), "CT volume vs label map")?;
    let sat = extract_role(l, &Role::Sat)?;
    let l3 = extract_role(l, &Role::Vertebra(3))?;
    let z = median_z(&l3).map_err(|_| KevsError::EmptyMask("vertebra_L3 mask is empty".into()))?;
    let slice = SliceMask::from_mask(&sat, z)?;
    if slice.is_empty() {
        return Err(KevsError::EmptyMask(format!("empty SAT slice at L3 level z={z}")));
    }
    let outcome = erode_to_fraction(&slice, cfg.erosion_fraction, cfg.structuring_element)?;
    let voxels: Vec<usize> = outcome.mask.volume_indices().collect();
    let values = voxels.iter().map(|&i| v.data()[i] as f64).collect();
    let samples = SampleSet::new(values)?;
    Ok(SatSamples {
        samples,
        z,
        original_area: slice.area(),
        erosion_iterations: outcome.iterations,
        degenerate_erosion: outcome.degenerate,
        voxels,
    })
}

/// Wall time per stage, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub masks: f64,
    pub sat_sampling: f64,
    pub kde_fit: f64,
    pub scoring: f64,
    pub rank_and_cut: f64,
    pub crop: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.masks + self.sat_sampling + self.kde_fit + self.scoring + self.rank_and_cut + self.crop
    }
}

#[derive(Debug, Clone)]
pub struct VatResult {
    pub vat_mask: BinaryMask,
    pub kde: DensityModel,
    pub sat_slice_z: usize,
    pub sat_sample_count: usize,
    pub erosion_iterations: usize,
    pub degenerate_erosion: bool,
    /// Organ-free cavity size `m`.
    pub candidate_count: usize,
    /// `k = floor(reject_fraction * m)`.
    pub removed_count: usize,
    pub timings: StageTimings,
    pub warnings: Vec<String>,
}

fn elapsed(t: &mut Instant) -> f64 {
    let now = Instant::now();
    let s = now.duration_since(*t).as_secs_f64();
    *t = now;
    s
}

/// Runs the density-rejection segmentation on inputs already on a shared grid.
pub fn kevs_segment(v: &ScalarVolume, l: &LabelMap, cfg: &PipelineConfig) -> Result<VatResult> {
    cfg.validate()?;
    v.geometry().ensure_same(l.geometry(), "CT volume vs label map")?;
    l.schema().require_pipeline_roles()?;
    let mut timings = StageTimings::default();
    let mut clock = Instant::now();

    let region = organ_free_cavity(l, cfg)?;
    timings.masks = elapsed(&mut clock);

    let sat = sat_l3_samples(v, l, cfg)?;
    let mut warnings = Vec::new();
    if sat.degenerate_erosion {
        warnings.push(format!(
            "SAT erosion at z={} emptied the slice before reaching {:.0}% of its area; using the last nonempty iterate ({} px)",
            sat.z,
            cfg.erosion_fraction * 100.0,
            sat.samples.len()
        ));
    }
    timings.sat_sampling = elapsed(&mut clock);

    let kde = fit_gkde(&sat.samples, cfg.kde_grid_size, cfg.bandwidth_mode)?;
    timings.kde_fit = elapsed(&mut clock);

    let data = v.data();
    let indices: Vec<usize> = region.indices().collect();
    let m = indices.len();
    if m == 0 {
        return Err(KevsError::EmptyMask("organ-free abdominal cavity is empty".into()));
    }
    let candidates: Vec<Candidate> = indices
        .par_iter()
        .map(|&index| {
            let off = kde.offset_of(data[index] as f64);
            Candidate { index, pd: kde.eval_offset(off), intensity: off }
        })
        .collect();
    timings.scoring = elapsed(&mut clock);

    let kept = pd_rank_and_cut(&candidates, cfg.reject_fraction, kde.mean_offset())?;
    drop(candidates);
    let mut bits = vec![false; v.geometry().len()];
    for i in &kept {
        bits[*i] = true;
    }
    let mut vat_mask = BinaryMask::new(v.geometry().clone(), bits)?;
    timings.rank_and_cut = elapsed(&mut clock);

    if cfg.bounds_mode == BoundsMode::VertebralBounds {
        vat_mask = crop_to_lumbar(&vat_mask, l)?;
    }
    timings.crop = elapsed(&mut clock);

    Ok(VatResult {
        vat_mask,
        kde,
        sat_slice_z: sat.z,
        sat_sample_count: sat.samples.len(),
        erosion_iterations: sat.erosion_iterations,
        degenerate_erosion: sat.degenerate_erosion,
        candidate_count: m,
        removed_count: m - kept.len(),
        timings,
        warnings,
    })
}

/// Voxels of `region` whose intensity lies in the window.
pub fn threshold_segment(v: &ScalarVolume, region: &BinaryMask, range: ThresholdRange) -> Result<BinaryMask> {
    v.geometry().ensure_same(region.geometry(), "CT volume vs region")?;
    let bits = v
        .data()
        .par_iter()
        .zip(region.bits().par_iter())
        .map(|(&hu, &r)| r && range.contains(hu as f64))
        .collect();
    BinaryMask::new(v.geometry().clone(), bits)
}

/// Thresholding over the anatomical cavity (organs included).
pub fn threshold_on_full_cavity(
    v: &ScalarVolume,
    l: &LabelMap,
    range: ThresholdRange,
    cfg: &PipelineConfig,
) -> Result<BinaryMask> {
    threshold_segment(v, &full_cavity_region(l, cfg)?, range)
}

/// Thresholding restricted to the organ-free cavity.
pub fn threshold_on_organ_free_cavity(
    v: &ScalarVolume,
    l: &LabelMap,
    range: ThresholdRange,
    cfg: &PipelineConfig,
) -> Result<BinaryMask> {
    threshold_segment(v, &organ_free_cavity(l, cfg)?, range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use crate::schema::LabelSchema;

    #[test]
    fn range_parsing() {
        let r: ThresholdRange = "-190:-30".parse().unwrap();
        assert_eq!((r.lo(), r.hi()), (-190.0, -30.0));
        assert_eq!(r.to_string(), "-190:-30");
        for bad in ["-190", "a:b", "-30:-190", "5:5", ":", "-190:-30:1", "nan:1"] {
            assert!(bad.parse::<ThresholdRange>().is_err(), "{bad}");
        }
        assert!(r.contains(-190.0) && r.contains(-30.0) && !r.contains(-29.999));
        assert_eq!(default_threshold_ranges().len(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = [
            PipelineConfig { reject_fraction: 1.0, ..Default::default() },
            PipelineConfig { reject_fraction: -0.01, ..Default::default() },
            PipelineConfig { erosion_fraction: 0.0, ..Default::default() },
            PipelineConfig { erosion_fraction: 1.5, ..Default::default() },
            PipelineConfig { kde_grid_size: 1, ..Default::default() },
            PipelineConfig { organ_roles: Some(vec![Role::Sat]), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        let toml_like = r#"{"reject_fraction": 0.1, "threshold_ranges": [[-190.0, -30.0]], "bounds_mode": "vertebral_bounds"}"#;
        let c: PipelineConfig = serde_json::from_str(toml_like).unwrap();
        assert_eq!(c.reject_fraction, 0.1);
        assert_eq!(c.erosion_fraction, 0.2);
        assert_eq!(c.bounds_mode, BoundsMode::VertebralBounds);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"threshold_ranges": [[-30.0, -190.0]]}"#).is_err());
    }

    #[test]
    fn bounds_parsing() {
        assert_eq!("full".parse::<BoundsMode>().unwrap(), BoundsMode::FullCavity);
        assert_eq!("lumbar".parse::<BoundsMode>().unwrap(), BoundsMode::VertebralBounds);
        assert!("lumbr".parse::<BoundsMode>().is_err());
    }

    /// 12x12xZ toy: SAT frame of width 3 on every slice, cavity inside, L3 on slices 1..=3,
    /// an organ block, cavity intensities from a ramp.
    fn toy(nz: usize) -> (ScalarVolume, LabelMap) {
        let schema = LabelSchema::builder()
            .sat(1)
            .abdominal_cavity(2)
            .vertebra(3, 3)
            .organ("liver", 10)
            .build()
            .unwrap();
        let g = GridGeometry::new([12, 12, nz], [1.5; 3], [0.0; 3]).unwrap();
        let mut labels = vec![0u32; g.len()];
        let mut hu = vec![-1000f32; g.len()];
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            let edge = x.min(y).min(11 - x).min(11 - y);
            if edge < 3 {
                labels[i] = 1;
                hu[i] = -100.0 + ((x * 7 + y * 3) % 11) as f32;
            } else if x == 5 && y == 5 && (1..=3).contains(&z) {
                labels[i] = 3;
                hu[i] = 300.0;
            } else if x >= 7 && y >= 7 {
                labels[i] = 10;
                hu[i] = 40.0;
            } else {
                labels[i] = 2;
                hu[i] = -120.0 + ((i * 37) % 200) as f32;
            }
        }
        (
            ScalarVolume::new(g.clone(), hu).unwrap(),
            LabelMap::new(g, labels, schema).unwrap(),
        )
    }

    #[test]
    fn organ_free_cavity_counts() {
        let (_, l) = toy(4);
        let cfg = PipelineConfig::default();
        let cavity = extract_role(&l, &Role::AbdominalCavity).unwrap();
        let organs = organ_union(&l, &cfg).unwrap();
        let free = organ_free_cavity(&l, &cfg).unwrap();
        assert_eq!(free, cavity);
        assert!(organs.count() > 0);
        let full = full_cavity_region(&l, &cfg).unwrap();
        assert_eq!(full.count(), cavity.count() + organs.count());
        let none = PipelineConfig { organ_roles: Some(vec![]), ..Default::default() };
        assert!(organ_union(&l, &none).unwrap().is_empty());
    }

    #[test]
    fn sat_samples_follow_erosion() {
        let (v, l) = toy(5);
        let cfg = PipelineConfig::default();
        let s = sat_l3_samples(&v, &l, &cfg).unwrap();
        assert_eq!(s.z, 2);
        // frame of width 3 on 12x12: 144 - 36 = 108 px; a 4-connected erosion peels one ring
        assert_eq!(s.original_area, 108);
        assert!(s.samples.len() as f64 <= 0.2 * 108.0 || s.degenerate_erosion);
        for (&i, &x) in s.voxels.iter().zip(s.samples.values()) {
            assert_eq!(x, v.data()[i] as f64);
            assert_eq!(l.data()[i], 1);
        }
        let all = PipelineConfig { erosion_fraction: 1.0, ..Default::default() };
        assert_eq!(sat_l3_samples(&v, &l, &all).unwrap().samples.len(), 108);
    }

    #[test]
    fn missing_sat_on_l3_slice_is_error() {
        let (v, l) = toy(5);
        let g = l.geometry().clone();
        let data: Vec<u32> = l
            .data()
            .iter()
            .enumerate()
            .map(|(i, &lab)| if lab == 1 && g.coords(i)[2] == 2 { 0 } else { lab })
            .collect();
        let l = LabelMap::new(g, data, l.schema().clone()).unwrap();
        let err = sat_l3_samples(&v, &l, &PipelineConfig::default()).unwrap_err();
        assert!(err.to_string().contains("empty SAT slice"));
    }

    #[test]
    fn segment_counts_and_exclusion() {
        let (v, l) = toy(5);
        let cfg = PipelineConfig::default();
        let r = kevs_segment(&v, &l, &cfg).unwrap();
        let m = organ_free_cavity(&l, &cfg).unwrap().count();
        assert_eq!(r.candidate_count, m);
        assert_eq!(r.removed_count, (0.15 * m as f64).floor() as usize);
        assert_eq!(r.vat_mask.count(), m - r.removed_count);
        let organs = organ_union(&l, &cfg).unwrap();
        assert!(r.vat_mask.indices().all(|i| !organs.bits()[i]));

        let zero = PipelineConfig { reject_fraction: 0.0, ..Default::default() };
        assert_eq!(kevs_segment(&v, &l, &zero).unwrap().vat_mask, organ_free_cavity(&l, &zero).unwrap());

        let lumbar = PipelineConfig { bounds_mode: BoundsMode::VertebralBounds, ..Default::default() };
        let c = kevs_segment(&v, &l, &lumbar).unwrap();
        assert!(c.vat_mask.indices().all(|i| (1..=3).contains(&v.geometry().coords(i)[2])));
        assert_eq!(c.vat_mask, crop_to_z(&r.vat_mask, 1, 3).unwrap());
    }

    #[test]
    fn monotone_in_reject_fraction() {
        let (v, l) = toy(5);
        let mut prev: Option<BinaryMask> = None;
        for f in [0.0, 0.05, 0.15, 0.4, 0.9] {
            let cfg = PipelineConfig { reject_fraction: f, ..Default::default() };
            let m = kevs_segment(&v, &l, &cfg).unwrap().vat_mask;
            if let Some(p) = &prev {
                assert!(m.indices().all(|i| p.bits()[i]));
            }
            prev = Some(m);
        }
    }

    #[test]
    fn intensity_shift_keeps_selection() {
        let (v, l) = toy(5);
        let cfg = PipelineConfig::default();
        let a = kevs_segment(&v, &l, &cfg).unwrap().vat_mask;
        for c in [-37.0, 250.0] {
            let b = kevs_segment(&v.shifted(c).unwrap(), &l, &cfg).unwrap().vat_mask;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn thresholding() {
        let (v, l) = toy(4);
        let cfg = PipelineConfig::default();
        let r = ThresholdRange::new(-190.0, -30.0).unwrap();
        let empty = BinaryMask::empty(v.geometry().clone());
        assert!(threshold_segment(&v, &empty, r).unwrap().is_empty());
        let uniform = ScalarVolume::filled(v.geometry().clone(), -100.0).unwrap();
        let region = full_cavity_region(&l, &cfg).unwrap();
        assert_eq!(threshold_segment(&uniform, &region, r).unwrap(), region);
        let t = threshold_on_organ_free_cavity(&v, &l, r, &cfg).unwrap();
        let free = organ_free_cavity(&l, &cfg).unwrap();
        let expected = (0..v.geometry().len())
            .filter(|&i| free.bits()[i] && (-190.0..=-30.0).contains(&v.data()[i]))
            .count();
        assert_eq!(t.count(), expected);
        let other = GridGeometry::new([3, 3, 3], [1.5; 3], [0.0; 3]).unwrap();
        assert!(threshold_segment(&v, &BinaryMask::empty(other), r).is_err());
    }

    #[test]
    fn prepare_resamples_and_checks_geometry() {
        let (v, l) = toy(4);
        let cfg = PipelineConfig::default();
        let (v2, l2) = prepare_inputs(&v, &l, &cfg).unwrap();
        assert_eq!(v2, v);
        assert_eq!(l2, l);
        let coarse = PipelineConfig { canonical_spacing: [3.0; 3], ..Default::default() };
        let (v3, l3) = prepare_inputs(&v, &l, &coarse).unwrap();
        assert_eq!(v3.geometry().dims(), [6, 6, 2]);
        assert!(v3.geometry().same_grid(l3.geometry()));
        let g = GridGeometry::new([12, 12, 4], [1.0; 3], [0.0; 3]).unwrap();
        let other = ScalarVolume::filled(g, 0.0).unwrap();
        assert!(matches!(prepare_inputs(&other, &l, &cfg), Err(KevsError::GeometryMismatch(_))));
    }
}
