//! Overlap and surface metrics, per-slice decomposition, organ-overlap and
//! organ-ring analyses, and the one-sided Wilcoxon signed-rank test.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::distance::distance_transform_scaled;
use crate::error::{KevsError, Result};
use crate::grid::BinaryMask;
use crate::maskops::{
    bounding_box, boundary_voxels_with, crop_box, dilate, mask_subtract, overlap_count, Connectivity,
};
use crate::pipeline::BoundsMode;

/// A ratio in [0, 1]; `undefined` marks a conventional value for an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub undefined: bool,
}

impl Score {
    pub fn defined(value: f64) -> Self {
        Self { value, undefined: false }
    }

    pub fn undefined(value: f64) -> Self {
        Self { value, undefined: true }
    }

    /// `None` when undefined.
    pub fn get(&self) -> Option<f64> {
        (!self.undefined).then_some(self.value)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceUnit {
    #[default]
    Millimetres,
    Voxels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub nsd_tolerance: f64,
    pub tolerance_unit: ToleranceUnit,
    pub ring_layers: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            nsd_tolerance: 2.0,
            tolerance_unit: ToleranceUnit::Millimetres,
            ring_layers: 2,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nsd_tolerance.is_finite() && self.nsd_tolerance > 0.0) {
            return Err(KevsError::InvalidArgument(format!(
                "NSD tolerance must be > 0, got {}",
                self.nsd_tolerance
            )));
        }
        Ok(())
    }
}

fn ratio(num: usize, den: usize, empty: f64) -> Score {
    if den == 0 {
        Score::undefined(empty)
    } else {
        Score::defined(num as f64 / den as f64)
    }
}

/// `2|a ∩ b| / (|a| + |b|)`; 1.0 (undefined) when both are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<Score> {
    let inter = overlap_count(a, b)?;
    let den = a.count() + b.count();
    Ok(ratio(2 * inter, den, 1.0))
}

/// `(|pred ∩ gt| / |pred|, |pred ∩ gt| / |gt|)`; an empty denominator yields 0.0 (undefined).
pub fn precision_recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<(Score, Score)> {
    let inter = overlap_count(pred, gt)?;
    Ok((ratio(inter, pred.count(), 0.0), ratio(inter, gt.count(), 0.0)))
}

/// Normalised surface distance with 6-connected boundaries and 3D distances.
pub fn nsd(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<Score> {
    nsd_with(pred, gt, cfg, Connectivity::Face6)
}

fn nsd_with(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig, conn: Connectivity) -> Result<Score> {
    cfg.validate()?;
    pred.geometry().ensure_same(gt.geometry(), "prediction vs ground truth")?;
    let (bp, bg) = (bounding_box(pred), bounding_box(gt));
    let (lo, hi) = match (bp, bg) {
        (None, None) => return Ok(Score::undefined(1.0)),
        (None, _) | (_, None) => return Ok(Score::undefined(0.0)),
        (Some((l1, h1)), Some((l2, h2))) => (
            std::array::from_fn(|a| l1[a].min(l2[a])),
            std::array::from_fn(|a| h1[a].max(h2[a])),
        ),
    };
    // every boundary voxel and every nearest site lies inside the joint box
    let p = crop_box(pred, lo, hi)?;
    let g = crop_box(gt, lo, hi)?;
    let dp = boundary_voxels_with(&p, conn);
    let dg = boundary_voxels_with(&g, conn);
    let step = match cfg.tolerance_unit {
        ToleranceUnit::Millimetres => p.geometry().spacing(),
        ToleranceUnit::Voxels => [1.0; 3],
    };
    let to_g = distance_transform_scaled(&dg, step)?;
    let to_p = distance_transform_scaled(&dp, step)?;
    let tau = cfg.nsd_tolerance;
    let close_p = dp.indices().filter(|&i| to_g.at_index(i) <= tau).count();
    let close_g = dg.indices().filter(|&i| to_p.at_index(i) <= tau).count();
    Ok(Score::defined((close_p + close_g) as f64 / (dp.count() + dg.count()) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub z: usize,
    pub dice: Score,
    pub nsd: Score,
    pub precision: Score,
    pub recall: Score,
}

fn slice_mask(m: &BinaryMask, z: usize) -> BinaryMask {
    BinaryMask::new(m.geometry().slice_geometry(z), m.slice_bits(z).to_vec()).expect("slice fits its geometry")
}

/// Metrics for every axial slice where `pred ∪ gt` is nonempty, scored in 2D.
pub fn per_slice_metrics(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<Vec<SliceMetrics>> {
    cfg.validate()?;
    pred.geometry().ensure_same(gt.geometry(), "prediction vs ground truth")?;
    let nz = pred.geometry().dims()[2];
    (0..nz)
        .into_par_iter()
        .filter(|&z| pred.slice_bits(z).iter().chain(gt.slice_bits(z)).any(|&b| b))
        .map(|z| {
            let (p, g) = (slice_mask(pred, z), slice_mask(gt, z));
            let (precision, recall) = precision_recall(&p, &g)?;
            Ok(SliceMetrics {
                z,
                dice: dice(&p, &g)?,
                nsd: nsd_with(&p, &g, cfg, Connectivity::InPlane4)?,
                precision,
                recall,
            })
        })
        .collect()
}

/// `|pred ∩ organs| / |pred|`.
pub fn organ_overlap_fraction(pred: &BinaryMask, organ_union: &BinaryMask) -> Result<Score> {
    Ok(ratio(overlap_count(pred, organ_union)?, pred.count(), 0.0))
}

/// Dice of pred and gt restricted to the `layers`-voxel shell around the organs.
pub fn organ_ring_dice(pred: &BinaryMask, gt: &BinaryMask, organ_union: &BinaryMask, layers: usize) -> Result<Score> {
    pred.geometry().ensure_same(gt.geometry(), "prediction vs ground truth")?;
    let ring = mask_subtract(&dilate(organ_union, layers), organ_union)?;
    if ring.is_empty() {
        return Ok(Score::undefined(1.0));
    }
    let inter = pred
        .bits()
        .par_iter()
        .zip(gt.bits().par_iter())
        .zip(ring.bits().par_iter())
        .filter(|((&p, &g), &r)| p && g && r)
        .count();
    let den = overlap_count(pred, &ring)? + overlap_count(gt, &ring)?;
    Ok(ratio(2 * inter, den, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub region: BoundsMode,
    pub dice: Score,
    pub nsd: Score,
    pub precision: Score,
    pub recall: Score,
    pub nsd_tolerance: f64,
    pub tolerance_unit: ToleranceUnit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub organ_overlap: Option<Score>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub organ_ring_dice: Option<Score>,
    pub per_slice: Vec<SliceMetrics>,
}

/// Volume and per-slice metrics; organ analyses when an organ union is supplied.
pub fn evaluate(
    pred: &BinaryMask,
    gt: &BinaryMask,
    organs: Option<&BinaryMask>,
    region: BoundsMode,
    cfg: &MetricConfig,
) -> Result<MetricsReport> {
    let (precision, recall) = precision_recall(pred, gt)?;
    let (organ_overlap, organ_ring_dice) = match organs {
        Some(o) => (
            Some(organ_overlap_fraction(pred, o)?),
            Some(organ_ring_dice(pred, gt, o, cfg.ring_layers)?),
        ),
        None => (None, None),
    };
    Ok(MetricsReport {
        region,
        dice: dice(pred, gt)?,
        nsd: nsd(pred, gt, cfg)?,
        precision,
        recall,
        nsd_tolerance: cfg.nsd_tolerance,
        tolerance_unit: cfg.tolerance_unit,
        organ_overlap,
        organ_ring_dice,
        per_slice: per_slice_metrics(pred, gt, cfg)?,
    })
}

/// One row of a per-slice table; undefined values are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub scan_id: String,
    pub z: usize,
    pub method: String,
    pub dice: Option<f64>,
    pub nsd: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl SliceRecord {
    pub fn from_metrics(scan_id: &str, method: &str, m: &SliceMetrics) -> Self {
        Self {
            scan_id: scan_id.to_string(),
            z: m.z,
            method: method.to_string(),
            dice: m.dice.get(),
            nsd: m.nsd.get(),
            precision: m.precision.get(),
            recall: m.recall.get(),
        }
    }

    pub fn metric(&self, which: MetricKind) -> Option<f64> {
        match which {
            MetricKind::Dice => self.dice,
            MetricKind::Nsd => self.nsd,
            MetricKind::Precision => self.precision,
            MetricKind::Recall => self.recall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Dice,
    Nsd,
    Precision,
    Recall,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Dice => "dice",
            MetricKind::Nsd => "nsd",
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
        })
    }
}

impl FromStr for MetricKind {
    type Err = KevsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(MetricKind::Dice),
            "nsd" => Ok(MetricKind::Nsd),
            "precision" => Ok(MetricKind::Precision),
            "recall" => Ok(MetricKind::Recall),
            _ => Err(KevsError::InvalidArgument(format!(
                "metric `{s}` is not one of dice, nsd, precision, recall"
            ))),
        }
    }
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rows: usize,
    pub dice: Option<MeanSd>,
    pub nsd: Option<MeanSd>,
    pub precision: Option<MeanSd>,
    pub recall: Option<MeanSd>,
}

/// Groups rows by method (sorted by name).
pub fn summarize(rows: &[SliceRecord]) -> Vec<MethodSummary> {
    let mut by_method: BTreeMap<&str, Vec<&SliceRecord>> = BTreeMap::new();
    for r in rows {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, rs)| {
            let stat = |k: MetricKind| MeanSd::of(rs.iter().filter_map(|r| r.metric(k)));
            MethodSummary {
                method: method.to_string(),
                rows: rs.len(),
                dice: stat(MetricKind::Dice),
                nsd: stat(MetricKind::Nsd),
                precision: stat(MetricKind::Precision),
                recall: stat(MetricKind::Recall),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    /// Exact null distribution for n <= 20, normal approximation above.
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub zeros_dropped: usize,
    pub method: WilcoxonMethod,
}

pub const EXACT_WILCOXON_MAX_N: usize = 20;

/// One-sided signed-rank test of `x > y` on paired samples.
pub fn wilcoxon_one_sided(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_one_sided_with(x, y, WilcoxonMethod::Auto)
}

pub fn wilcoxon_one_sided_with(x: &[f64], y: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(KevsError::InvalidArgument(format!(
            "paired samples differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(KevsError::InvalidArgument("non-finite value in paired samples".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n < 5 {
        return Err(KevsError::InvalidArgument(format!(
            "signed-rank test needs at least 5 nonzero differences, got {n}"
        )));
    }
    let (ranks2, tie_sizes) = doubled_ranks(&d);
    let w2: u64 = d.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let method = match method {
        WilcoxonMethod::Auto if n <= EXACT_WILCOXON_MAX_N => WilcoxonMethod::Exact,
        WilcoxonMethod::Auto => WilcoxonMethod::Normal,
        m => m,
    };
    let p_value = match method {
        WilcoxonMethod::Exact => exact_upper_tail(&ranks2, w2)?,
        _ => normal_upper_tail(n, &tie_sizes, w2 as f64 / 2.0),
    };
    Ok(WilcoxonResult {
        statistic: w2 as f64 / 2.0,
        p_value,
        n,
        zeros_dropped: x.len() - n,
        method,
    })
}

/// Average ranks of |d|, doubled so ties stay integral, plus the tie-group sizes.
fn doubled_ranks(d: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks2 = vec![0u64; d.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks2[k] = r2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks2, ties)
}

/// `P(W+ >= w)` under independent fair signs, by counting subsets of ranks.
fn exact_upper_tail(ranks2: &[u64], w2: u64) -> Result<f64> {
    if ranks2.len() > 100 {
        return Err(KevsError::InvalidArgument("exact signed-rank test limited to n <= 100".into()));
    }
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u128; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let tail: u128 = counts[w2 as usize..].iter().sum();
    Ok(tail as f64 / 2f64.powi(ranks2.len() as i32))
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_upper_tail(n: usize, tie_sizes: &[usize], w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = (w - mean - 0.5) / var.sqrt();
    Normal::standard().sf(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use proptest::prelude::*;

    fn g(dims: [usize; 3], s: f64) -> GridGeometry {
        GridGeometry::new(dims, [s; 3], [0.0; 3]).unwrap()
    }

    fn cube(geom: &GridGeometry, lo: [usize; 3], side: usize) -> BinaryMask {
        BinaryMask::from_fn(geom.clone(), |x, y, z| {
            (lo[0]..lo[0] + side).contains(&x) && (lo[1]..lo[1] + side).contains(&y) && (lo[2]..lo[2] + side).contains(&z)
        })
    }

    #[test]
    fn overlap_identities() {
        let geom = g([8, 8, 8], 1.5);
        let a = cube(&geom, [1, 1, 1], 3);
        assert_eq!(dice(&a, &a).unwrap(), Score::defined(1.0));
        let b = cube(&geom, [5, 5, 5], 3);
        assert_eq!(dice(&a, &b).unwrap().value, 0.0);
        let e = BinaryMask::empty(geom.clone());
        assert_eq!(dice(&e, &e).unwrap(), Score::undefined(1.0));
        let (p, r) = precision_recall(&e, &a).unwrap();
        assert!(p.undefined && !r.undefined && r.value == 0.0);
        // |a| = |b| = 8, overlap 4
        let c = cube(&geom, [0, 0, 0], 2);
        let d = BinaryMask::from_fn(geom.clone(), |x, y, z| x < 2 && (1..3).contains(&y) && z < 2);
        assert_eq!(dice(&c, &d).unwrap().value, 0.5);
        // superset of double volume
        let big = BinaryMask::from_fn(geom.clone(), |x, y, z| x < 4 && y < 2 && z < 2);
        let (p, r) = precision_recall(&big, &c).unwrap();
        assert_eq!((p.value, r.value), (0.5, 1.0));
    }

    #[test]
    fn nsd_simple_cases() {
        let cfg = MetricConfig::default();
        let geom = g([12, 12, 12], 1.5);
        let a = cube(&geom, [2, 2, 2], 4);
        assert_eq!(nsd(&a, &a, &cfg).unwrap(), Score::defined(1.0));
        let mut p = BinaryMask::empty(geom.clone());
        let mut q = BinaryMask::empty(geom.clone());
        p.set(geom.index(0, 0, 0), true);
        q.set(geom.index(7, 0, 0), true); // 10.5 mm apart
        assert_eq!(nsd(&p, &q, &cfg).unwrap().value, 0.0);
        let e = BinaryMask::empty(geom);
        assert_eq!(nsd(&e, &e, &cfg).unwrap(), Score::undefined(1.0));
        assert_eq!(nsd(&a, &e, &cfg).unwrap(), Score::undefined(0.0));
        assert!(nsd(&a, &a, &MetricConfig { nsd_tolerance: 0.0, ..cfg }).is_err());
    }

    /// Direct O(|∂P| |∂G|) evaluation with boundaries found by neighbour scan.
    fn nsd_oracle(p: &BinaryMask, q: &BinaryMask, tau: f64) -> f64 {
        let geom = p.geometry();
        let [nx, ny, nz] = geom.dims();
        let s = geom.spacing();
        let boundary = |m: &BinaryMask| -> Vec<[usize; 3]> {
            let mut out = Vec::new();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if !m.get(x, y, z) {
                            continue;
                        }
                        let nb = [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                        let edge = nb.iter().any(|&(dx, dy, dz)| {
                            let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64
                                || !m.get(a as usize, b as usize, c as usize)
                        });
                        if edge {
                            out.push([x, y, z]);
                        }
                    }
                }
            }
            out
        };
        let (bp, bq) = (boundary(p), boundary(q));
        let dist = |u: &[usize; 3], v: &[usize; 3]| {
            (0..3).map(|a| ((u[a] as f64 - v[a] as f64) * s[a]).powi(2)).sum::<f64>().sqrt()
        };
        let close = |from: &[[usize; 3]], to: &[[usize; 3]]| {
            from.iter()
                .filter(|u| to.iter().map(|v| dist(u, v)).fold(f64::INFINITY, f64::min) <= tau)
                .count()
        };
        (close(&bp, &bq) + close(&bq, &bp)) as f64 / (bp.len() + bq.len()) as f64
    }

    #[test]
    fn nsd_shifted_cube_matches_oracle() {
        let geom = g([10, 10, 10], 1.5);
        let a = cube(&geom, [2, 2, 2], 5);
        let b = cube(&geom, [3, 2, 2], 5);
        let got = nsd(&a, &b, &MetricConfig::default()).unwrap().value;
        assert!((got - nsd_oracle(&a, &b, 2.0)).abs() < 1e-12);
        assert_eq!(got, 1.0);
        let c = cube(&geom, [4, 2, 2], 5);
        let got = nsd(&a, &c, &MetricConfig::default()).unwrap().value;
        assert!((got - nsd_oracle(&a, &c, 2.0)).abs() < 1e-12);
        assert!(got < 1.0 && got > 0.3);
    }

    fn random_mask(geom: &GridGeometry, bits: &[bool]) -> BinaryMask {
        BinaryMask::new(geom.clone(), bits.to_vec()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_match_oracles_and_symmetries(
            pa in proptest::collection::vec(proptest::bool::weighted(0.3), 6 * 5 * 4),
            pb in proptest::collection::vec(proptest::bool::weighted(0.3), 6 * 5 * 4),
            tau in 0.5f64..4.0,
        ) {
            let geom = GridGeometry::new([6, 5, 4], [1.0, 1.5, 2.5], [0.0; 3]).unwrap();
            let (a, b) = (random_mask(&geom, &pa), random_mask(&geom, &pb));
            prop_assume!(!a.is_empty() && !b.is_empty());
            let cfg = MetricConfig { nsd_tolerance: tau, ..Default::default() };
            let n = nsd(&a, &b, &cfg).unwrap().value;
            prop_assert!((n - nsd_oracle(&a, &b, tau)).abs() < 1e-12);
            prop_assert_eq!(n, nsd(&b, &a, &cfg).unwrap().value);
            let wider = MetricConfig { nsd_tolerance: tau + 1.0, ..cfg };
            prop_assert!(nsd(&a, &b, &wider).unwrap().value >= n);
            let d = dice(&a, &b).unwrap().value;
            prop_assert_eq!(d, dice(&b, &a).unwrap().value);
            let inter = (0..geom.len()).filter(|&i| pa[i] && pb[i]).count();
            let (p, r) = precision_recall(&a, &b).unwrap();
            prop_assert_eq!(p.value, inter as f64 / a.count() as f64);
            prop_assert_eq!(r.value, inter as f64 / b.count() as f64);
            let (p2, r2) = precision_recall(&b, &a).unwrap();
            prop_assert_eq!((p.value, r.value), (r2.value, p2.value));
            for v in [d, n, p.value, r.value] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn voxel_tolerance_uses_unit_steps() {
        let geom = g([10, 4, 4], 3.0);
        let mut a = BinaryMask::empty(geom.clone());
        let mut b = BinaryMask::empty(geom.clone());
        a.set(geom.index(1, 1, 1), true);
        b.set(geom.index(3, 1, 1), true);
        let mm = MetricConfig::default();
        let vox = MetricConfig { tolerance_unit: ToleranceUnit::Voxels, ..mm };
        assert_eq!(nsd(&a, &b, &mm).unwrap().value, 0.0);
        assert_eq!(nsd(&a, &b, &vox).unwrap().value, 1.0);
    }

    #[test]
    fn per_slice_single_slice_and_identity() {
        let geom = g([8, 8, 5], 1.5);
        let a = BinaryMask::from_fn(geom.clone(), |x, y, z| z == 2 && x < 4 && y < 5);
        let b = BinaryMask::from_fn(geom.clone(), |x, y, z| z == 2 && (1..5).contains(&x) && y < 5);
        let cfg = MetricConfig::default();
        let s = per_slice_metrics(&a, &b, &cfg).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].z, 2);
        assert_eq!(s[0].dice, dice(&a, &b).unwrap());
        let (p, r) = precision_recall(&a, &b).unwrap();
        assert_eq!((s[0].precision, s[0].recall), (p, r));
        // in-plane boundaries: a 2D rectangle is not all boundary
        let full = BinaryMask::from_fn(geom.clone(), |x, y, _| x < 6 && y < 6);
        let s = per_slice_metrics(&full, &full, &cfg).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|m| m.dice.value == 1.0 && m.nsd.value == 1.0));
    }

    #[test]
    fn organ_overlap_and_ring() {
        let geom = g([10, 10, 10], 1.5);
        let organ = cube(&geom, [4, 4, 4], 2);
        let inside = cube(&geom, [4, 4, 4], 1);
        let outside = cube(&geom, [0, 0, 0], 2);
        assert_eq!(organ_overlap_fraction(&outside, &organ).unwrap().value, 0.0);
        assert_eq!(organ_overlap_fraction(&inside, &organ).unwrap().value, 1.0);
        let pred = dilate(&organ, 3);
        assert_eq!(organ_ring_dice(&pred, &pred, &organ, 2).unwrap(), Score::defined(1.0));
        let empty = BinaryMask::empty(geom.clone());
        assert!(organ_ring_dice(&pred, &pred, &empty, 2).unwrap().undefined);
        let ring = mask_subtract(&dilate(&organ, 2), &organ).unwrap();
        let gt = cube(&geom, [0, 0, 0], 5);
        let inter = (0..geom.len()).filter(|&i| pred.bits()[i] && gt.bits()[i] && ring.bits()[i]).count();
        let den = (0..geom.len()).filter(|&i| ring.bits()[i] && pred.bits()[i]).count()
            + (0..geom.len()).filter(|&i| ring.bits()[i] && gt.bits()[i]).count();
        assert_eq!(organ_ring_dice(&pred, &gt, &organ, 2).unwrap().value, 2.0 * inter as f64 / den as f64);
    }

    #[test]
    fn summary_groups_and_skips_undefined() {
        let row = |m: &str, d: Option<f64>| SliceRecord {
            scan_id: "s".into(),
            z: 0,
            method: m.into(),
            dice: d,
            nsd: Some(1.0),
            precision: None,
            recall: Some(0.5),
        };
        let rows = [row("b", Some(0.5)), row("a", Some(1.0)), row("b", Some(0.7)), row("b", None)];
        let s = summarize(&rows);
        assert_eq!(s.iter().map(|m| m.method.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let d = s[1].dice.unwrap();
        assert_eq!(d.n, 2);
        assert!((d.mean - 0.6).abs() < 1e-15);
        assert!((d.sd - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(s[1].precision.is_none());
        assert_eq!(s[1].rows, 3);
    }

    /// Enumerates all 2^n sign patterns over the observed |d| ranks.
    fn enumeration_p(x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
        let n = d.len();
        let rank = |i: usize| {
            let a = d[i].abs();
            let less = d.iter().filter(|v| v.abs() < a).count() as f64;
            let eq = d.iter().filter(|v| v.abs() == a).count() as f64;
            less + (eq + 1.0) / 2.0
        };
        let r: Vec<f64> = (0..n).map(rank).collect();
        let w: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| r[i]).sum();
        let hits = (0u32..1 << n)
            .filter(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum::<f64>() >= w - 1e-9)
            .count();
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_all_positive_five() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0; 5];
        let r = wilcoxon_one_sided(&x, &y).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert_eq!(r.p_value, 0.03125);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn wilcoxon_errors() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(wilcoxon_one_sided(&x, &x).is_err());
        assert!(wilcoxon_one_sided(&x, &x[..5]).is_err());
        let y = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
        assert!(wilcoxon_one_sided(&x, &y).is_err());
        assert!(wilcoxon_one_sided(&[f64::NAN; 6], &x).is_err());
    }

    #[test]
    fn wilcoxon_twelve_with_ties_and_zeros() {
        let x = [0.91, 0.85, 0.88, 0.70, 0.95, 0.80, 0.77, 0.90, 0.66, 0.93, 0.81, 0.79, 0.5];
        let y = [0.89, 0.86, 0.80, 0.72, 0.90, 0.75, 0.77, 0.84, 0.70, 0.88, 0.79, 0.70, 0.5];
        let exact = wilcoxon_one_sided(&x, &y).unwrap();
        assert_eq!(exact.zeros_dropped, 2);
        assert_eq!(exact.n, 11);
        assert!((exact.p_value - enumeration_p(&x, &y)).abs() < 1e-15);
        let approx = wilcoxon_one_sided_with(&x, &y, WilcoxonMethod::Normal).unwrap();
        assert!((approx.p_value - exact.p_value).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn wilcoxon_exact_matches_enumeration(
            d in proptest::collection::vec(-6i32..=6, 5..=12),
        ) {
            prop_assume!(d.iter().filter(|v| **v != 0).count() >= 5);
            let x: Vec<f64> = d.iter().map(|v| *v as f64 * 0.25).collect();
            let y = vec![0.0; d.len()];
            let r = wilcoxon_one_sided(&x, &y).unwrap();
            prop_assert!((r.p_value - enumeration_p(&x, &y)).abs() < 1e-15);
            // depends on signed ranks only
            let cubed: Vec<f64> = x.iter().map(|v| v * v * v + v).collect();
            prop_assert_eq!(wilcoxon_one_sided(&cubed, &y).unwrap().p_value, r.p_value);
        }
    }

    #[test]
    fn large_n_uses_normal_and_agrees_with_exact() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 17) % 13) as f64 - 4.0).collect();
        let y = vec![0.0; 40];
        let auto = wilcoxon_one_sided(&x, &y).unwrap();
        assert_eq!(auto.method, WilcoxonMethod::Normal);
        let exact = wilcoxon_one_sided_with(&x, &y, WilcoxonMethod::Exact).unwrap();
        assert!((auto.p_value - exact.p_value).abs() < 0.01);
    }
}
