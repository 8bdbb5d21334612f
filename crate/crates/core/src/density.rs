//! Gaussian kernel density estimation over fat intensity samples.
//!
//! The density is tabulated on an evenly spaced grid spanning the sample
//! range and queried by linear interpolation. All arithmetic is done on
//! offsets from the sample minimum so that shifting samples and queries by a
//! constant reproduces the same table.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KevsError, Result};

pub const DEFAULT_GRID_SIZE: usize = 1000;

/// Intensity samples `X_1..X_n`, n >= 2, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
}

impl SampleSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(KevsError::DegenerateSamples(format!(
                "need at least 2 samples, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KevsError::DegenerateSamples("non-finite sample".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Sample standard deviation (n - 1 denominator), computed about the minimum
    /// so a constant shift of the samples leaves it unchanged.
    pub fn std_dev(&self) -> f64 {
        let lo = self.min();
        let offs: Vec<f64> = self.values.iter().map(|v| v - lo).collect();
        let m = offs.iter().sum::<f64>() / offs.len() as f64;
        let ss: f64 = offs.iter().map(|v| (v - m) * (v - m)).sum();
        (ss / (self.len() - 1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    /// `h = n^(-1/5)` applied to raw HU values.
    Scott,
    /// `h = sigma * n^(-1/5)` with sigma the sample standard deviation.
    #[default]
    ScottSigma,
}

impl fmt::Display for BandwidthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandwidthMode::Scott => "scott",
            BandwidthMode::ScottSigma => "scott-sigma",
        })
    }
}

impl FromStr for BandwidthMode {
    type Err = KevsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scott" => Ok(BandwidthMode::Scott),
            "scott-sigma" => Ok(BandwidthMode::ScottSigma),
            _ => Err(KevsError::InvalidArgument(format!(
                "bandwidth mode `{s}` is not one of scott, scott-sigma"
            ))),
        }
    }
}

/// Error-free product `a * b = hi + lo`.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let hi = a * b;
    (hi, a.mul_add(b, -hi))
}

/// `r^5 * n - 1` evaluated in double-double so neighbouring floats can be told apart.
fn fifth_power_residual(r: f64, n: f64) -> f64 {
    let mul = |(ah, al): (f64, f64), b: f64| {
        let (h, l) = two_prod(ah, b);
        (h, l + al * b)
    };
    let mut acc = (r, 0.0);
    for _ in 0..4 {
        acc = mul(acc, r);
    }
    let (h, l) = mul(acc, n);
    (h - 1.0) + l
}

/// Scott's factor `n^(-1/5)`, correctly rounded (so 32 gives 0.5 and 1e5 gives 0.1).
pub fn scott_bandwidth(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(KevsError::DegenerateSamples(format!("Scott's factor needs n >= 2, got {n}")));
    }
    let nf = n as f64;
    let guess = nf.powf(-0.2);
    let mut best = guess;
    let mut best_err = fifth_power_residual(guess, nf).abs();
    for steps in [-2i64, -1, 1, 2] {
        let cand = f64::from_bits((guess.to_bits() as i64 + steps) as u64);
        let err = fifth_power_residual(cand, nf).abs();
        if err < best_err {
            best = cand;
            best_err = err;
        }
    }
    Ok(best)
}

fn bandwidth_for(samples: &SampleSet, mode: BandwidthMode) -> Result<f64> {
    let base = scott_bandwidth(samples.len())?;
    Ok(match mode {
        BandwidthMode::Scott => base,
        BandwidthMode::ScottSigma => samples.std_dev() * base,
    })
}

#[inline]
fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// A fitted, tabulated Gaussian KDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    pub n: usize,
    pub h: f64,
    pub bandwidth_mode: Option<BandwidthMode>,
    pub i_min: f64,
    pub i_max: f64,
    pub sample_mean: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    #[serde(skip)]
    offsets: Vec<f64>,
    #[serde(skip)]
    step: f64,
    #[serde(skip)]
    mean_offset: f64,
}

/// Fits with the given bandwidth rule on a `grid_size`-point grid over `[min, max]`.
pub fn fit_gkde(samples: &SampleSet, grid_size: usize, mode: BandwidthMode) -> Result<DensityModel> {
    let h = bandwidth_for(samples, mode)?;
    let mut m = fit_gkde_with_bandwidth(samples, h, grid_size)?;
    m.bandwidth_mode = Some(mode);
    Ok(m)
}

/// Fits with an explicit bandwidth.
pub fn fit_gkde_with_bandwidth(samples: &SampleSet, h: f64, grid_size: usize) -> Result<DensityModel> {
    if grid_size < 2 {
        return Err(KevsError::InvalidArgument(format!("grid size must be >= 2, got {grid_size}")));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(KevsError::DegenerateSamples(format!("bandwidth must be finite and > 0, got {h}")));
    }
    let i_min = samples.min();
    let i_max = samples.max();
    if i_max <= i_min {
        return Err(KevsError::DegenerateSamples(format!(
            "all {} samples equal {i_min}",
            samples.len()
        )));
    }
    let span = i_max - i_min;
    let step = span / (grid_size - 1) as f64;
    let offsets: Vec<f64> = (0..grid_size)
        .map(|j| if j + 1 == grid_size { span } else { j as f64 * step })
        .collect();
    let sample_offsets: Vec<f64> = samples.values().iter().map(|x| x - i_min).collect();
    let n = samples.len();
    let norm = 1.0 / (n as f64 * h);
    let density: Vec<f64> = offsets
        .par_iter()
        .map(|&u| norm * sample_offsets.iter().map(|&x| std_normal_pdf((u - x) / h)).sum::<f64>())
        .collect();
    let mean_offset = sample_offsets.iter().sum::<f64>() / n as f64;
    Ok(DensityModel {
        n,
        h,
        bandwidth_mode: None,
        i_min,
        i_max,
        sample_mean: samples.mean(),
        grid: offsets.iter().map(|u| i_min + u).collect(),
        density,
        offsets,
        step,
        mean_offset,
    })
}

impl DensityModel {
    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    /// Query position relative to the sample minimum; negative means below range.
    #[inline]
    pub fn offset_of(&self, x: f64) -> f64 {
        x - self.i_min
    }

    /// Sample mean relative to the sample minimum.
    pub fn mean_offset(&self) -> f64 {
        self.mean_offset
    }

    /// Interpolated density; zero outside `[i_min, i_max]`.
    pub fn eval_pd(&self, x: f64) -> f64 {
        if !(x >= self.i_min && x <= self.i_max) {
            return 0.0;
        }
        let j = self.bracket(self.offset_of(x));
        if x == self.grid[j] {
            return self.density[j];
        }
        if x == self.grid[j + 1] {
            return self.density[j + 1];
        }
        self.eval_offset(self.offset_of(x))
    }

    /// Index `j` with `offsets[j] <= off < offsets[j + 1]` (clamped to the last cell).
    fn bracket(&self, off: f64) -> usize {
        let last = self.offsets.len() - 1;
        let mut j = ((off.max(0.0) / self.step) as usize).min(last - 1);
        while j > 0 && self.offsets[j] > off {
            j -= 1;
        }
        while j + 1 < last && self.offsets[j + 1] <= off {
            j += 1;
        }
        j
    }

    pub fn eval_offset(&self, off: f64) -> f64 {
        let last = self.offsets.len() - 1;
        if !(off >= 0.0 && off <= self.offsets[last]) {
            return 0.0;
        }
        let j = self.bracket(off);
        let (a, b) = (self.offsets[j], self.offsets[j + 1]);
        if off == a {
            return self.density[j];
        }
        if off == b {
            return self.density[j + 1];
        }
        let t = (off - a) / (b - a);
        (1.0 - t) * self.density[j] + t * self.density[j + 1]
    }

    pub fn peak(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    /// Trapezoidal integral of the table over `[i_min, i_max]`.
    pub fn trapezoid_mass(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }

    /// Rebuilds the derived fields after deserialisation.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut m: DensityModel = serde_json::from_str(s)?;
        if m.grid.len() < 2 || m.grid.len() != m.density.len() {
            return Err(KevsError::InvalidArgument("density table is malformed".into()));
        }
        let g = m.grid.len();
        let span = m.i_max - m.i_min;
        m.step = span / (g - 1) as f64;
        m.offsets = (0..g).map(|j| if j + 1 == g { span } else { j as f64 * m.step }).collect();
        m.mean_offset = m.sample_mean - m.i_min;
        Ok(m)
    }
}

/// A cavity voxel awaiting the density cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub pd: f64,
    /// Intensity in the same frame as the `sample_mean` passed to [`pd_rank_and_cut`].
    pub intensity: f64,
}

/// `floor(reject_fraction * m)`.
pub fn removal_count(m: usize, reject_fraction: f64) -> usize {
    ((reject_fraction * m as f64).floor() as usize).min(m)
}

/// Removal order: lowest density first, then farthest from the sample mean, then lowest index.
fn removal_order(a: &Candidate, b: &Candidate, mean: f64) -> Ordering {
    a.pd.total_cmp(&b.pd)
        .then_with(|| (b.intensity - mean).abs().total_cmp(&(a.intensity - mean).abs()))
        .then_with(|| a.index.cmp(&b.index))
}

/// Drops the `floor(reject_fraction * m)` least fat-like candidates and returns
/// the kept voxel indices in ascending order.
pub fn pd_rank_and_cut(candidates: &[Candidate], reject_fraction: f64, sample_mean: f64) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(KevsError::InvalidArgument("no candidate voxels to rank".into()));
    }
    if !(0.0..1.0).contains(&reject_fraction) {
        return Err(KevsError::InvalidArgument(format!(
            "reject fraction {reject_fraction} not in [0, 1)"
        )));
    }
    if candidates.iter().any(|c| c.pd.is_nan() || c.intensity.is_nan()) {
        return Err(KevsError::InvalidArgument("NaN density or intensity".into()));
    }
    let k = removal_count(candidates.len(), reject_fraction);
    let mut kept: Vec<usize> = if k == 0 {
        candidates.iter().map(|c| c.index).collect()
    } else {
        let mut order = candidates.to_vec();
        order.select_nth_unstable_by(k - 1, |a, b| removal_order(a, b, sample_mean));
        order[k..].iter().map(|c| c.index).collect()
    };
    kept.par_sort_unstable();
    Ok(kept)
}
