use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime};

use kevs::metrics::{self, SliceRecord, ToleranceUnit};
use kevs::phantom::{self, PhantomSpec};
use kevs::pipeline::{self, BoundsMode, PipelineConfig};
use kevs::{nifti, resample, BinaryMask, KevsError, LabelMap, LabelSchema, ScalarVolume};
use serde_json::json;

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{self, RunManifest};
use crate::{Alternative, BaselineArgs, CompareArgs, EvaluateArgs, InputArgs, PhantomArgs, SegmentArgs, SummarizeArgs};

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn pipeline_config(file: &FileConfig, input: &InputArgs) -> PipelineConfig {
    let mut cfg = file.pipeline.clone();
    if let Some(b) = input.bounds {
        cfg.bounds_mode = b;
    }
    if !input.organs.is_empty() {
        cfg.organ_roles = Some(input.organs.clone());
    }
    cfg
}

/// Reads and validates CT + labels, permutes axes and resamples to the canonical grid.
fn load_inputs(input: &InputArgs, cfg: &PipelineConfig, warnings: &mut Vec<String>) -> CliResult<(ScalarVolume, LabelMap)> {
    let schema = LabelSchema::load(&input.schema)?;
    schema.require_pipeline_roles()?;
    for role in cfg.organ_roles.iter().flatten() {
        schema.require(role)?;
    }
    let mut labels = nifti::read_labels(&input.labels, schema)?;
    let mut ct = nifti::read_scalar(&input.ct)?;
    if let Some(z) = input.z_axis {
        ct = ct.with_z_axis(z as usize)?;
        labels = labels.with_z_axis(z as usize)?;
        if z != 2 {
            warnings.push(format!("axis {z} used as z; the output mask is written in the permuted axis order"));
        }
    }
    ct.geometry().ensure_same(labels.geometry(), "CT volume vs label map")?;
    let spacing = ct.geometry().spacing();
    if spacing != cfg.canonical_spacing {
        warnings.push(format!(
            "inputs resampled from spacing {spacing:?} mm to {:?} mm; the output mask is on the resampled grid",
            cfg.canonical_spacing
        ));
    }
    Ok(pipeline::prepare_inputs(&ct, &labels, cfg)?)
}

fn record_inputs(m: &mut RunManifest, input: &InputArgs) -> CliResult<()> {
    m.input("ct", &input.ct)?;
    m.input("labels", &input.labels)?;
    m.input("schema", &input.schema)
}

fn finish(m: &mut RunManifest, input: &InputArgs, warnings: Vec<String>) -> CliResult<()> {
    for w in &warnings {
        warn(w);
    }
    m.warnings = warnings;
    let path = input.manifest.clone().unwrap_or_else(|| manifest::manifest_path(&input.out));
    m.write(&path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn segment(args: SegmentArgs, file: &FileConfig) -> CliResult<()> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut cfg = pipeline_config(file, &args.input);
    if let Some(f) = args.reject_fraction {
        cfg.reject_fraction = f;
    }
    if let Some(f) = args.erosion_fraction {
        cfg.erosion_fraction = f;
    }
    if let Some(b) = args.bandwidth_mode {
        cfg.bandwidth_mode = b;
    }
    cfg.validate()?;

    let mut warnings = Vec::new();
    let (ct, labels) = load_inputs(&args.input, &cfg, &mut warnings)?;
    let load_s = clock.elapsed().as_secs_f64();
    let result = pipeline::kevs_segment(&ct, &labels, &cfg)?;
    warnings.extend(result.warnings.iter().cloned());

    let write_clock = Instant::now();
    nifti::write_mask(&result.vat_mask, &args.input.out)?;
    if let Some(path) = &args.dump_kde {
        manifest::write_json(path, &result.kde)?;
    }

    let mut m = RunManifest::new("segment", started);
    record_inputs(&mut m, &args.input)?;
    m.output("vat_mask", &args.input.out)?;
    if let Some(path) = &args.dump_kde {
        m.output("kde", path)?;
    }
    m.config = serde_json::to_value(&cfg)?;
    m.results = json!({
        "grid_dims": ct.geometry().dims(),
        "grid_spacing_mm": ct.geometry().spacing(),
        "sat_slice_z": result.sat_slice_z,
        "sat_sample_count": result.sat_sample_count,
        "erosion_iterations": result.erosion_iterations,
        "degenerate_erosion": result.degenerate_erosion,
        "bandwidth": result.kde.h,
        "candidate_count": result.candidate_count,
        "removed_count": result.removed_count,
        "vat_voxels": result.vat_mask.count(),
    });
    m.volatile.wall_times_s = json!({
        "load": load_s,
        "stages": result.timings,
        "pipeline_total": result.timings.total(),
        "write": write_clock.elapsed().as_secs_f64(),
        "total": clock.elapsed().as_secs_f64(),
    });
    finish(&mut m, &args.input, warnings)
}

pub fn baseline(args: BaselineArgs, file: &FileConfig) -> CliResult<()> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let cfg = pipeline_config(file, &args.input);
    cfg.validate()?;

    let mut warnings = Vec::new();
    let (ct, labels) = load_inputs(&args.input, &cfg, &mut warnings)?;
    let load_s = clock.elapsed().as_secs_f64();
    let seg_clock = Instant::now();
    let mut mask = if args.organ_free {
        pipeline::threshold_on_organ_free_cavity(&ct, &labels, args.range, &cfg)?
    } else {
        pipeline::threshold_on_full_cavity(&ct, &labels, args.range, &cfg)?
    };
    if cfg.bounds_mode == BoundsMode::VertebralBounds {
        mask = pipeline::crop_to_lumbar(&mask, &labels)?;
    }
    let seg_s = seg_clock.elapsed().as_secs_f64();
    nifti::write_mask(&mask, &args.input.out)?;

    let mut m = RunManifest::new("baseline", started);
    record_inputs(&mut m, &args.input)?;
    m.output("vat_mask", &args.input.out)?;
    m.config = json!({
        "range": args.range,
        "organ_free": args.organ_free,
        "pipeline": cfg,
    });
    m.results = json!({
        "grid_dims": ct.geometry().dims(),
        "grid_spacing_mm": ct.geometry().spacing(),
        "vat_voxels": mask.count(),
    });
    m.volatile.wall_times_s = json!({
        "load": load_s,
        "threshold": seg_s,
        "total": clock.elapsed().as_secs_f64(),
    });
    finish(&mut m, &args.input, warnings)
}

/// Labels on the prediction grid, resampling when only the spacing differs.
fn labels_on_grid(labels: LabelMap, target: &BinaryMask) -> CliResult<LabelMap> {
    if labels.geometry().same_grid(target.geometry()) {
        return Ok(labels);
    }
    let resampled = resample::resample_nearest(&labels, target.geometry().spacing())?;
    resampled.geometry().ensure_same(target.geometry(), "label map vs prediction")?;
    Ok(resampled)
}

pub fn evaluate(args: EvaluateArgs, file: &FileConfig) -> CliResult<()> {
    let pred = nifti::read_mask(&args.pred)?;
    let gt = nifti::read_mask(&args.gt)?;
    pred.geometry().ensure_same(gt.geometry(), "prediction vs ground truth")?;

    let mut mcfg = file.metrics;
    if let Some(t) = args.nsd_tau {
        mcfg.nsd_tolerance = t;
        mcfg.tolerance_unit = ToleranceUnit::Millimetres;
    }
    if let Some(t) = args.nsd_tau_voxels {
        mcfg.nsd_tolerance = t;
        mcfg.tolerance_unit = ToleranceUnit::Voxels;
    }
    mcfg.validate()?;
    let bounds = args.bounds.unwrap_or(file.pipeline.bounds_mode);

    let labels = match (&args.labels, &args.schema) {
        (Some(l), Some(s)) => {
            let labels = nifti::read_labels(l, LabelSchema::load(s)?)?;
            Some(labels_on_grid(labels, &pred)?)
        }
        _ => None,
    };
    let (pred, gt) = match (bounds, &labels) {
        (BoundsMode::FullCavity, _) => (pred, gt),
        (BoundsMode::VertebralBounds, Some(l)) => (pipeline::crop_to_lumbar(&pred, l)?, pipeline::crop_to_lumbar(&gt, l)?),
        (BoundsMode::VertebralBounds, None) => {
            return Err(CliError::Invalid("--bounds lumbar needs --labels and --schema".into()));
        }
    };
    let organs = labels.as_ref().map(|l| pipeline::organ_union(l, &file.pipeline)).transpose()?;
    let report = metrics::evaluate(&pred, &gt, organs.as_ref(), bounds, &mcfg)?;

    if let Some(path) = &args.per_slice {
        let scan_id = args.scan_id.clone().unwrap_or_else(|| scan_id_of(&args.gt));
        let mut w = csv::Writer::from_path(path)?;
        for s in &report.per_slice {
            w.serialize(SliceRecord::from_metrics(&scan_id, &args.method, s))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    manifest::write_json(&args.out, &report)?;
    println!("{}", args.out.display());
    Ok(())
}

fn scan_id_of(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

fn read_records(path: &Path) -> CliResult<Vec<SliceRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<SliceRecord>, _> = r.deserialize().collect();
    Ok(rows?)
}

/// Rows keyed by `(scan_id, z)` for a single method.
type Keyed = BTreeMap<(String, usize), SliceRecord>;

fn keyed(path: &Path, method: Option<&str>) -> CliResult<(String, Keyed)> {
    let rows = read_records(path)?;
    let methods: Vec<&str> = {
        let mut m: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    let chosen = match method {
        Some(m) if methods.contains(&m) => m.to_string(),
        Some(m) => return Err(CliError::Invalid(format!("{}: no rows for method `{m}`", path.display()))),
        None if methods.len() == 1 => methods[0].to_string(),
        None if methods.is_empty() => return Err(CliError::Invalid(format!("{}: no rows", path.display()))),
        None => {
            return Err(CliError::Invalid(format!(
                "{}: several methods ({}); pick one with --method-a/--method-b",
                path.display(),
                methods.join(", ")
            )))
        }
    };
    let mut out = BTreeMap::new();
    for r in rows.into_iter().filter(|r| r.method == chosen) {
        let key = (r.scan_id.clone(), r.z);
        if out.insert(key.clone(), r).is_some() {
            return Err(CliError::Invalid(format!("{}: duplicate row for scan `{}` z={}", path.display(), key.0, key.1)));
        }
    }
    Ok((chosen, out))
}

pub fn compare(args: CompareArgs) -> CliResult<()> {
    let (method_a, a) = keyed(&args.a, args.method_a.as_deref())?;
    let (method_b, b) = keyed(&args.b, args.method_b.as_deref())?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut skipped_undefined = 0usize;
    for (key, ra) in &a {
        let Some(rb) = b.get(key) else { continue };
        match (ra.metric(args.metric), rb.metric(args.metric)) {
            (Some(x), Some(y)) => {
                xs.push(x);
                ys.push(y);
            }
            _ => skipped_undefined += 1,
        }
    }
    let unpaired_a = a.keys().filter(|k| !b.contains_key(*k)).count();
    let unpaired_b = b.keys().filter(|k| !a.contains_key(*k)).count();
    if unpaired_a + unpaired_b > 0 {
        warn(&format!("{unpaired_a} rows of --a and {unpaired_b} rows of --b have no partner"));
    }
    let (x, y) = match args.alternative {
        Alternative::AGreater => (&xs, &ys),
        Alternative::BGreater => (&ys, &xs),
    };
    let res = metrics::wilcoxon_one_sided_with(x, y, args.test.into())?;
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let report = json!({
        "metric": args.metric,
        "alternative": match args.alternative {
            Alternative::AGreater => "a-greater",
            Alternative::BGreater => "b-greater",
        },
        "method_a": method_a,
        "method_b": method_b,
        "statistic": res.statistic,
        "p_value": res.p_value,
        "n": res.n,
        "zeros_dropped": res.zeros_dropped,
        "method": res.method,
        "pairs": xs.len(),
        "skipped_undefined": skipped_undefined,
        "unpaired_a": unpaired_a,
        "unpaired_b": unpaired_b,
        "mean_a": mean(&xs),
        "mean_b": mean(&ys),
    });
    manifest::write_json(&args.out, &report)?;
    println!("{}", args.out.display());
    Ok(())
}

pub fn summarize(args: SummarizeArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for p in &args.csv {
        rows.extend(read_records(p)?);
    }
    let report = json!({ "methods": metrics::summarize(&rows) });
    manifest::write_json(&args.out, &report)?;
    println!("{}", args.out.display());
    Ok(())
}

fn fixed<const N: usize, T: Copy>(flag: &str, v: &[T]) -> CliResult<[T; N]> {
    v.try_into()
        .map_err(|_| CliError::Invalid(format!("--{flag} takes {N} comma-separated values, got {}", v.len())))
}

fn phantom_spec(args: &PhantomArgs) -> CliResult<PhantomSpec> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(d) = &args.dims {
        let dims = fixed::<3, _>("dims", d)?;
        spec = PhantomSpec { seed: spec.seed, noise_scale: spec.noise_scale, ..PhantomSpec::with_dims(dims) };
    }
    if let Some(s) = args.spacing {
        spec.spacing = [s; 3];
    }
    if let Some(v) = &args.body_semi_axes {
        spec.body_semi_axes_mm = fixed::<2, _>("body-semi-axes", v)?;
    }
    if let Some(t) = args.sat_thickness {
        spec.sat_thickness_mm = t;
    }
    if let Some(n) = args.organs {
        spec.organ_count = n;
    }
    if let Some(v) = &args.organ_radius {
        spec.organ_radius_mm = fixed::<2, _>("organ-radius", v)?;
    }
    if let Some(n) = args.vat_blobs {
        spec.vat_blob_count = n;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn phantom(args: PhantomArgs) -> CliResult<()> {
    let spec = phantom_spec(&args)?;
    if args.seed.is_empty() || args.noise.is_empty() {
        return Err(KevsError::InvalidArgument("need at least one seed and one noise scale".into()).into());
    }
    phantom::phantom_suite(&args.out_dir, &spec, &args.seed, &args.noise)?;
    println!("{}", args.out_dir.join(phantom::MANIFEST_FILE).display());
    Ok(())
}
