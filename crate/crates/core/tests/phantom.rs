use kevs::maskops::extract_role;
use kevs::metrics::{self, MetricConfig};
use kevs::nifti;
use kevs::phantom::{self, Ellipse, Ellipsoid, PhantomSpec, CAVITY_LABEL, ORGAN_LABEL_BASE, SAT_LABEL, VERTEBRA_LABEL_BASE};
use kevs::pipeline::{self, PipelineConfig};
use kevs::{LabelSchema, Role};

fn in_ellipse(e: &Ellipse, p: [i64; 2]) -> bool {
    let mut lhs = 0i128;
    let mut rhs = 1i128;
    for (k, pk) in p.iter().enumerate() {
        let d = (pk - e.centre[k]) as i128;
        let other = e.semi_axes[1 - k] as i128;
        lhs += d * d * other * other;
        rhs *= (e.semi_axes[k] as i128).pow(2);
    }
    lhs <= rhs
}

fn in_ellipsoid(e: &Ellipsoid, p: [i64; 3]) -> bool {
    let a: [i128; 3] = e.semi_axes.map(|v| (v as i128).pow(2));
    let d: [i128; 3] = std::array::from_fn(|k| ((p[k] - e.centre[k]) as i128).pow(2));
    d[0] * a[1] * a[2] + d[1] * a[0] * a[2] + d[2] * a[0] * a[1] <= a[0] * a[1] * a[2]
}

/// Voxel centre in half-voxel units, with the grid centre at 0.
fn centre(i: usize, n: usize) -> i64 {
    2 * i as i64 + 1 - n as i64
}

#[test]
fn default_phantom_matches_membership_oracle() {
    let spec = PhantomSpec::default();
    let p = phantom::generate_phantom(&spec).unwrap();
    let lay = &p.layout;
    let [nx, ny, nz] = spec.dims;
    let mut expected = vec![0u32; nx * ny * nz];
    let mut expected_vat = vec![false; nx * ny * nz];
    for z in 0..nz {
        let band = lay.lumbar_bands.iter().position(|&(lo, hi)| z >= lo && z < hi);
        for y in 0..ny {
            for x in 0..nx {
                let q = [centre(x, nx), centre(y, ny), centre(z, nz)];
                let i = x + nx * (y + ny * z);
                let label = if !in_ellipse(&lay.body, [q[0], q[1]]) {
                    0
                } else if !in_ellipse(&lay.cavity, [q[0], q[1]]) {
                    SAT_LABEL
                } else if in_ellipse(&lay.vertebra, [q[0], q[1]]) {
                    band.map(|b| VERTEBRA_LABEL_BASE + 1 + b as u32).unwrap_or(0)
                } else if let Some(k) = lay.organs.iter().position(|o| in_ellipsoid(o, q)) {
                    ORGAN_LABEL_BASE + 1 + k as u32
                } else {
                    CAVITY_LABEL
                };
                expected[i] = label;
                expected_vat[i] = label == CAVITY_LABEL && lay.vat_blobs.iter().any(|b| in_ellipsoid(b, q));
            }
        }
    }
    let count = |v: &[u32], l: u32| v.iter().filter(|&&x| x == l).count();
    for l in [0, SAT_LABEL, CAVITY_LABEL, 3, 4, 5, 6, 7, 11, 12, 13] {
        assert_eq!(count(p.labels.data(), l), count(&expected, l), "label {l}");
        assert!(count(&expected, l) > 0, "label {l} absent");
    }
    assert_eq!(p.labels.data(), expected.as_slice());
    assert_eq!(p.gt_vat.bits(), expected_vat.as_slice());
    let cavity = count(&expected, CAVITY_LABEL) as f64;
    assert!(p.gt_vat.count() as f64 >= 0.85 * cavity);
}

#[test]
fn gt_vat_inside_cavity_and_outside_organs() {
    for seed in [1, 2, 3] {
        let p = phantom::generate_phantom(&PhantomSpec { seed, ..PhantomSpec::with_dims([96, 96, 32]) }).unwrap();
        let cavity = extract_role(&p.labels, &Role::AbdominalCavity).unwrap();
        for i in p.gt_vat.indices() {
            assert!(cavity.bits()[i], "seed {seed} voxel {i}");
        }
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn sat_and_vat_intensities_share_a_distribution() {
    let p = phantom::generate_phantom(&PhantomSpec::default()).unwrap();
    let sat: Vec<f64> = p
        .labels
        .data()
        .iter()
        .zip(p.ct.data())
        .filter(|(l, _)| **l == SAT_LABEL)
        .map(|(_, v)| *v as f64)
        .collect();
    let vat: Vec<f64> = p.gt_vat.indices().map(|i| p.ct.data()[i] as f64).collect();
    let (n, m) = (sat.len() as f64, vat.len() as f64);
    let critical = 1.628 * ((n + m) / (n * m)).sqrt();
    let d = ks_statistic(sat, vat);
    assert!(d < critical, "KS D = {d}, critical {critical}");
}

#[test]
fn ks_statistic_detects_a_shift() {
    let a: Vec<f64> = (0..1000).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..1000).map(|i| i as f64 + 500.0).collect();
    assert!((ks_statistic(a.clone(), b) - 0.5).abs() < 1e-12);
    assert_eq!(ks_statistic(a.clone(), a), 0.0);
}

#[test]
fn suite_single_case_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::with_dims([64, 64, 32]);
    let m = phantom::phantom_suite(dir.path(), &spec, &[5], &[1.0]).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let volumes: Vec<&String> = names.iter().filter(|n| n.ends_with(".nii.gz")).collect();
    assert_eq!(volumes.len(), 3, "{names:?}");
    assert!(names.contains(&phantom::MANIFEST_FILE.to_string()));
    assert_eq!(m.cases.len(), 1);
}

#[test]
fn suite_grid_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { dims: [32, 32, 16], ..PhantomSpec::with_dims([32, 32, 16]) };
    let seeds = [1, 2, 3, 4, 5];
    let noises = [1.0, 2.5];
    phantom::phantom_suite(dir.path(), &spec, &seeds, &noises).unwrap();
    let m = phantom::SuiteManifest::load(dir.path()).unwrap();
    assert_eq!(m.cases.len(), 10);
    let schema = LabelSchema::load(dir.path().join(&m.schema)).unwrap();
    for case in &m.cases {
        let direct = phantom::generate_phantom(&PhantomSpec { seed: case.seed, noise_scale: case.noise_scale, ..spec.clone() })
            .unwrap();
        let ct = nifti::read_scalar(dir.path().join(&case.ct)).unwrap();
        let labels = nifti::read_labels(dir.path().join(&case.labels), schema.clone()).unwrap();
        let gt = nifti::read_mask(dir.path().join(&case.gt_vat)).unwrap();
        assert_eq!(ct.data(), direct.ct.data(), "{}", case.id);
        assert_eq!(labels.data(), direct.labels.data());
        assert_eq!(gt.bits(), direct.gt_vat.bits());
    }
}

#[test]
fn slice_dice_mean_tracks_volume_dice() {
    let spec = PhantomSpec { seed: 3, noise_scale: 2.5, ..PhantomSpec::with_dims([128, 128, 32]) };
    let p = phantom::generate_phantom(&spec).unwrap();
    let cfg = PipelineConfig::default();
    let range = pipeline::ThresholdRange::new(-190.0, -30.0).unwrap();
    let preds = [
        pipeline::kevs_segment(&p.ct, &p.labels, &cfg).unwrap().vat_mask,
        pipeline::threshold_on_full_cavity(&p.ct, &p.labels, range, &cfg).unwrap(),
    ];
    for pred in &preds {
        let volume = metrics::dice(pred, &p.gt_vat).unwrap().value;
        let slices = metrics::per_slice_metrics(pred, &p.gt_vat, &MetricConfig::default()).unwrap();
        let mean = slices.iter().map(|s| s.dice.value).sum::<f64>() / slices.len() as f64;
        assert!((mean - volume).abs() < 0.1, "slice mean {mean} vs volume {volume}");
    }
}

#[test]
fn organ_overlap_on_threshold_run_matches_counting() {
    let spec = PhantomSpec { seed: 4, noise_scale: 3.0, ..PhantomSpec::with_dims([96, 96, 32]) };
    let p = phantom::generate_phantom(&spec).unwrap();
    let cfg = PipelineConfig::default();
    let range = pipeline::ThresholdRange::new(-250.0, -50.0).unwrap();
    let pred = pipeline::threshold_on_full_cavity(&p.ct, &p.labels, range, &cfg).unwrap();
    let organs = pipeline::organ_union(&p.labels, &cfg).unwrap();
    let is_organ = |l: u32| l > ORGAN_LABEL_BASE;
    let inter = pred.indices().filter(|&i| is_organ(p.labels.data()[i])).count();
    let got = metrics::organ_overlap_fraction(&pred, &organs).unwrap();
    assert!(inter > 0);
    assert_eq!(got.value, inter as f64 / pred.count() as f64);

    let kevs = pipeline::kevs_segment(&p.ct, &p.labels, &cfg).unwrap().vat_mask;
    assert_eq!(metrics::organ_overlap_fraction(&kevs, &organs).unwrap().value, 0.0);

    let ring = {
        let d = kevs::maskops::dilate(&organs, 2);
        kevs::maskops::mask_subtract(&d, &organs).unwrap()
    };
    let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
    for i in ring.indices() {
        let (x, y) = (pred.bits()[i], p.gt_vat.bits()[i]);
        both += (x && y) as usize;
        a += x as usize;
        b += y as usize;
    }
    let ring_dice = metrics::organ_ring_dice(&pred, &p.gt_vat, &organs, 2).unwrap();
    assert_eq!(ring_dice.value, 2.0 * both as f64 / (a + b) as f64);
}
