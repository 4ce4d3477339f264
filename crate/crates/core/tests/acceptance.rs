//! End-to-end acceptance checks, one line of output per check.
//!
//! Runs as a plain binary so the summary is always printed. Pass check
//! numbers as arguments (`cargo test --test acceptance -- 3 4`) to run a
//! subset.

use std::process::ExitCode;
use std::time::Instant;

use cortexmorph::gradcheck::{fd_gradient, fd_gradient_at, max_relative_error};
use cortexmorph::loss::{cortexmorph_loss, similarity, smoothness, LossConfig, Similarity};
use cortexmorph::metrics::{icc_2_1, pearson_r, r_squared, RatingsTable};
use cortexmorph::optim::{register_iterative, IterativeConfig};
use cortexmorph::phantom::{generate_cohort, make_phantom, PhantomSpec};
use cortexmorph::regressor::{
    infer_velocity, select_model, train_amortized, unet_backward, unet_forward, IterativeEstimator,
    ThicknessEstimator, TrainConfig, UnetModel, UnetSpec, ValidationSet,
};
use cortexmorph::svf::{
    gaussian_smooth, integrate_svf, integrate_svf_reverse, jacobian_determinant,
};
use cortexmorph::thickness::GwiThresholds;
use cortexmorph::volume::io::{
    decode_nifti1, load_field, load_labels, load_volume, store_field, store_labels, store_volume,
    VolumeKind,
};
use cortexmorph::warp::{compose_displacements, warp_scalar, warp_scalar_adjoint};
use cortexmorph::{GridMeta, LabelVolume, ScalarVolume, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (u32, &'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_volume(meta: GridMeta, rng: &mut ChaCha8Rng) -> ScalarVolume {
    ScalarVolume::new(
        meta,
        (0..meta.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// Components `whole + frac` with `frac` in [0.1, 0.9]: sample points stay
/// away from cell faces under small perturbations.
fn offlattice(meta: GridMeta, rng: &mut ChaCha8Rng) -> VectorField {
    let data = (0..meta.len())
        .map(|_| [0; 3].map(|_: i32| rng.gen_range(-1..=1) as f64 + rng.gen_range(0.1..0.9)))
        .collect();
    VectorField::new(meta, data).unwrap()
}

fn positive_smooth(meta: GridMeta, rng: &mut ChaCha8Rng) -> VectorField {
    let raw = VectorField::new(
        meta,
        (0..meta.len())
            .map(|_| {
                [
                    rng.gen_range(0.1..0.5),
                    rng.gen_range(0.1..0.5),
                    rng.gen_range(0.1..0.5),
                ]
            })
            .collect(),
    )
    .unwrap();
    gaussian_smooth(&raw, 1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let meta = GridMeta::iso([6, 6, 6]).unwrap();
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let m = rand_volume(meta, &mut rng);
    let u = offlattice(meta, &mut rng);
    let g_out = rand_volume(meta, &mut rng);
    let (_, tape) = warp_scalar(&m, &u).unwrap();
    let (gm, gu) = warp_scalar_adjoint(&tape, &m, &u, &g_out).unwrap();
    let warp_obj =
        |m: &ScalarVolume, u: &VectorField| dot(&warp_scalar(m, u).unwrap().0.data, &g_out.data);
    let fd_m = fd_gradient(&m.data, 1e-3, |x| {
        warp_obj(&ScalarVolume::new(meta, x.to_vec()).unwrap(), &u)
    });
    let fd_u = fd_gradient(&u.to_flat(), 1e-3, |x| {
        warp_obj(&m, &VectorField::from_flat(meta, x).unwrap())
    });
    worst.push(("warp/image", max_relative_error(&gm.data, &fd_m).0));
    worst.push((
        "warp/displacement",
        max_relative_error(&gu.to_flat(), &fd_u).0,
    ));

    let z = positive_smooth(meta, &mut rng);
    let probe = offlattice(meta, &mut rng).to_flat();
    let (_, svf_tape) = integrate_svf(&z, Default::default()).unwrap();
    let g_z =
        cortexmorph::svf::svf_backward(&svf_tape, &VectorField::from_flat(meta, &probe).unwrap())
            .unwrap();
    let fd_z = fd_gradient(&z.to_flat(), 1e-5, |x| {
        let (phi, _) = integrate_svf(
            &VectorField::from_flat(meta, x).unwrap(),
            Default::default(),
        )
        .unwrap();
        dot(&phi.to_flat(), &probe)
    });
    worst.push(("svf", max_relative_error(&g_z.to_flat(), &fd_z).0));

    let a = rand_volume(meta, &mut rng);
    let b = rand_volume(meta, &mut rng);
    for (name, kind) in [
        ("similarity/mse", Similarity::Mse),
        ("similarity/l1", Similarity::L1),
    ] {
        let (_, g) = similarity(&a, &b, kind).unwrap();
        let fd = fd_gradient(&b.data, 1e-6, |x| {
            similarity(&a, &ScalarVolume::new(meta, x.to_vec()).unwrap(), kind)
                .unwrap()
                .0
        });
        worst.push((name, max_relative_error(&g.data, &fd).0));
    }

    let zr = offlattice(meta, &mut rng);
    let (_, g) = smoothness(&zr).unwrap();
    let fd = fd_gradient(&zr.to_flat(), 1e-4, |x| {
        smoothness(&VectorField::from_flat(meta, x).unwrap())
            .unwrap()
            .0
    });
    worst.push(("smoothness", max_relative_error(&g.to_flat(), &fd).0));

    let wm = rand_volume(meta, &mut rng);
    let wmgm = rand_volume(meta, &mut rng);
    for (name, sim) in [("loss/mse", Similarity::Mse), ("loss/l1", Similarity::L1)] {
        let cfg = LossConfig {
            similarity: sim,
            lambda: 0.05,
            ..Default::default()
        };
        let (_, g) = cortexmorph_loss(&wm, &wmgm, &z, &cfg).unwrap();
        let fd = fd_gradient(&z.to_flat(), 1e-3, |x| {
            cortexmorph_loss(&wm, &wmgm, &VectorField::from_flat(meta, x).unwrap(), &cfg)
                .unwrap()
                .0
                .total
        });
        worst.push((name, max_relative_error(&g.to_flat(), &fd).0));
    }

    let spec = UnetSpec {
        pooling_steps: 1,
        base_features: 2,
        ..Default::default()
    };
    let model = UnetModel::new(spec, 21).unwrap();
    let probe = offlattice(meta, &mut rng);
    let (_, utape) = unet_forward(&model, &wm, &wmgm).unwrap();
    let analytic = unet_backward(&model, &utape, &probe).unwrap().params;
    let all: Vec<usize> = (0..model.params.len()).collect();
    let numeric = fd_gradient_at(&model.params, &all, 1e-7, |p| {
        let m = UnetModel::from_params(spec, p.to_vec()).unwrap();
        dot(
            &unet_forward(&m, &wm, &wmgm).unwrap().0.to_flat(),
            &probe.to_flat(),
        )
    });
    let net = max_relative_error(&analytic, &numeric).0;

    let elementary = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "max rel err {elementary:.2e} over {} ops (tol 1e-4), {net:.2e} over {} network params (tol 1e-3), {secs:.1}s",
        worst.len(),
        all.len()
    );
    let failing: Vec<String> = worst
        .iter()
        .filter(|w| !(w.1 <= 1e-4))
        .map(|w| format!("{}={:.2e}", w.0, w.1))
        .collect();
    ensure(
        failing.is_empty() && net <= 1e-3 && secs < 120.0,
        if failing.is_empty() {
            detail
        } else {
            format!("{detail}; failing: {}", failing.join(", "))
        },
    )
}

fn smooth_velocity(meta: GridMeta, seed: u64, max: f64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = VectorField::new(
        meta,
        (0..meta.len())
            .map(|_| [0; 3].map(|_: i32| rng.gen_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap();
    let s = gaussian_smooth(&raw, 1.5);
    let peak = s.data.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    s.scaled(max / peak)
}

fn diffeomorphism() -> Outcome {
    let meta = GridMeta::iso([16, 16, 16]).unwrap();
    let zero = VectorField::zeros(meta);
    let identity = integrate_svf(&zero, Default::default()).unwrap().0 == zero;
    let mut residual = 0.0f64;
    let mut min_det = f64::INFINITY;
    for seed in 0..3 {
        let z = smooth_velocity(meta, seed, 0.5);
        let (fwd, _) = integrate_svf(&z, Default::default()).unwrap();
        let (rev, _) = integrate_svf_reverse(&z, Default::default()).unwrap();
        let (res, _) = compose_displacements(&fwd, &rev).unwrap();
        residual = residual.max(res.max_abs_where(|c| meta.is_interior(c)));
        let det = jacobian_determinant(&fwd).unwrap();
        for i in 0..meta.len() {
            if meta.is_interior(meta.coords(i)) {
                min_det = min_det.min(det.data[i]);
            }
        }
    }
    ensure(
        identity && residual <= 0.05 && min_det > 0.0,
        format!("exp(0)=id exact: {identity}; inverse residual {residual:.4} (tol 0.05); min interior det {min_det:.4}"),
    )
}

fn slab_recovery() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for t in [2.0, 3.0, 4.0] {
        let inst = make_phantom(&PhantomSpec::slab([32; 3], 12.0, t)).unwrap();
        let t0 = Instant::now();
        let r = register_iterative(&inst.wm, &inst.wmgm, &IterativeConfig::default()).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let mean = r
            .mean_thickness(&inst.wm, &inst.wmgm, GwiThresholds::default())
            .unwrap();
        ok &= (mean - t).abs() <= 0.3 && secs <= 300.0;
        parts.push(format!("t={t}: {mean:.3} in {secs:.0}s"));
    }
    ensure(
        ok,
        format!("32^3, tol 0.3 voxels, 300s: {}", parts.join("; ")),
    )
}

fn atrophy_sensitivity() -> Outcome {
    let subjects: Vec<PhantomSpec> = (0..10)
        .map(|s| PhantomSpec::slab([32, 4, 4], 11.0 + s as f64, 3.0))
        .collect();
    let levels: Vec<f64> = (1..=10).map(|k| k as f64 * 0.1).collect();
    let cohort = generate_cohort(&subjects, &levels, 7).unwrap();
    let cfg = IterativeConfig::default();
    let means: Vec<f64> = cortexmorph::par::map_indexed(cohort.len(), |i| {
        let inst = &cohort[i].instance;
        register_iterative(&inst.wm, &inst.wmgm, &cfg)
            .unwrap()
            .mean_thickness(&inst.wm, &inst.wmgm, GwiThresholds::default())
            .unwrap()
    });
    let mut induced = Vec::new();
    let mut measured = Vec::new();
    let (mut steps, mut up) = (0, 0);
    for s in 0..subjects.len() {
        let rows: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort[i].subject == s)
            .collect();
        let base = means[rows[0]];
        let series: Vec<f64> = rows.iter().map(|&i| base - means[i]).collect();
        for w in series.windows(2) {
            steps += 1;
            up += usize::from(w[1] >= w[0]);
        }
        for &i in &rows[1..] {
            induced.push(cohort[i].atrophy_mm);
            measured.push(base - means[i]);
        }
    }
    let r2 = r_squared(&induced, &measured).unwrap();
    let frac = up as f64 / steps as f64;
    ensure(
        r2 >= 0.95 && frac >= 0.95,
        format!("OLS R^2 {r2:.4} (min 0.95); monotone steps {up}/{steps} = {frac:.3} (min 0.95)"),
    )
}

fn training_pairs(n: usize, seed: u64) -> Vec<(ScalarVolume, ScalarVolume)> {
    (0..n)
        .map(|i| {
            let spec = PhantomSpec {
                jitter_seed: Some(seed + i as u64),
                ..PhantomSpec::slab([16, 8, 8], 5.0 + (i % 3) as f64, 2.0 + (i % 5) as f64 * 0.5)
            };
            let p = make_phantom(&spec).unwrap();
            (p.wm, p.wmgm)
        })
        .collect()
}

fn training_progress() -> Outcome {
    let train = training_pairs(20, 100);
    let validation = ValidationSet {
        pairs: training_pairs(4, 900),
        oracle_thickness: None,
    };
    let cfg = TrainConfig {
        model: UnetSpec {
            pooling_steps: 1,
            base_features: 4,
            ..Default::default()
        },
        patch_size: [16, 8, 8],
        epochs: 50,
        seed: 42,
        ..Default::default()
    };
    let run = || train_amortized(&train, Some(&validation), &cfg).unwrap();
    let a = run();
    let b = run();
    let deterministic = a == b;
    let first = a
        .iter()
        .find(|c| c.epoch == 1)
        .and_then(|c| c.validation_loss)
        .unwrap();
    let last = a.last().and_then(|c| c.validation_loss).unwrap();
    ensure(
        deterministic && last <= 0.5 * first,
        format!(
            "validation loss epoch 1 {first:.4e} -> epoch {} {last:.4e} (ratio {:.3}, max 0.5); repeat run identical: {deterministic}",
            a.last().unwrap().epoch,
            last / first
        ),
    )
}

/// Answers for subject `i` with the oracle value of subject `perm[i]`.
struct Permuted {
    pairs: Vec<(ScalarVolume, ScalarVolume)>,
    oracle: Vec<f64>,
    perm: Vec<usize>,
}

enum Candidate<'a> {
    Exact(IterativeEstimator),
    Permuted(&'a Permuted),
}

impl ThicknessEstimator for Candidate<'_> {
    fn mean_thickness(&self, wm: &ScalarVolume, wmgm: &ScalarVolume) -> cortexmorph::Result<f64> {
        match self {
            Candidate::Exact(e) => e.mean_thickness(wm, wmgm),
            Candidate::Permuted(p) => {
                let i = p
                    .pairs
                    .iter()
                    .position(|(a, b)| a == wm && b == wmgm)
                    .expect("known subject");
                Ok(p.oracle[p.perm[i]])
            }
        }
    }
}

fn model_selection() -> Outcome {
    let pairs: Vec<(ScalarVolume, ScalarVolume)> = (0..6)
        .map(|i| {
            let spec = PhantomSpec {
                jitter_seed: Some(50 + i),
                ..PhantomSpec::slab([32, 4, 4], 10.0 + i as f64, 2.0 + 0.4 * i as f64)
            };
            let p = make_phantom(&spec).unwrap();
            (p.wm, p.wmgm)
        })
        .collect();
    let cfg = IterativeConfig::default();
    let exact = IterativeEstimator(cfg);
    let oracle: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| exact.mean_thickness(a, b).unwrap())
        .collect();
    let permuted = Permuted {
        pairs: pairs.clone(),
        oracle,
        perm: vec![3, 5, 0, 4, 1, 2],
    };
    let candidates = [
        (1, Candidate::Exact(exact)),
        (2, Candidate::Permuted(&permuted)),
    ];
    let sel = select_model(&candidates, &pairs, &cfg).unwrap();
    let fmt = |s: Option<f64>| s.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    ensure(
        sel.index == 0 && sel.scores[0] == Some(1.0),
        format!(
            "{} subjects; picked candidate {} (exact icc {}, permuted icc {})",
            pairs.len(),
            sel.index,
            fmt(sel.scores[0]),
            fmt(sel.scores[1])
        ),
    )
}

fn speedup() -> Outcome {
    let spec = PhantomSpec {
        jitter_seed: Some(3),
        ..PhantomSpec::slab([64; 3], 24.0, 3.0)
    };
    let inst = make_phantom(&spec).unwrap();
    let model = UnetModel::new(UnetSpec::default(), 0).unwrap();
    let t0 = Instant::now();
    let it = register_iterative(&inst.wm, &inst.wmgm, &IterativeConfig::default()).unwrap();
    let iterative = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    infer_velocity(&model, &inst.wm, &inst.wmgm, &LossConfig::default()).unwrap();
    let amortized = t1.elapsed().as_secs_f64();
    let ratio = iterative / amortized;
    ensure(
        ratio >= 10.0,
        format!(
            "64^3: iterative {iterative:.1}s ({} iters), amortized {amortized:.2}s, ratio {ratio:.1} (min 10)",
            it.iterations
        ),
    )
}

/// Shrout-Fleiss mean squares, written out from the sums of squares.
fn anova_icc(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let k = rows[0].len() as f64;
    let grand = rows.iter().flatten().sum::<f64>() / (n * k);
    let ss_rows: f64 = rows
        .iter()
        .map(|r| k * (r.iter().sum::<f64>() / k - grand).powi(2))
        .sum();
    let ss_cols: f64 = (0..rows[0].len())
        .map(|j| n * (rows.iter().map(|r| r[j]).sum::<f64>() / n - grand).powi(2))
        .sum();
    let ss_total: f64 = rows.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let msr = ss_rows / (n - 1.0);
    let msc = ss_cols / (k - 1.0);
    let mse = (ss_total - ss_rows - ss_cols) / ((n - 1.0) * (k - 1.0));
    (msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / n)
}

fn statistics() -> Outcome {
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let table = vec![
        vec![9.0, 2.0, 5.0],
        vec![6.0, 1.0, 3.0],
        vec![8.0, 4.0, 6.0],
        vec![7.0, 1.0, 2.0],
        vec![10.0, 5.0, 6.0],
        vec![6.0, 2.0, 4.0],
    ];
    let icc = icc_2_1(&RatingsTable::from_rows(&table).unwrap()).unwrap();
    errs.push(("icc 6x3 vs anova", (icc - anova_icc(&table)).abs()));

    // Columns offset by one: MS_R = 10/3, MS_C = 2, MS_E = 0, so ICC = 10/13.
    let offset = vec![
        vec![1.0, 2.0],
        vec![2.0, 3.0],
        vec![3.0, 4.0],
        vec![4.0, 5.0],
    ];
    let icc_off = icc_2_1(&RatingsTable::from_rows(&offset).unwrap()).unwrap();
    errs.push(("icc offset vs 10/13", (icc_off - 10.0 / 13.0).abs()));
    let x: Vec<f64> = offset.iter().map(|r| r[0]).collect();
    let y: Vec<f64> = offset.iter().map(|r| r[1]).collect();
    let r_off = pearson_r(&x, &y).unwrap();

    // x = 1..5, y = (2, 4, 5, 4, 5): Sxx = 10, Sxy = 6, Syy = 6.
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 4.0, 5.0, 4.0, 5.0];
    errs.push((
        "pearson vs 6/sqrt(60)",
        (pearson_r(&x, &y).unwrap() - 6.0 / 60f64.sqrt()).abs(),
    ));
    // Fit y = 2.2 + 0.6x: SS_res = 2.4, SS_tot = 6.
    errs.push(("r_squared vs 0.6", (r_squared(&x, &y).unwrap() - 0.6).abs()));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let offset_ok = icc_off < r_off * r_off;
    ensure(
        worst <= 1e-9 && offset_ok,
        format!(
            "max abs err {worst:.1e} over {} oracles (tol 1e-9); offset columns icc {icc_off:.4} < pearson^2 {:.4}: {offset_ok}",
            errs.len(),
            r_off * r_off
        ),
    )
}

fn nifti_bytes() -> (Vec<u8>, Vec<f32>) {
    let dims = [3i16, 2, 4];
    let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 1.5).collect();
    let mut b = vec![0u8; 352];
    b[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim = [3i16, dims[0], dims[1], dims[2], 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        b[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
    }
    b[70..72].copy_from_slice(&16i16.to_le_bytes());
    b[72..74].copy_from_slice(&32i16.to_le_bytes());
    for (k, p) in [1.0f32, 0.5, 2.0, 1.25].iter().enumerate() {
        b[76 + 4 * k..80 + 4 * k].copy_from_slice(&p.to_le_bytes());
    }
    b[108..112].copy_from_slice(&352f32.to_le_bytes());
    b[112..116].copy_from_slice(&1f32.to_le_bytes());
    b[344..348].copy_from_slice(b"n+1\0");
    for v in &values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    (b, values)
}

fn io_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let meta = GridMeta::new([5, 3, 4], [0.8, 1.0, 1.2]).unwrap();
    let arbitrary = ScalarVolume::new(
        meta,
        (0..meta.len())
            .map(|_| rng.gen::<f64>() * 1e3 - 500.0)
            .collect(),
    )
    .unwrap();
    let single = ScalarVolume::new(
        meta,
        (0..meta.len()).map(|_| rng.gen::<f32>() as f64).collect(),
    )
    .unwrap();
    let labels =
        LabelVolume::new(meta, (0..meta.len()).map(|_| rng.gen_range(0..7)).collect()).unwrap();
    let field = VectorField::new(
        meta,
        (0..meta.len())
            .map(|_| [0; 3].map(|_: i32| rng.gen_range(-2.0..2.0)))
            .collect(),
    )
    .unwrap();

    let mut exact = true;
    for (name, v) in [("a", &arbitrary), ("b", &single)] {
        let p = dir.path().join(format!("{name}.mvol"));
        store_volume(v, &p).unwrap();
        let back = load_volume(&p, VolumeKind::Intensity)
            .unwrap()
            .into_scalar()
            .unwrap();
        exact &= back.meta == v.meta
            && back
                .data
                .iter()
                .zip(&v.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let p = dir.path().join("labels.mvol");
    store_labels(&labels, &p).unwrap();
    exact &= load_labels(&p).unwrap() == labels;
    let p = dir.path().join("field.mvol");
    store_field(&field, &p).unwrap();
    let back = load_field(&p).unwrap();
    exact &= back
        .to_flat()
        .iter()
        .zip(field.to_flat())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let (bytes, values) = nifti_bytes();
    let nii = decode_nifti1(&bytes).unwrap();
    let parsed = nii.meta.dims == [3, 2, 4]
        && nii.meta.spacing_mm == [0.5, 2.0, 1.25]
        && nii.data.iter().zip(&values).all(|(a, b)| *a == *b as f64);
    ensure(
        exact && parsed,
        format!("MVOL scalar/label/vector bit-exact: {exact}; hand-built NIfTI-1 parsed: {parsed}"),
    )
}

fn main() -> ExitCode {
    let checks: [Check; 9] = [
        (1, "gradient correctness", gradients),
        (2, "diffeomorphism properties", diffeomorphism),
        (3, "slab thickness recovery", slab_recovery),
        (4, "subvoxel atrophy sensitivity", atrophy_sensitivity),
        (5, "amortized training progress", training_progress),
        (6, "model selection oracle", model_selection),
        (7, "speedup direction", speedup),
        (8, "statistics oracles", statistics),
        (9, "io round-trip", io_round_trip),
    ];
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, check) in checks {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  [{n}] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL  [{n}] {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
