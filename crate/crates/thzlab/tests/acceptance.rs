//! End-to-end acceptance gate. Each test covers one release criterion
//! and prints a single PASS/FAIL line (visible with --nocapture or on
//! failure).

use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Array4};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thzlab::cs::{self, LinearOperator, MatrixKind};
use thzlab::holo;
use thzlab::nn;
use thzlab::phantom::{make_primitive, Phantom, Primitive};
use thzlab::physics::{self, MaterialSpec, WaterVaporModel, C_MM_PER_PS};
use thzlab::sim::{simulate_pixel, simulate_scan, ScanConfig};
use thzlab::spectral::{self, fft_trace, select_water_bands, feature_stack};
use thzlab::tensorio::{Image2D, Volume3D};
use thzlab::tomo::{fbp, radon, radon_adjoint, FbpFilter, Sinogram};

fn report(criterion: &str, ok: bool, detail: String) {
    println!(
        "ACCEPTANCE {}: {} ({})",
        criterion,
        if ok { "PASS" } else { "FAIL" },
        detail
    );
    assert!(ok, "{}: {}", criterion, detail);
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|&y| y * y).sum();
    (num / den).sqrt()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_tomography_oracle() {
    let t0 = Instant::now();
    let n = 128usize;
    let r = 40.0f64;
    let c = (n as f64 - 1.0) / 2.0;
    let disk = Image2D::new(
        Array2::from_shape_fn((n, n), |(i, j)| {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            if d2 <= r * r {
                1.0
            } else {
                0.0
            }
        }),
        1.0,
    )
    .unwrap();
    let angles: Vec<f64> = (0..180).map(|a| a as f64).collect();
    let sino = radon(&disk, &angles).unwrap();

    // analytic chord profile 2*sqrt(r^2 - u^2), identical at every angle
    let mut measured = Vec::new();
    let mut analytic = Vec::new();
    for v in 0..sino.n_angles() {
        for b in 0..sino.n_bins() {
            let u = b as f64 - c;
            measured.push(sino.data[(v, b)] as f64);
            analytic.push(if u.abs() < r {
                2.0 * (r * r - u * u).sqrt()
            } else {
                0.0
            });
        }
    }
    let sino_err = rel_l2(&measured, &analytic);

    // FBP back to the disk, judged inside the 2-pixel-eroded interior
    let rec = fbp(&sino, FbpFilter::RamLak).unwrap();
    let mut inside = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            if d2 <= (r - 2.0) * (r - 2.0) {
                inside.push(rec.data[(i, j)] as f64);
                truth.push(1.0);
            }
        }
    }
    let fbp_err = rel_l2(&inside, &truth);
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "1 tomography-oracle",
        sino_err <= 0.02 && fbp_err <= 0.05 && elapsed < 10.0,
        format!(
            "sinogram rel L2 {:.4} (<=0.02), eroded-disk FBP rel L2 {:.4} (<=0.05), {:.2}s (<10s)",
            sino_err, fbp_err, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_2_adjoint_identities() {
    let mut worst_radon = 0.0f64;
    let n = 64usize;
    let angles: Vec<f64> = (0..30).map(|a| a as f64 * 6.0).collect();
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let x = Image2D::new(
            Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0f32..1.0)),
            0.5,
        )
        .unwrap();
        let y = Sinogram::new(
            Array2::from_shape_fn((angles.len(), n), |_| rng.gen_range(-1.0f32..1.0)),
            angles.clone(),
            0.5,
        )
        .unwrap();
        let ax = radon(&x, &angles).unwrap();
        let aty = radon_adjoint(&y, n).unwrap();
        let lhs: f64 = ax
            .data
            .iter()
            .zip(y.data.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(aty.data.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let ax_norm: f64 = ax.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let y_norm: f64 = y.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        worst_radon = worst_radon.max((lhs - rhs).abs() / (ax_norm * y_norm));
    }

    let mut worst_fresnel = 0.0f64;
    let grid = 16usize;
    let m = 48usize;
    for trial in 0..20u64 {
        let base = cs::make_sensing_matrix(MatrixKind::BernoulliPm1, m, grid * grid, trial).unwrap();
        let op = cs::FresnelOperator::new(base, 5.0, 0.5, (grid, grid), 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let x = Array1::from_shape_fn(op.cols(), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(op.rows(), |_| rng.gen_range(-1.0..1.0));
        let ax = op.apply(&x);
        let aty = op.apply_adjoint(&y);
        let lhs = ax.dot(&y);
        let rhs = x.dot(&aty);
        let den = ax.dot(&ax).sqrt() * y.dot(&y).sqrt();
        worst_fresnel = worst_fresnel.max((lhs - rhs).abs() / den);
    }
    report(
        "2 adjoint-identities",
        worst_radon <= 1e-4 && worst_fresnel <= 1e-6,
        format!(
            "radon worst {:.2e} (<=1e-4), fresnel-cs worst {:.2e} (<=1e-6), 20 trials each",
            worst_radon, worst_fresnel
        ),
    );
}

// ---------------------------------------------------------------------------

fn continuation_solve(
    op: &dyn LinearOperator,
    s: &Array1<f64>,
    lambda: f64,
) -> cs::SolveResult {
    let s_max = s.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut lam = (s_max * 0.5).max(lambda);
    let mut x = Array1::<f64>::zeros(op.cols());
    loop {
        let r = cs::fista_warm(op, s, lam, 400, 1e-12, x).unwrap();
        x = r.x;
        if lam <= lambda {
            return cs::fista_warm(op, s, lambda, 400, 1e-14, x).unwrap();
        }
        lam = (lam * 0.1).max(lambda);
    }
}

#[test]
fn criterion_3_sparse_recovery() {
    let t0 = Instant::now();
    let (n, k, m) = (256usize, 8usize, 128usize);
    let lambda = 1e-6;
    let mut successes = 0;
    let mut ista_monotone = true;
    for seed in 0..20u64 {
        let mat = cs::make_sensing_matrix(MatrixKind::BernoulliPm1, m, n, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let mut x_true = Array1::<f64>::zeros(n);
        let mut placed = 0;
        while placed < k {
            let i = rng.gen_range(0..n);
            if x_true[i] == 0.0 {
                let mag = rng.gen_range(0.5..1.5);
                x_true[i] = if rng.gen_bool(0.5) { mag } else { -mag };
                placed += 1;
            }
        }
        let s = mat.apply(&x_true);
        let r = continuation_solve(&mat, &s, lambda);
        let rel = (&r.x - &x_true).mapv(|v| v * v).sum().sqrt()
            / x_true.mapv(|v| v * v).sum().sqrt();
        let thresh = 1e-4 * x_true.iter().fold(0.0f64, |mx, &v| mx.max(v.abs()));
        let support_ok = (0..n).all(|i| (x_true[i] != 0.0) == (r.x[i].abs() > thresh));
        if support_ok && rel <= 1e-3 {
            successes += 1;
        }
        // ISTA objective must never increase
        let ista = cs::ista(&mat, &s, 1e-3, 150, 0.0).unwrap();
        for w in ista.history.windows(2) {
            if w[1] > w[0] + 1e-12 * w[0].abs().max(1.0) {
                ista_monotone = false;
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "3 sparse-recovery",
        successes >= 18 && ista_monotone && elapsed < 30.0,
        format!(
            "{}/20 exact recoveries (>=18), ista monotone {}, {:.2}s (<30s)",
            successes, ista_monotone, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------

/// Sub-sample peak location via FFT zero-padded upsampling.
fn peak_time_ps(samples: &[f32], dt_ps: f64, factor: usize) -> f64 {
    let n = samples.len();
    let x: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let mut bins = spectral::rfft(&x);
    bins.resize(n * factor / 2 + 1, Complex::new(0.0, 0.0));
    let up = spectral::irfft(&bins, n * factor);
    let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
    for (i, &v) in up.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as f64 * dt_ps / factor as f64
}

#[test]
fn criterion_4_time_of_flight() {
    let n_index = 1.5f64;
    let len_mm = 1.0f64;
    let material = MaterialSpec::new(
        "slab15",
        vec![0.01, 5.0],
        vec![n_index, n_index],
        vec![0.0, 0.0],
    )
    .unwrap();
    // 4 voxels at 0.25 mm pitch along x = exactly 1 mm of material
    let shape = (4usize, 16usize, 16usize);
    let x0 = 6.0;
    let slab = make_primitive(
        shape,
        &Primitive::Box {
            min: [0.0, 0.0, x0 - 0.25],
            max: [3.0, 15.0, x0 + 4.0 - 0.75],
        },
        material.clone(),
        0.25,
    )
    .unwrap();
    let empty = Phantom {
        grid: Volume3D::new(Array3::zeros(shape), 0.25).unwrap(),
        material,
    };
    let mut cfg = ScanConfig::default();
    cfg.n_views = 1;
    cfg.angle_step_deg = 180.0;
    cfg.x_range_mm = 16.0 * 0.25;
    cfg.noise_dynamic_range_db = 400.0; // noiseless
    cfg.water = WaterVaporModel::dry();
    let t_sample = simulate_pixel(&slab, 0.0, 2, 8, &cfg).unwrap();
    let t_ref = simulate_pixel(&empty, 0.0, 2, 8, &cfg).unwrap();
    let dt = cfg.pulse.dt_ps;

    let expected_ps = (n_index - 1.0) * len_mm / C_MM_PER_PS;
    let idx_delay = spectral::time_max_index(&t_sample) as f64 - spectral::time_max_index(&t_ref) as f64;
    let sample_err = (idx_delay * dt - expected_ps).abs();

    // sub-sample delay, then invert for the thickness
    let delay_ps = peak_time_ps(&t_sample.samples, dt, 32) - peak_time_ps(&t_ref.samples, dt, 32);
    let l_est = C_MM_PER_PS * delay_ps / (n_index - 1.0);
    let bound_mm = C_MM_PER_PS * dt / (2.0 * (n_index - 1.0));
    report(
        "4 time-of-flight",
        sample_err <= dt && (l_est - len_mm).abs() <= bound_mm,
        format!(
            "sampled delay off by {:.4} ps (<= dt {}), inverted L {:.4} mm (|err| {:.4} <= {:.3})",
            sample_err,
            dt,
            l_est,
            (l_est - len_mm).abs(),
            bound_mm
        ),
    );
}

// ---------------------------------------------------------------------------

fn smooth_object(n: usize, pitch: f64, freq: f64) -> holo::ComplexField2D {
    let blobs = [
        (0.42, 0.55, 0.10, 0.9),
        (0.62, 0.38, 0.12, 0.6),
        (0.55, 0.65, 0.08, 0.8),
    ];
    let data = Array2::from_shape_fn((n, n), |(i, j)| {
        let mut v = 0.15f64;
        for &(ci, cj, sig, amp) in &blobs {
            let d2 = (i as f64 - ci * n as f64).powi(2) + (j as f64 - cj * n as f64).powi(2);
            let s = sig * n as f64;
            v += amp * (-d2 / (2.0 * s * s)).exp();
        }
        Complex::new(v, 0.0)
    });
    holo::ComplexField2D::new(data, pitch, freq).unwrap()
}

/// Strip frequencies outside a low-pass square so the field is strictly
/// band-limited (fits inside the off-axis filter window, no evanescent
/// content).
fn band_limit(u: &holo::ComplexField2D, keep: usize) -> holo::ComplexField2D {
    let (h, w) = u.data.dim();
    let mut spec = u.data.clone();
    holo::fft2(&mut spec, false);
    for i in 0..h {
        for j in 0..w {
            let ki = if i > h / 2 { h - i } else { i };
            let kj = if j > w / 2 { w - j } else { j };
            if ki > keep || kj > keep {
                spec[(i, j)] = Complex::new(0.0, 0.0);
            }
        }
    }
    holo::fft2(&mut spec, true);
    holo::ComplexField2D::new(spec, u.pitch_mm, u.freq_thz).unwrap()
}

#[test]
fn criterion_5_holography_roundtrip() {
    let n = 128usize;
    let freq = 1.0;
    let obj = band_limit(&smooth_object(n, 0.25, freq), 6);
    let z = 20.0;
    let at_sensor = holo::angular_spectrum_propagate(&obj, z);
    let hologram = holo::synthesize_hologram(&at_sensor, 16.0, 1.0).unwrap();
    let rec = holo::reconstruct_offaxis(&hologram, 16.0, 1.0, z, freq).unwrap();
    let amp_rec: Vec<f64> = rec.data.iter().map(|c| c.norm()).collect();
    let amp_true: Vec<f64> = obj.data.iter().map(|c| c.norm()).collect();
    let amp_err = rel_l2(&amp_rec, &amp_true);

    // propagate(z) then propagate(-z) is the identity on band-limited fields
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut spec = Array2::from_elem((n, n), Complex::new(0.0, 0.0));
    for i in 0..n {
        for j in 0..n {
            let fi = if i <= n / 2 { i } else { n - i };
            let fj = if j <= n / 2 { j } else { n - j };
            if fi < n / 8 && fj < n / 8 {
                spec[(i, j)] = Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
    }
    holo::fft2(&mut spec, true);
    let field = holo::ComplexField2D::new(spec, 0.25, 0.5).unwrap();
    let back = holo::angular_spectrum_propagate(&holo::angular_spectrum_propagate(&field, z), -z);
    let peak = field.data.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    let max_err = field
        .data
        .iter()
        .zip(back.data.iter())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f64, f64::max)
        / peak;
    report(
        "5 holography-roundtrip",
        amp_err <= 0.05 && max_err <= 1e-10,
        format!(
            "amplitude rel L2 {:.4} (<=0.05), propagate roundtrip max err {:.2e} (<=1e-10)",
            amp_err, max_err
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_6_spectral_physics() {
    // noiseless air pixel through 30 mm of humid lab air
    let shape = (4usize, 16usize, 16usize);
    let empty = Phantom {
        grid: Volume3D::new(Array3::zeros(shape), 0.25).unwrap(),
        material: MaterialSpec::hips(),
    };
    let mut cfg = ScanConfig::default();
    cfg.n_views = 1;
    cfg.angle_step_deg = 180.0;
    cfg.x_range_mm = 4.0;
    cfg.noise_dynamic_range_db = 400.0;
    let trace = simulate_pixel(&empty, 0.0, 2, 8, &cfg).unwrap();
    let spec = fft_trace(&trace).unwrap();
    let amp = spec.amplitude();

    let mut lines_ok = true;
    let mut missing = Vec::new();
    for line in &cfg.water.lines {
        if line.center_thz < 0.3 || line.center_thz > 1.3 {
            continue;
        }
        let b = spec.nearest_bin(line.center_thz);
        // a local dip within +-2 bins of the configured line center
        let found = (b.saturating_sub(2)..=b + 2)
            .any(|i| i > 0 && i + 1 < amp.len() && amp[i] < amp[i - 1] && amp[i] < amp[i + 1]);
        if !found {
            lines_ok = false;
            missing.push(line.center_thz);
        }
    }

    let bands = select_water_bands(&cfg.water, 0.3, 1.3, 12).unwrap();
    let bands_ok = bands.len() == 12
        && bands.windows(2).all(|w| w[1] > w[0])
        && bands.iter().all(|&f| f > 0.3 && f < 1.3);

    // Parseval with one-sided spectrum bookkeeping
    let x: Vec<f64> = trace.samples.iter().map(|&v| v as f64).collect();
    let n = x.len();
    let bins = spectral::rfft(&x);
    let e_time: f64 = x.iter().map(|&v| v * v).sum();
    let mut e_freq = bins[0].norm_sqr() + bins[n / 2].norm_sqr();
    for b in &bins[1..n / 2] {
        e_freq += 2.0 * b.norm_sqr();
    }
    e_freq /= n as f64;
    let parseval = (e_time - e_freq).abs() / e_time;
    report(
        "6 spectral-physics",
        lines_ok && bands_ok && parseval <= 1e-9,
        format!(
            "water-line dips present {} (missing {:?}), 12 ascending bands {}, parseval rel {:.2e} (<=1e-9)",
            lines_ok, missing, bands_ok, parseval
        ),
    );
}

// ---------------------------------------------------------------------------

fn mse_loss_and_grad(y: &Array4<f64>, target: &Array4<f64>) -> (f64, Array4<f64>) {
    let n = y.len() as f64;
    let diff = y - target;
    let loss = diff.iter().map(|&d| d * d).sum::<f64>() / n;
    (loss, diff.mapv(|d| 2.0 * d / n))
}

/// Finite-difference check of one op given packed-parameter evaluation.
fn op_grad_error<F>(f: F, x0: &[f64]) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x0);
    nn::grad_check(|v| f(v).0, x0, &analytic, 1e-3, 512, 99, None)
}

fn toy_cfg() -> nn::SarnetConfig {
    nn::SarnetConfig {
        base_channels: 4,
        max_channels: 8,
        subspace_dim: 2,
        cam_reduction: 2,
        stem_kernel: 3,
    }
}

fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
}

fn primitive_grad_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();

    let x = rand4(&mut rng, (2, 3, 5, 5));
    let w = rand4(&mut rng, (4, 3, 3, 3));
    let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0f64..1.0));
    let target = rand4(&mut rng, (2, 4, 5, 5));
    let (nx, nw) = (x.len(), w.len());
    let mut flat: Vec<f64> = x.iter().copied().collect();
    flat.extend(w.iter());
    flat.extend(b.iter());
    out.push((
        "conv2d",
        op_grad_error(
            |v| {
                let xx = Array4::from_shape_vec((2, 3, 5, 5), v[..nx].to_vec()).unwrap();
                let ww = Array4::from_shape_vec((4, 3, 3, 3), v[nx..nx + nw].to_vec()).unwrap();
                let bb = Array1::from_vec(v[nx + nw..].to_vec());
                let y = nn::conv2d_fwd(&xx, &ww, Some(&bb)).unwrap();
                let (loss, gy) = mse_loss_and_grad(&y, &target);
                let (gx, gw, gb) = nn::conv2d_bwd(&xx, &ww, &gy);
                let mut g: Vec<f64> = gx.iter().copied().collect();
                g.extend(gw.iter());
                g.extend(gb.iter());
                (loss, g)
            },
            &flat,
        ),
    ));

    let x = rand4(&mut rng, (2, 3, 4, 4));
    let target = rand4(&mut rng, (2, 3, 4, 4));
    let mut flat: Vec<f64> = x.iter().copied().collect();
    flat.extend((0..3).map(|_| rng.gen_range(0.5..1.5)));
    flat.extend((0..3).map(|_| rng.gen_range(-0.5..0.5)));
    let nx = x.len();
    out.push((
        "batchnorm2d",
        op_grad_error(
            |v| {
                let xx = Array4::from_shape_vec((2, 3, 4, 4), v[..nx].to_vec()).unwrap();
                let gamma = Array1::from_vec(v[nx..nx + 3].to_vec());
                let beta = Array1::from_vec(v[nx + 3..].to_vec());
                let mut rm = Array1::zeros(3);
                let mut rv = Array1::ones(3);
                let (y, cache) =
                    nn::batchnorm2d_fwd(&xx, &gamma, &beta, &mut rm, &mut rv, true).unwrap();
                let (loss, gy) = mse_loss_and_grad(&y, &target);
                let (gx, gg, gb) = nn::batchnorm2d_bwd(&cache, &gamma, &gy);
                let mut g: Vec<f64> = gx.iter().copied().collect();
                g.extend(gg.iter());
                g.extend(gb.iter());
                (loss, g)
            },
            &flat,
        ),
    ));

    let x = rand4(&mut rng, (1, 2, 4, 4));
    let target = rand4(&mut rng, (1, 2, 4, 4));
    let flat: Vec<f64> = x.iter().copied().collect();
    out.push((
        "relu",
        op_grad_error(
            |v| {
                let xx = Array4::from_shape_vec((1, 2, 4, 4), v.to_vec()).unwrap();
                let y = nn::relu_fwd(&xx);
                let (loss, gy) = mse_loss_and_grad(&y, &target);
                (loss, nn::relu_bwd(&xx, &gy).iter().copied().collect())
            },
            &flat,
        ),
    ));
    out.push((
        "sigmoid",
        op_grad_error(
            |v| {
                let xx = Array4::from_shape_vec((1, 2, 4, 4), v.to_vec()).unwrap();
                let y = nn::sigmoid_fwd(&xx);
                let (loss, gy) = mse_loss_and_grad(&y, &target);
                (loss, nn::sigmoid_bwd(&y, &gy).iter().copied().collect())
            },
            &flat,
        ),
    ));

    let x = rand4(&mut rng, (1, 2, 4, 4));
    let t_down = rand4(&mut rng, (1, 2, 2, 2));
    let flat: Vec<f64> = x.iter().copied().collect();
    out.push((
        "downsample",
        op_grad_error(
            |v| {
                let xx = Array4::from_shape_vec((1, 2, 4, 4), v.to_vec()).unwrap();
                let y = nn::downsample_half_fwd(&xx).unwrap();
                let (loss, gy) = mse_loss_and_grad(&y, &t_down);
                (loss, nn::downsample_half_bwd(&gy).iter().copied().collect())
            },
            &flat,
        ),
    ));
    let t_up = rand4(&mut rng, (1, 2, 8, 8));
    out.push((
        "upsample",
        op_grad_error(
            |v| {
                let xx = Array4::from_shape_vec((1, 2, 4, 4), v.to_vec()).unwrap();
                let y = nn::upsample_double_fwd(&xx);
                let (loss, gy) = mse_loss_and_grad(&y, &t_up);
                (loss, nn::upsample_double_bwd(&gy).iter().copied().collect())
            },
            &flat,
        ),
    ));

    let basis = ndarray::Array3::from_shape_fn((2, 3, 12), |_| rng.gen_range(-1.0..1.0));
    let t_gs = ndarray::Array3::from_shape_fn((2, 3, 12), |_| rng.gen_range(-1.0..1.0));
    let flat: Vec<f64> = basis.iter().copied().collect();
    out.push((
        "gram-schmidt",
        op_grad_error(
            |v| {
                let b = ndarray::Array3::from_shape_vec((2, 3, 12), v.to_vec()).unwrap();
                let (q, cache) = nn::gram_schmidt_fwd(&b);
                let diff = &q - &t_gs;
                let n = q.len() as f64;
                let loss = diff.iter().map(|&d| d * d).sum::<f64>() / n;
                let gq = diff.mapv(|d| 2.0 * d / n);
                (loss, nn::gram_schmidt_bwd(&cache, &q, &gq).iter().copied().collect())
            },
            &flat,
        ),
    ));
    out
}

fn full_net_grad_error(net: &mut nn::Sarnet, inputs: &nn::SarnetInputs, target: &Array4<f64>) -> f64 {
    net.params.zero_grad();
    let (y, cache) = net.forward(inputs, false).unwrap();
    let (_, gy) = mse_loss_and_grad(&y, target);
    net.backward(&cache, &gy);
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    for idx in 0..net.params.len() {
        let p = net.params.get(idx);
        if p.trainable {
            flat.extend(p.data.iter());
            analytic.extend(p.grad.iter());
        }
    }
    let snapshot: Vec<ndarray::ArrayD<f64>> =
        (0..net.params.len()).map(|i| net.params.get(i).data.clone()).collect();
    let cell = std::cell::RefCell::new(net);
    nn::grad_check(
        |v| {
            let mut net = cell.borrow_mut();
            let mut off = 0;
            for pi in 0..net.params.len() {
                let trainable = net.params.get(pi).trainable;
                let p = net.params.get_mut(pi);
                p.data.assign(&snapshot[pi]);
                if trainable {
                    for d in p.data.iter_mut() {
                        *d = v[off];
                        off += 1;
                    }
                }
            }
            let (y, _) = net.forward(inputs, false).unwrap();
            mse_loss_and_grad(&y, target).0
        },
        &flat,
        &analytic,
        1e-3,
        512,
        101,
        None,
    )
}

/// 64x64 simulated feature stacks plus clean targets for overfitting.
fn simulated_trainset(seed: u64) -> (Vec<spectral::FeatureStack>, Vec<Image2D>) {
    let size = 64usize;
    let pitch = 0.25;
    let shape = (size, size, size);
    let c = (size as f64 - 1.0) / 2.0;
    let sphere = make_primitive(
        shape,
        &Primitive::Sphere {
            center: [c, c - 0.15 * size as f64, c - 0.15 * size as f64],
            radius: 0.2 * size as f64,
        },
        MaterialSpec::hips(),
        pitch,
    )
    .unwrap();
    let cyl = make_primitive(
        shape,
        &Primitive::Cylinder {
            center_xy: [c + 0.18 * size as f64, c + 0.18 * size as f64],
            radius: 0.1 * size as f64,
            z_min: 0.0,
            z_max: size as f64 - 1.0,
        },
        MaterialSpec::hips(),
        pitch,
    )
    .unwrap();
    let ph = thzlab::phantom::csg_union(&sphere, &cyl).unwrap();
    let mut cfg = ScanConfig::default();
    cfg.n_views = 4;
    cfg.angle_step_deg = 45.0;
    cfg.x_range_mm = size as f64 * pitch;
    cfg.rng_seed = seed;
    let cube = simulate_scan(&ph, &cfg).unwrap();
    let reference = fft_trace(&physics::reference_pulse(&cfg.pulse).unwrap()).unwrap();
    let bands = select_water_bands(&cfg.water, 0.3, 1.3, 12).unwrap();
    let mut stacks = Vec::new();
    let mut targets = Vec::new();
    let mut peak = 0.0f32;
    let mut raw_targets = Vec::new();
    for v in 0..cube.n_views() {
        stacks.push(
            feature_stack(cube.view(v), cfg.pulse.dt_ps, pitch, &bands, &reference).unwrap(),
        );
        let img = ph.ground_truth_projection(cube.angles_deg[v]).unwrap();
        peak = img.data.iter().fold(peak, |m, &x| m.max(x));
        raw_targets.push(img);
    }
    for mut t in raw_targets {
        t.data.mapv_inplace(|v| v / peak);
        targets.push(t);
    }
    (stacks, targets)
}

#[test]
fn criterion_7_neural_correctness() {
    let t0 = Instant::now();
    // primitive gradient checks
    let prim = primitive_grad_errors();
    let prim_ok = prim.iter().all(|&(_, e)| e <= 1e-3);

    // full-network gradient check and basis orthonormality
    let mut net = nn::Sarnet::new(toy_cfg(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = nn::SarnetInputs {
        timemax: rand4(&mut rng, (2, 1, 16, 16)),
        amp: (0..4)
            .map(|b| rand4(&mut rng, (2, 3, 16 >> (b + 1), 16 >> (b + 1))))
            .collect(),
        phase: (0..4)
            .map(|b| rand4(&mut rng, (2, 3, 16 >> (b + 1), 16 >> (b + 1))))
            .collect(),
    };
    let target = rand4(&mut rng, (2, 1, 16, 16));
    let net_err = full_net_grad_error(&mut net, &inputs, &target);

    let (_, cache) = net.forward(&inputs, false).unwrap();
    let mut ortho_ok = true;
    for q in nn::Sarnet::fusion_bases(&cache) {
        let (nb, k, _) = q.dim();
        for bi in 0..nb {
            for i in 0..k {
                let qi: Array1<f64> = q.slice(ndarray::s![bi, i, ..]).to_owned();
                let ni = qi.dot(&qi);
                if ni > 1e-12 && (ni - 1.0).abs() > 1e-5 {
                    ortho_ok = false;
                }
                for j in 0..i {
                    let qj: Array1<f64> = q.slice(ndarray::s![bi, j, ..]).to_owned();
                    if qi.dot(&qj).abs() > 1e-5 {
                        ortho_ok = false;
                    }
                }
            }
        }
    }

    // overfit a 4-sample simulated 64x64 set, deterministically
    let (stacks, targets) = simulated_trainset(3);
    let dataset: Vec<(&spectral::FeatureStack, &Image2D)> =
        stacks.iter().zip(targets.iter()).map(|(s, t)| (s, t)).collect();
    let mut tc = nn::TrainConfig::new(4000, 3e-3);
    tc.stop_at_loss = Some(9e-4);
    let mut train_net = nn::Sarnet::new(toy_cfg(), 21).unwrap();
    let history = nn::train(&mut train_net, &dataset, &tc).unwrap();
    let final_mse = *history.last().unwrap();

    let short = |seed: u64| {
        let mut n = nn::Sarnet::new(toy_cfg(), seed).unwrap();
        nn::train(&mut n, &dataset, &nn::TrainConfig::new(10, 3e-3)).unwrap()
    };
    let deterministic = short(21) == short(21);

    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "7 neural-correctness",
        prim_ok && net_err <= 5e-3 && ortho_ok && final_mse <= 1e-3 && deterministic
            && elapsed < 600.0,
        format!(
            "primitive grad errs {:?} (<=1e-3), full net {:.2e} (<=5e-3), ortho {}, \
             train mse {:.2e} in {} epochs (<=1e-3), deterministic {}, {:.1}s (<600s)",
            prim.iter().map(|&(n, e)| format!("{} {:.1e}", n, e)).collect::<Vec<_>>(),
            net_err,
            ortho_ok,
            final_mse,
            history.len(),
            deterministic,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------

fn run_demo(seed: u64, dir: &std::path::Path) -> (f64, f64) {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_thzlab"))
        .args([
            "pipeline",
            "demo",
            "--seed",
            &seed.to_string(),
            "--threads",
            "1",
            "--out-dir",
        ])
        .arg(dir)
        .output()
        .expect("run demo");
    assert!(
        status.status.success(),
        "demo failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut raw = f64::NAN;
    let mut restored = f64::NAN;
    for line in csv.lines().skip(1) {
        let mut parts = line.split(',');
        let name = parts.next().unwrap();
        let mse: f64 = parts.next().unwrap().parse().unwrap();
        match name {
            "raw" => raw = mse,
            "restored" => restored = mse,
            _ => {}
        }
    }
    (raw, restored)
}

#[test]
fn criterion_8_end_to_end_improvement() {
    let tmp = tempfile::tempdir().unwrap();
    let mut all_better = true;
    let mut pairs = Vec::new();
    for seed in 1..=8u64 {
        let (raw, restored) = run_demo(seed, &tmp.path().join(format!("s{}", seed)));
        if !(restored < raw) {
            all_better = false;
        }
        pairs.push((seed, raw, restored));
    }
    report(
        "8 end-to-end-improvement",
        all_better,
        format!(
            "8 seeds, restored < raw cross-section MSE in all: {:?}",
            pairs
                .iter()
                .map(|&(s, r, t)| format!("seed {} {:.3}->{:.3}", s, r, t))
                .collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_9_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_demo(13, &a);
    run_demo(13, &b);
    let mut identical = true;
    let mut compared = 0;
    for name in [
        "metrics.csv",
        "volume_raw.thzt",
        "volume_restored.thzt",
        "volume_truth.thzt",
        "phantom.thzt",
    ] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        if fa != fb {
            identical = false;
        }
        compared += 1;
    }
    report(
        "9 reproducibility",
        identical,
        format!(
            "two seeded runs byte-identical across {} artifacts including metrics CSV",
            compared
        ),
    );
}
