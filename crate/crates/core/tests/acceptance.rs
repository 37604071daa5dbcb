//! Acceptance gate. Every criterion runs in sequence and prints one
//! PASS/FAIL line; the test fails if any criterion fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use biophys_core::experiment::{
    median_dice, run_grid, size_verdict, summary_csv, Arm, Protocol, RunResult,
};
use biophys_core::field::{laplacian, LAPLACIAN_KERNEL};
use biophys_core::growth::{cfl_bound, logistic, simulate, step, GrowthParams};
use biophys_core::loss::{bc_loss_value, dice_loss_value, pde_loss_value, BiophysCoefficients};
use biophys_core::metrics::{dice_score, hd95, BinaryMask};
use biophys_core::synth::{generate, SynthConfig};
use biophys_core::train::{evaluate, loss_csv, Sample, TrainConfig, Trainer};
use biophys_core::{suite, Field3D, Tensor};
use common::{brute_hd95, random_mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn random_field(dims: [usize; 3], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Field3D {
    let n = dims.iter().product();
    Field3D::new(dims, 1.0, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn gaussian(dims: [usize; 3], sigma: f64, amplitude: f64) -> Field3D {
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    Field3D::from_fn(dims, |x, y, z| {
        let r2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
        amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
    })
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let entries = suite::run(20_241_016).unwrap();
    let elapsed = start.elapsed();
    let max = suite::max_error(&entries);
    let names: Vec<&str> = entries.iter().map(|e| e.name).collect();
    (
        max < 1e-5 && elapsed < Duration::from_secs(120),
        format!(
            "max rel error {max:.2e} over {names:?} in {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn stencil_identities() -> Outcome {
    let expected = [
        [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
        [[0.0, 1.0, 0.0], [1.0, -6.0, 1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
    ];
    let kernel_ok = LAPLACIAN_KERNEL == expected;

    let dims = [9, 7, 8];
    let constant = laplacian(&Field3D::constant(dims, 0.37)).unwrap();
    let const_err = constant.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let ramp = laplacian(&Field3D::from_fn(dims, |x, y, z| {
        0.5 * x as f64 - 0.25 * y as f64 + 2.0 * z as f64
    }))
    .unwrap();
    let mut lin_err: f64 = 0.0;
    for x in 1..dims[0] - 1 {
        for y in 1..dims[1] - 1 {
            for z in 1..dims[2] - 1 {
                lin_err = lin_err.max(ramp.get(x, y, z).abs());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..20 {
        let lap = laplacian(&random_field(dims, -1.0, 1.0, &mut rng)).unwrap();
        let total: f64 = lap.data().iter().sum();
        let scale: f64 = lap.data().iter().map(|v| v.abs()).sum();
        worst_sum = worst_sum.max(total.abs() / scale);
    }
    (
        kernel_ok && const_err <= 1e-12 && lin_err <= 1e-12 && worst_sum <= 1e-12,
        format!(
            "kernel {}, constant {const_err:.1e}, linear interior {lin_err:.1e}, relative sum {worst_sum:.1e}",
            if kernel_ok { "exact" } else { "MISMATCH" }
        ),
    )
}

fn simulator_physics() -> Outcome {
    let start = Instant::now();
    let dims = [6, 6, 6];
    let run = simulate(
        &Field3D::constant(dims, 0.1),
        &GrowthParams::uniform(dims, 0.0, 0.2, 1e-3, 10_000),
    )
    .unwrap();
    let exact = logistic(0.1, 0.2, 10.0);
    let logistic_err = run
        .final_field
        .data()
        .iter()
        .map(|v| (v - exact).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = [16, 16, 16];
    let mut u = random_field(dims, 0.0, 1.0, &mut rng);
    let params = GrowthParams::uniform(dims, 0.8, 0.0, 0.9 / 6.0 / 0.8, 1);
    let m0 = u.sum();
    let mut mass_err: f64 = 0.0;
    for _ in 0..200 {
        u = step(&u, &params).unwrap();
        mass_err = mass_err.max((u.sum() - m0).abs() / m0);
    }

    let d = random_field(dims, 0.02, 1.5, &mut rng);
    let rho = random_field(dims, 0.002, 0.2, &mut rng);
    let dt = 0.95 * (1.0 / (6.0 * d.max() + rho.max())).min(cfl_bound(&d, 1.0));
    let bounded = simulate(
        &random_field(dims, 0.0, 1.0, &mut rng),
        &GrowthParams {
            d,
            rho,
            dt,
            steps: 200,
            snapshot_every: 1,
        },
    )
    .unwrap();
    let (lo, hi) = bounded
        .snapshots
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, u)| {
            (lo.min(u.min()), hi.max(u.max()))
        });

    let u0 = gaussian(dims, 2.5, 0.9);
    let at = |dt: f64| {
        let steps = (10.0 / dt).round() as usize;
        simulate(&u0, &GrowthParams::uniform(dims, 0.5, 0.1, dt, steps))
            .unwrap()
            .final_field
    };
    let (coarse, fine, reference) = (at(0.02), at(0.01), at(0.0025));
    let dev = |a: &Field3D| {
        a.data()
            .iter()
            .zip(reference.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let ratio = dev(&coarse) / dev(&fine);
    let elapsed = start.elapsed();
    (
        logistic_err < 1e-4
            && mass_err < 1e-10
            && lo >= -1e-9
            && hi <= 1.0 + 1e-9
            && (1.5..=2.5).contains(&ratio)
            && elapsed < Duration::from_secs(60),
        format!(
            "logistic {logistic_err:.1e}, mass {mass_err:.1e}, range [{lo:.3e}, {hi:.6}], convergence ratio {ratio:.3}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_simulator_consistency() -> Outcome {
    let dims = [12, 12, 12];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = random_field(dims, 0.02, 1.5, &mut rng);
    let rho = random_field(dims, 0.002, 0.2, &mut rng);
    let dt = 0.5 * cfl_bound(&d, 1.0);
    let params = GrowthParams {
        d: d.clone(),
        rho: rho.clone(),
        dt,
        steps: 1,
        snapshot_every: 1,
    };
    let coeffs = BiophysCoefficients {
        d,
        rho,
        ..BiophysCoefficients::uniform(dims, 1.0, 0.1)
    };
    let mut u = gaussian(dims, 2.0, 0.8);
    let mut worst_pde: f64 = 0.0;
    for _ in 0..10 {
        let next = step(&u, &params).unwrap();
        let du_dt = Field3D::new(
            dims,
            1.0,
            next.data()
                .iter()
                .zip(u.data())
                .map(|(a, b)| (a - b) / dt)
                .collect(),
        )
        .unwrap();
        worst_pde = worst_pde.max(pde_loss_value(&u, &du_dt, &coeffs).unwrap());
        u = next;
    }

    let base = random_field(dims, 0.0, 1.0, &mut rng);
    let fold = |i: usize, n: usize| i.min(n - 1 - i).max(1);
    let symmetric = Field3D::from_fn(dims, |x, y, z| {
        base.get(fold(x, 12), fold(y, 12), fold(z, 12))
    });
    let bc = bc_loss_value(&symmetric, &coeffs).unwrap()
        + bc_loss_value(&Field3D::constant(dims, 0.4), &coeffs).unwrap();

    let labels = Tensor::new(
        vec![4, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    )
    .unwrap();
    let identity = dice_loss_value(&labels, &labels).unwrap();
    let y = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let p = Tensor::new(vec![4, 1], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let hand = dice_loss_value(&p, &y).unwrap();
    let hand_err = (hand - ((1.0 - 2.0 / 2.5) + (1.0 - 1.0 / 1.5))).abs();
    let half = Field3D::constant([4, 4, 4], 0.5);
    let constant_pde = pde_loss_value(
        &half,
        &Field3D::zeros([4, 4, 4]),
        &BiophysCoefficients::uniform([4, 4, 4], 0.9, 0.2),
    )
    .unwrap();
    let constant_err = (constant_pde - 0.0025).abs();
    (
        worst_pde < 1e-8 && bc == 0.0 && identity.abs() <= 1e-12 && hand_err <= 1e-12 && constant_err <= 1e-12,
        format!(
            "trajectory pde {worst_pde:.1e}, symmetric bc {bc}, dice identity {identity:.1e}, hand case {hand:.12}, constant pde err {constant_err:.1e}"
        ),
    )
}

fn case_pool(n: u64, dims: [usize; 3]) -> Vec<Sample> {
    let synth = SynthConfig {
        dims,
        ..SynthConfig::default()
    };
    (0..n)
        .map(|s| Sample::from_case(format!("case{s}"), &generate(1000 + s, &synth).unwrap()))
        .collect()
}

fn degenerate_weights() -> Outcome {
    let data = case_pool(3, [32, 32, 32]);
    let run = |zero_weights: bool| {
        let mut config = TrainConfig {
            steps: 25,
            seed: 17,
            ..TrainConfig::default()
        };
        if zero_weights {
            config.weights.lambda1 = 0.0;
            config.weights.lambda2 = 0.0;
        } else {
            config.use_pde = false;
            config.use_bc = false;
        }
        let mut trainer = Trainer::new(config).unwrap();
        let mut digests = Vec::new();
        trainer
            .run(&data, |t, _| digests.push(t.parameter_digest()))
            .unwrap();
        digests
    };
    let (a, b) = (run(true), run(false));
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    (
        a == b,
        format!("{same}/{} per-step parameter digests identical", a.len()),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dims = [10, 11, 9];
    let mut mismatches = 0;
    for _ in 0..100 {
        let (a, b) = (
            random_mask(dims, 20, &mut rng),
            random_mask(dims, 20, &mut rng),
        );
        if hd95(&a, &b, 1.0).unwrap() != brute_hd95(&a, &b, 1.0) {
            mismatches += 1;
        }
    }
    let mask = |pts: &[[usize; 3]]| {
        let mut m = BinaryMask::empty([4, 4, 4]);
        for p in pts {
            m.set(p[0], p[1], p[2], true);
        }
        m
    };
    let a = mask(&[[0, 0, 0], [1, 1, 1]]);
    let b = mask(&[[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]]);
    let c = mask(&[[3, 0, 0]]);
    let hand = dice_score(&a, &a).unwrap() == 1.0
        && (dice_score(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15
        && dice_score(&a, &c).unwrap() == 0.0;
    let single =
        (hd95(&mask(&[[1, 1, 1]]), &mask(&[[2, 2, 2]]), 1.0).unwrap() - 3f64.sqrt()).abs() < 1e-15;
    (
        mismatches == 0 && hand && single,
        format!("{mismatches}/100 hd95 mismatches vs brute force, dice hand cases {hand}, offset case {single}"),
    )
}

fn protocol() -> Protocol {
    Protocol::default()
}

fn train_size_direction(results: &[RunResult], elapsed: Duration) -> Outcome {
    let v = size_verdict(results, "biophys", "dice_only").unwrap();
    let gaps = |size| {
        biophys_core::experiment::paired_gaps(results, "biophys", "dice_only", size)
            .values()
            .map(|g| format!("{g:+.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    (
        v.passed() && elapsed < Duration::from_secs(20 * 60),
        format!(
            "size {}: biophys median {:.4} vs dice_only {:.4}; gaps at {} [{}] vs {} [{}]; shrinking in {}/{} seeds; {:.0}s",
            v.smallest,
            v.regularised_median,
            v.baseline_median,
            v.smallest,
            gaps(v.smallest),
            v.largest,
            gaps(v.largest),
            v.shrinking_gap_seeds,
            v.seeds,
            elapsed.as_secs_f64()
        ),
    )
}

fn activation_boundary_direction(results: &[RunResult]) -> Outcome {
    let sine = median_dice(results, "biophys", None);
    let relu = median_dice(results, "relu", None);
    let no_bc = median_dice(results, "no_bc", None);
    (
        sine >= relu && sine >= no_bc - 0.01,
        format!("median dice sine {sine:.4}, relu {relu:.4}, without bc {no_bc:.4}"),
    )
}

fn determinism() -> Outcome {
    let data = case_pool(3, [32, 32, 32]);
    let run = || {
        let config = TrainConfig {
            steps: 15,
            seed: 23,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(config).unwrap();
        let log = trainer.run(&data[..2], |_, _| {}).unwrap();
        let report = evaluate(&trainer.model.segnet, &data[2..], &[]).unwrap();
        (
            trainer.checkpoint().unwrap().to_bytes().unwrap(),
            loss_csv(&log),
            report.to_csv(),
        )
    };
    let small = Protocol {
        train_sizes: vec![1, 2],
        seeds: vec![3],
        steps: 3,
        test_cases: 2,
        synth: SynthConfig {
            dims: [16, 16, 16],
            ..SynthConfig::default()
        },
        ..Protocol::default()
    };
    let grid =
        || summary_csv(&run_grid(&small, &[Arm::biophysics(), Arm::dice_only()], |_| {}).unwrap());
    let (a, b) = (run(), run());
    let (ga, gb) = (grid(), grid());
    let ok = [a.0 == b.0, a.1 == b.1, a.2 == b.2, ga == gb];
    (
        ok.iter().all(|&x| x),
        format!(
            "checkpoint {} ({} bytes), loss csv {}, metrics csv {}, ablation summary {}",
            ok[0],
            a.0.len(),
            ok[1],
            ok[2],
            ok[3]
        ),
    )
}

/// Writes past the test harness capture so results show without `--nocapture`.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    let mut report = |name: &str, outcome: std::thread::Result<Outcome>| {
        let (ok, detail) = outcome.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        emit(&format!(
            "{} {name}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        ));
        if !ok {
            failures.push(name.to_string());
        }
    };
    let checks: [(&str, fn() -> Outcome); 6] = [
        ("gradient correctness", gradient_correctness),
        ("stencil identities", stencil_identities),
        ("simulator physics", simulator_physics),
        ("loss-simulator consistency", loss_simulator_consistency),
        ("degenerate-weights equivalence", degenerate_weights),
        ("metric oracle", metric_oracle),
    ];
    for (name, check) in checks {
        report(name, catch_unwind(check));
    }

    let p = protocol();
    let start = Instant::now();
    let size_grid =
        catch_unwind(|| run_grid(&p, &[Arm::biophysics(), Arm::dice_only()], |_| {}).unwrap());
    let elapsed = start.elapsed();
    let size_grid = size_grid.ok();
    report(
        "train-size direction",
        match &size_grid {
            Some(rs) => catch_unwind(AssertUnwindSafe(|| train_size_direction(rs, elapsed))),
            None => Ok((false, "grid run panicked".into())),
        },
    );
    if let Some(rs) = &size_grid {
        emit(&summary_csv(rs));
    }

    let extra = catch_unwind(|| run_grid(&p, &[Arm::relu(), Arm::no_bc()], |_| {}).unwrap()).ok();
    report(
        "activation and boundary direction",
        match (&size_grid, &extra) {
            (Some(a), Some(b)) => {
                let all: Vec<RunResult> = a.iter().chain(b).cloned().collect();
                emit(&summary_csv(b));
                catch_unwind(AssertUnwindSafe(|| activation_boundary_direction(&all)))
            }
            _ => Ok((false, "grid run panicked".into())),
        },
    );

    report("determinism", catch_unwind(determinism));

    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
