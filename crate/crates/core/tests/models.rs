use biophys_core::estimator::{SirenConfig, SirenNet, TimeChannel};
use biophys_core::loss::{dice_loss_value, pde_loss_value, BiophysCoefficients};
use biophys_core::nn::Activation;
use biophys_core::segnet::{SegNet, SegNetConfig};
use biophys_core::synth::{generate, split_seeds, SynthConfig};
use biophys_core::{Field3D, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        dims: [16, 16, 16],
        sim_steps: 20,
        bump_sigma: (1.0, 2.0),
        ..SynthConfig::default()
    }
}

/// Shift by one voxel along the first axis, repeating the edge plane.
fn shift(t: &Tensor) -> Tensor {
    let s = t.shape().to_vec();
    let plane = s[2] * s[3];
    let mut out = t.clone();
    for c in 0..s[0] {
        for x in 0..s[1] {
            let src = x.saturating_sub(1);
            let (dst, from) = ((c * s[1] + x) * plane, (c * s[1] + src) * plane);
            out.data_mut()[dst..dst + plane].copy_from_slice(&t.data()[from..from + plane]);
        }
    }
    out
}

#[test]
fn segnet_translation_smoke() {
    let net = SegNet::init(SegNetConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[4, 8, 8, 8], -1.0, 1.0, &mut rng);
    let (p, _) = net.predict(&input).unwrap();
    let (q, _) = net.predict(&shift(&input)).unwrap();
    assert_eq!(p.shape(), q.shape());
    let n = 512;
    for probs in [&p, &q] {
        for i in 0..n {
            let s: f64 = (0..4).map(|c| probs.data()[c * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
    let interior = |x: usize, y: usize, z: usize| (x * 8 + y) * 8 + z;
    let moved =
        (2..6).any(|x| (p.data()[interior(x, 4, 4)] - q.data()[interior(x, 4, 4)]).abs() > 1e-9);
    assert!(moved);
    let (again, _) = net.predict(&input).unwrap();
    assert_eq!(p, again);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimator_time_derivative_matches_differences(seed in any::<u64>(), t in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SirenNet::init(SirenConfig { in_channels: 3, hidden: vec![8, 8], ..SirenConfig::default() }, seed).unwrap();
        let features = random(&[3, 2, 3, 2], -1.0, 1.0, &mut rng);
        let eval = |t: f64| {
            let mut tape = Tape::new();
            let params = biophys_core::nn::Module::bind(&net, &mut tape);
            let x = tape.constant(features.clone());
            let out = net.eval(&mut tape, &params, x, TimeChannel::new(t).unwrap()).unwrap();
            (tape.value(out.u_hat).clone(), tape.value(out.du_dt).clone())
        };
        let h = 1e-6;
        let (_, du) = eval(t);
        let (up, _) = eval(t + h);
        let (um, _) = eval(t - h);
        for i in 0..du.numel() {
            let fd = (up.data()[i] - um.data()[i]) / (2.0 * h);
            prop_assert!((du.data()[i] - fd).abs() / fd.abs().max(1.0) < 1e-6, "{} vs {fd}", du.data()[i]);
        }
    }

    #[test]
    fn dice_loss_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 27;
        let logits = random(&[4, 3, 3, 3], -3.0, 3.0, &mut rng);
        let mut probs = logits.clone();
        for i in 0..n {
            let e: Vec<f64> = (0..4).map(|c| logits.data()[c * n + i].exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..4 {
                probs.data_mut()[c * n + i] = e[c] / s;
            }
        }
        let mut labels = Tensor::zeros(&[4, 3, 3, 3]);
        for i in 0..n {
            labels.data_mut()[rng.gen_range(0..4) * n + i] = 1.0;
        }
        let loss = dice_loss_value(&probs, &labels).unwrap();
        prop_assert!((0.0..=4.0).contains(&loss));
        prop_assert_eq!(dice_loss_value(&labels, &labels).unwrap(), 0.0);
    }

    #[test]
    fn pde_loss_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [3, 4, 3];
        let field = |rng: &mut ChaCha8Rng| Field3D::new(dims, 1.0, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (u, ut) = (field(&mut rng), field(&mut rng));
        let coeffs = BiophysCoefficients::uniform(dims, rng.gen_range(0.02..1.5), rng.gen_range(0.002..0.2));
        prop_assert!(pde_loss_value(&u, &ut, &coeffs).unwrap() >= 0.0);
    }

    #[test]
    fn generated_cases_are_nested_and_standardised(seed in 0u64..10_000) {
        let case = generate(seed, &small_synth()).unwrap();
        let classes = &case.classes;
        let n = classes.len();
        let wt = classes.iter().filter(|&&c| c != 0).count();
        let tc = classes.iter().filter(|&&c| c == 1 || c == 3).count();
        let et = classes.iter().filter(|&&c| c == 3).count();
        prop_assert!(et <= tc && tc <= wt && wt > 0);
        let u = case.density.data();
        for i in 0..n {
            let th = case.meta.thresholds;
            prop_assert!(u[i] <= th.et || classes[i] == 3);
            prop_assert!(classes[i] != 3 || u[i] > th.et);
        }
        for c in 0..4 {
            let ch = &case.inputs.data()[c * n..(c + 1) * n];
            let nz: Vec<f64> = ch.iter().copied().filter(|&v| v != 0.0).collect();
            let mean = nz.iter().sum::<f64>() / nz.len() as f64;
            let std = (nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nz.len() as f64).sqrt();
            prop_assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-6, "channel {c}: {mean} {std}");
        }
    }

    #[test]
    fn splits_partition_seeds(start in 0u64..1000, count in 1usize..60) {
        let seeds: Vec<u64> = (start..start + count as u64).collect();
        let s = split_seeds(&seeds);
        let mut all: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, seeds);
    }
}

#[test]
fn relu_estimator_still_runs() {
    let config = SirenConfig {
        in_channels: 2,
        hidden: vec![4],
        activation: Activation::Relu,
        ..SirenConfig::default()
    };
    let net = SirenNet::init(config, 2).unwrap();
    let mut tape = Tape::new();
    let params = biophys_core::nn::Module::bind(&net, &mut tape);
    let x = tape.constant(Tensor::full(&[2, 2, 2, 2], 0.3));
    let out = net
        .eval(&mut tape, &params, x, TimeChannel::new(0.5).unwrap())
        .unwrap();
    assert!(tape.value(out.u_hat).all_finite());
}
