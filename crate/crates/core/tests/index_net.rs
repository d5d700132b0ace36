mod common;

use common::{fd_gradient, rel_err};
use ndarray::Array2;
use nip_core::model::{generate_instance, StateVector};
use nip_core::net::{encode, Activation, FeatureEncoding, IndexNetwork, NetConfig};
use nip_core::textfmt::Document;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(input: usize, actions: usize, seed: u64) -> IndexNetwork {
    IndexNetwork::new(NetConfig {
        input_width: input,
        hidden: 64,
        n_actions: actions,
        activation: Activation::Tanh,
        momentum: 0.0,
        seed,
    })
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn linear_probe(net: &IndexNetwork, feats: &FeatureEncoding, upstream: &Array2<f64>) -> f64 {
    (&net.forward(feats).unwrap().0 * upstream).sum()
}

fn check_all_parameters(net: &mut IndexNetwork, feats: &FeatureEncoding, upstream: &Array2<f64>) -> f64 {
    net.zero_grad();
    let (_, tape) = net.forward(feats).unwrap();
    net.backward(&tape, upstream.view()).unwrap();
    let analytic = net.gradients();
    let theta = net.parameters();
    let mut probe = net.clone();
    let fd = fd_gradient(
        &mut |p| {
            probe.set_parameters(p).unwrap();
            linear_probe(&probe, feats, upstream)
        },
        &theta,
        1e-5,
    );
    net.zero_grad();
    analytic.iter().zip(&fd).map(|(a, b)| rel_err(*a, *b, 1e-5)).fold(0.0, f64::max)
}

#[test]
fn jacobian_vector_products_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for softplus in [false, true] {
        let mut n = net(5, 3, 17);
        if softplus {
            n.config.activation = Activation::Softplus;
        }
        let feats = FeatureEncoding(random(3, 5, &mut rng));
        let upstream = random(3, 3, &mut rng);
        let theta = n.parameters();
        for _ in 0..20 {
            let v: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, tape) = n.forward(&feats).unwrap();
            n.zero_grad();
            n.backward(&tape, upstream.view()).unwrap();
            let analytic: f64 = n.gradients().iter().zip(&v).map(|(g, d)| g * d).sum();
            let mut probe = n.clone();
            let mut along = |t: f64| {
                let p: Vec<f64> = theta.iter().zip(&v).map(|(x, d)| x + t * d).collect();
                probe.set_parameters(&p).unwrap();
                linear_probe(&probe, &feats, &upstream)
            };
            let h = 1e-5;
            let fd = (along(h) - along(-h)) / (2.0 * h);
            assert!(rel_err(analytic, fd, 1e-5) < 1e-4, "jvp {analytic} vs {fd}");
        }
    }
}

#[test]
fn every_parameter_gradient_matches_at_init_and_after_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = generate_instance(4, 3, 3, &[0.25, 0.25], 5).unwrap();
    let mut n = net(7, 3, 5);
    let s = StateVector::sample_uniform(4, 3, &mut rng);
    let feats = encode(&inst, &s).unwrap();
    let upstream = random(4, 3, &mut rng);
    assert!(check_all_parameters(&mut n, &feats, &upstream) < 1e-4);

    let target = random(4, 3, &mut rng);
    for _ in 0..100 {
        let s = StateVector::sample_uniform(4, 3, &mut rng);
        let (out, tape) = n.forward(&encode(&inst, &s).unwrap()).unwrap();
        n.backward(&tape, (&out - &target).view()).unwrap();
        n.sgd_step(0.01).unwrap();
    }
    assert!(check_all_parameters(&mut n, &feats, &upstream) < 1e-4);
}

#[test]
fn permuting_arms_permutes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = net(9, 4, 8);
    let x = random(6, 9, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted = Array2::from_shape_fn((6, 9), |(i, j)| x[[perm[i], j]]);
    let (a, _) = n.forward(&FeatureEncoding(x)).unwrap();
    let (b, _) = n.forward(&FeatureEncoding(permuted)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(i), a.row(p));
    }
}

#[test]
fn encoding_is_equivariant_in_arm_order() {
    let inst = generate_instance(4, 3, 2, &[0.5], 1).unwrap();
    let s = StateVector(vec![2, 0, 1, 1]);
    let f = encode(&inst, &s).unwrap().0;
    for (arm, row) in f.rows().into_iter().enumerate() {
        assert_eq!(row[arm], 1.0);
        assert_eq!(row[4 + s.0[arm]], 1.0);
        assert_eq!(row.sum(), 2.0);
    }
}

#[test]
fn forward_and_backward_are_bitwise_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = FeatureEncoding(random(5, 8, &mut rng));
    let g = random(5, 3, &mut rng);
    let run = || {
        let mut n = net(8, 3, 42);
        let (out, tape) = n.forward(&x).unwrap();
        n.backward(&tape, g.view()).unwrap();
        (out, n.gradients())
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_file_round_trip_and_shape_validation() {
    let dir = std::env::temp_dir().join(format!("nip-net-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("net.txt");
    let n = net(7, 3, 1);
    n.write(&path).unwrap();
    let back = IndexNetwork::read(&path).unwrap();
    assert_eq!(back.parameters(), n.parameters());
    assert_eq!(back.config, n.config);

    let mut doc = Document::read(&path).unwrap();
    doc.set_int("hidden", 63);
    assert!(IndexNetwork::from_document(&doc).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
