mod common;

use moda::nnkit::{check_gradients, loss, Conv2d, Dense, Layer, Network, NnError, Tensor};
use proptest::prelude::*;

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn identity_dense_passes_input_through() {
    let net = Network::new(vec![Layer::Dense(Dense::from_parts(
        2,
        2,
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.0],
    ))]);
    let y = net.predict(&t(vec![1, 2], vec![3.0, -1.0])).unwrap();
    assert_eq!(y.data(), &[3.0, -1.0]);
}

#[test]
fn relu_clips_negatives() {
    let y = Network::new(vec![Layer::Relu])
        .predict(&t(vec![1, 3], vec![-2.0, 0.0, 5.0]))
        .unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 5.0]);
}

#[test]
fn all_ones_convolution_counts_neighbours() {
    let conv = Conv2d::from_parts(1, 1, 3, vec![1.0; 9], vec![0.0]);
    let y = Network::new(vec![Layer::Conv2d(conv)])
        .predict(&t(vec![1, 1, 3, 3], vec![1.0; 9]))
        .unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(y.data()[corner], 4.0);
    }
    assert_eq!(y.data()[1], 6.0);
}

#[test]
fn sigmoid_gradient_at_zero_is_a_quarter() {
    let mut net = Network::new(vec![Layer::Sigmoid]);
    net.forward(&t(vec![1, 1], vec![0.0])).unwrap();
    let g = net.backward(&t(vec![1, 1], vec![2.0])).unwrap();
    assert_eq!(g.data(), &[0.5]);
}

#[test]
fn shape_mismatch_names_the_layer() {
    let mut rng = moda::rng::seeded(0);
    let net = Network::new(vec![
        Layer::dense(3, 4, &mut rng),
        Layer::Relu,
        Layer::dense(5, 1, &mut rng),
    ]);
    let err = net.predict(&Tensor::zeros(vec![1, 3])).unwrap_err();
    assert!(
        matches!(err, NnError::Shape { layer: Some(2), .. }),
        "{err}"
    );
}

#[test]
fn backward_without_forward_is_rejected() {
    let mut rng = moda::rng::seeded(0);
    let mut net = Network::mlp(&[2, 2], &mut rng);
    assert!(matches!(
        net.backward(&Tensor::zeros(vec![1, 2])),
        Err(NnError::NoForwardCache)
    ));
}

#[test]
fn random_networks_match_finite_differences() {
    for i in 0..10 {
        let (net, x, probe) = common::random_network(i);
        let check = check_gradients(&net, &x, &probe, 1e-4).unwrap();
        assert!(
            check.max_rel_error < 1e-4,
            "network {i}: relative error {}",
            check.max_rel_error
        );
    }
}

#[test]
fn mse_training_reduces_loss() {
    let mut rng = moda::rng::seeded(5);
    let mut net = Network::mlp(&[2, 8, 1], &mut rng);
    let x = t(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    let y = t(vec![4, 1], vec![0.0, 1.0, 1.0, 2.0]);
    let mut adam = moda::nnkit::Adam::new(0.05);
    let initial = loss::mse(&net.predict(&x).unwrap(), &y).unwrap().0;
    for _ in 0..300 {
        let pred = net.forward(&x).unwrap();
        let (_, g) = loss::mse(&pred, &y).unwrap();
        net.backward(&g).unwrap();
        adam.step(&mut net).unwrap();
    }
    let fin = loss::mse(&net.predict(&x).unwrap(), &y).unwrap().0;
    assert!(fin < initial * 0.01, "{initial} -> {fin}");
}

#[test]
fn same_seed_same_parameters() {
    let a = Network::mlp(&[5, 7, 3], &mut moda::rng::seeded(11));
    let b = Network::mlp(&[5, 7, 3], &mut moda::rng::seeded(11));
    assert_eq!(a.flat_params(), b.flat_params());
}

proptest! {
    #[test]
    fn linear_layers_are_linear(seed in 0u64..500, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = moda::rng::seeded(seed);
        let mut dense = Dense::new(3, 2, &mut rng);
        dense.bias = vec![0.0; 2];
        let mut conv = Conv2d::new(2, 2, 3, &mut rng);
        conv.bias = vec![0.0; 2];
        let cases = [
            (Network::new(vec![Layer::Dense(dense)]), vec![2, 3]),
            (Network::new(vec![Layer::Conv2d(conv)]), vec![1, 2, 3, 3]),
        ];
        for (net, shape) in cases {
            let len: usize = shape.iter().product();
            let x = t(shape.clone(), (0..len).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect());
            let y = t(shape.clone(), (0..len).map(|i| (i as f64 * 0.91 - seed as f64).cos()).collect());
            let combo = x.scale(alpha).add(&y.scale(beta)).unwrap();
            let lhs = net.predict(&combo).unwrap();
            let rhs = net.predict(&x).unwrap().scale(alpha).add(&net.predict(&y).unwrap().scale(beta)).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn losses_are_non_negative(a in prop::collection::vec(-3.0f64..3.0, 4),
                               p in prop::collection::vec(-3.0f64..3.0, 4),
                               n in prop::collection::vec(-3.0f64..3.0, 4),
                               margin in 0.0f64..2.0) {
        let (a, p, n) = (t(vec![1, 4], a), t(vec![1, 4], p), t(vec![1, 4], n));
        let (l, _) = loss::triplet_hinge(&a, &p, &n, margin).unwrap();
        prop_assert!(l >= 0.0);
        let dp: f64 = a.sub(&p).unwrap().data().iter().map(|v| v * v).sum();
        let dn: f64 = a.sub(&n).unwrap().data().iter().map(|v| v * v).sum();
        prop_assert_eq!(l == 0.0, dn >= dp + margin);
        prop_assert!(loss::mse(&a, &p).unwrap().0 >= 0.0);
        let probs = a.map(moda::nnkit::sigmoid);
        let labels = p.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        prop_assert!(loss::bce(&probs, &labels).unwrap().0 >= 0.0);
    }
}
