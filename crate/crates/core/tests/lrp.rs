use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sewer_core::lrp::{explain_video, lrp, LrpRule};
use sewer_core::model::{build_sewernet, Activation, ArchitectureSpec, LayerSpec, Network};
use sewer_core::Tensor;

fn random_image(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.0..1.0)).unwrap()
}

fn sewernet_f64(seed: u64) -> Network<f64> {
    build_sewernet(seed).cast()
}

fn randomize_biases(net: &mut Network<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, p) in net.parameters_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-0.05..0.05));
        }
    }
}

fn small_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        input_shape: [7, 6, 2],
        num_classes: 4,
        layers: vec![
            LayerSpec::Conv2d {
                name: "conv".into(),
                kernel_size: 3,
                in_channels: 2,
                out_channels: 3,
                activation: Activation::Relu,
            },
            LayerSpec::MaxPool2x2 {
                name: "pool".into(),
            },
            LayerSpec::Flatten {
                name: "flat".into(),
            },
            LayerSpec::Dense {
                name: "hidden".into(),
                inputs: 36,
                outputs: 8,
                activation: Activation::Relu,
            },
            LayerSpec::Dense {
                name: "out".into(),
                inputs: 8,
                outputs: 4,
                activation: Activation::None,
            },
        ],
    }
}

#[test]
fn zero_bias_sewernet_conserves_relevance() {
    let mut net = sewernet_f64(3);
    net.zero_biases();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..20 {
        let image = random_image([150, 150, 3], &mut rng);
        let map = lrp(&net, &image, i % 4, LrpRule::LrpZero).unwrap();
        let err = (map.input_sum - map.score).abs() / map.score.abs();
        assert!(
            err <= 1e-4,
            "image {i}: sum {} vs logit {}",
            map.input_sum,
            map.score
        );
        assert_eq!(map.relevance.shape(), &[150, 150, 3]);
    }
}

#[test]
fn biased_sewernet_accounts_for_absorbed_relevance() {
    let mut net = sewernet_f64(5);
    randomize_biases(&mut net, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..4 {
        let image = random_image([150, 150, 3], &mut rng);
        for rule in [LrpRule::LrpZero, LrpRule::LrpEpsilon { epsilon: 1e-3 }] {
            let map = lrp(&net, &image, i, rule).unwrap();
            assert!(map.accounting_error() <= 1e-4, "{:?}", map.ledger());
            assert!(map.absorbed.abs() > 0.0);
            assert_eq!(map.absorbed_per_layer.len(), 5);
        }
    }
}

// LRP-0 on a bias-free ReLU/max-pool network equals gradient × input.
#[test]
fn lrp_zero_matches_gradient_times_input() {
    let mut net = Network::<f64>::build(small_arch(), 9).unwrap();
    net.zero_biases();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let image = random_image([7, 6, 2], &mut rng);
    for target in 0..4 {
        let map = lrp(&net, &image, target, LrpRule::LrpZero).unwrap();
        // backward does not return the input gradient, so take it by central differences.
        let logit =
            |x: &Tensor<f64>| net.forward_logits(x, Default::default(), None).unwrap()[target];
        for i in 0..image.len() {
            let mut up = image.clone();
            up.data_mut()[i] += 1e-6;
            let mut down = image.clone();
            down.data_mut()[i] -= 1e-6;
            let grad = (logit(&up) - logit(&down)) / 2e-6;
            let expected = grad * image.data()[i];
            let got = map.relevance.data()[i];
            assert!(
                (got - expected).abs() <= 1e-6 * (1.0 + expected.abs()),
                "target {target} input {i}: {got} vs {expected}"
            );
        }
    }
}

#[test]
fn epsilon_absorption_shrinks_with_epsilon() {
    let mut net = Network::<f64>::build(small_arch(), 12).unwrap();
    net.zero_biases();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let image = random_image([7, 6, 2], &mut rng);
    let gap = |eps: f64| {
        let map = lrp(&net, &image, 1, LrpRule::LrpEpsilon { epsilon: eps }).unwrap();
        assert!(map.accounting_error() <= 1e-9);
        (map.input_sum - map.score).abs()
    };
    let (a, b, c) = (gap(1e-2), gap(1e-4), gap(1e-6));
    assert!(a > b && b > c, "{a} {b} {c}");
    let zero = lrp(&net, &image, 1, LrpRule::LrpZero).unwrap();
    assert!((zero.input_sum - zero.score).abs() <= 1e-12 * zero.score.abs().max(1.0));
}

#[test]
fn pooling_routes_relevance_to_window_winners_only() {
    let arch = ArchitectureSpec {
        input_shape: [4, 4, 1],
        num_classes: 4,
        layers: vec![
            LayerSpec::MaxPool2x2 {
                name: "pool".into(),
            },
            LayerSpec::Flatten {
                name: "flat".into(),
            },
            LayerSpec::Dense {
                name: "out".into(),
                inputs: 4,
                outputs: 4,
                activation: Activation::None,
            },
        ],
    };
    let mut net = Network::<f64>::build(arch, 40).unwrap();
    net.zero_biases();
    let values = [
        3.0, 9.0, 1.0, 4.0, 7.0, 2.0, 8.0, 6.0, 5.0, 11.0, 16.0, 10.0, 12.0, 13.0, 14.0, 15.0,
    ];
    let image = Tensor::new([4, 4, 1], values.to_vec()).unwrap();
    let weights = net.parameters()[0].1.data().to_vec();
    let map = lrp(&net, &image, 2, LrpRule::LrpZero).unwrap();
    // Window maxima are 9 (index 1), 8 (6), 13 (13) and 16 (10).
    let winners = [(1, 0), (6, 1), (13, 2), (10, 3)];
    let mut expected = [0.0; 16];
    for (pixel, unit) in winners {
        expected[pixel] = values[pixel] * weights[unit * 4 + 2];
    }
    for (i, (&got, want)) in map.relevance.data().iter().zip(expected).enumerate() {
        assert!((got - want).abs() <= 1e-12, "pixel {i}: {got} vs {want}");
    }
}

#[test]
fn video_mean_is_elementwise_average() {
    let net = Network::<f64>::build(small_arch(), 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let frames: Vec<_> = (0..5).map(|_| random_image([7, 6, 2], &mut rng)).collect();
    let rule = LrpRule::default();
    let video = explain_video(&net, &frames, 2, rule).unwrap();
    assert_eq!(video.maps.len(), 5);
    for i in 0..video.mean.len() {
        let oracle: f64 = frames
            .iter()
            .map(|f| lrp(&net, f, 2, rule).unwrap().relevance.data()[i])
            .sum::<f64>()
            / 5.0;
        assert!((video.mean.data()[i] - oracle).abs() <= 1e-12);
    }
}
