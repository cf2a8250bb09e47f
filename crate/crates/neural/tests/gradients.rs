use calc_neural::gradcheck::{ensure_connected, grad_check};
use calc_neural::{cross_entropy, ForwardCtx, LayerSpec, Mode, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOLERANCE: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Loss = sum(projection * output), so d loss / d output = projection.
fn check_with_projection(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Sequential::<f64>::new(specs, &mut rng).unwrap();
    let input = random(input_shape, &mut rng);
    let out_shape = {
        let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(99));
        net.forward(input.clone(), &mut ctx).unwrap().shape().to_vec()
    };
    let projection = random(&out_shape, &mut rng);

    let forward = |net: &mut Sequential<f64>| {
        let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(99));
        net.forward(input.clone(), &mut ctx).unwrap()
    };
    let mut input_grad = None;
    let report = grad_check(
        &mut net,
        |net| {
            forward(net);
            input_grad = Some(net.backward(projection.clone())?);
            Ok(())
        },
        |net| Ok(forward(net).data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()),
        12,
        seed,
    )
    .unwrap();
    assert!(report.disconnected.is_empty(), "disconnected: {:?}", report.disconnected);

    // input gradient, checked on a few coordinates
    let input_grad = input_grad.unwrap();
    let mut worst = report.max_relative_error();
    let h = 1e-5;
    for idx in [0, input.len() / 2, input.len() - 1] {
        let eval = |delta: f64| {
            let mut x = input.clone();
            x.data_mut()[idx] += delta;
            let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(99));
            let y = net.clone().forward(x, &mut ctx).unwrap();
            y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(calc_neural::gradcheck::relative_error(input_grad.data()[idx], numeric));
    }
    worst
}

fn assert_layer(name: &str, specs: &[LayerSpec], input_shape: &[usize]) {
    for seed in [1u64, 2, 3] {
        let err = check_with_projection(specs, input_shape, seed);
        println!("gradcheck {name:<12} seed {seed}: max relative error {err:.3e}");
        assert!(err <= TOLERANCE, "{name} seed {seed}: {err}");
    }
}

#[test]
fn conv2d_gradients() {
    assert_layer("conv2d", &[LayerSpec::conv(2, 3, 3, 1)], &[2, 2, 7, 7]);
    assert_layer("conv2d-dil3", &[LayerSpec::conv(2, 3, 3, 3)], &[2, 2, 9, 9]);
}

#[test]
fn maxpool_gradients() {
    assert_layer("maxpool2d", &[LayerSpec::conv(1, 2, 1, 1), LayerSpec::MaxPool2d { pool: 2, stride: 2 }], &[2, 1, 6, 6]);
}

#[test]
fn dense_gradients() {
    assert_layer("dense", &[LayerSpec::Dense { inputs: 12, units: 5 }], &[3, 3, 2, 2]);
}

#[test]
fn elu_gradients() {
    assert_layer("elu", &[LayerSpec::conv(1, 2, 1, 1), LayerSpec::Elu], &[2, 1, 4, 4]);
}

#[test]
fn softmax_gradients() {
    assert_layer("softmax", &[LayerSpec::conv(2, 4, 1, 1), LayerSpec::Softmax], &[2, 2, 3, 3]);
}

#[test]
fn dropout_gradients() {
    assert_layer("dropout", &[LayerSpec::conv(1, 3, 1, 1), LayerSpec::Dropout { p: 0.35 }], &[2, 1, 5, 5]);
}

#[test]
fn batchnorm_gradients() {
    assert_layer(
        "batchnorm",
        &[LayerSpec::conv(1, 3, 1, 1), LayerSpec::BatchNorm { channels: 3 }],
        &[4, 1, 3, 3],
    );
    assert_layer(
        "batchnorm-1d",
        &[LayerSpec::Dense { inputs: 6, units: 4 }, LayerSpec::BatchNorm { channels: 4 }],
        &[5, 6],
    );
}

#[test]
fn stacked_network_with_cross_entropy() {
    let specs = [
        LayerSpec::conv(1, 4, 3, 1),
        LayerSpec::BatchNorm { channels: 4 },
        LayerSpec::Elu,
        LayerSpec::MaxPool2d { pool: 2, stride: 2 },
        LayerSpec::conv(4, 4, 3, 2),
        LayerSpec::Elu,
        LayerSpec::Dropout { p: 0.5 },
        LayerSpec::Dense { inputs: 4, units: 3 },
        LayerSpec::Softmax,
    ];
    for seed in [4u64, 5, 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::<f64>::new(&specs, &mut rng).unwrap();
        let input = random(&[3, 1, 12, 12], &mut rng);
        let targets = [0usize, 2, 1];
        let run = |net: &mut Sequential<f64>| {
            let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(seed));
            let p = net.forward(input.clone(), &mut ctx).unwrap();
            cross_entropy(&p, &targets, None).unwrap()
        };
        let report = grad_check(
            &mut net,
            |net| {
                let (_, g) = run(net);
                net.backward(g)?;
                Ok(())
            },
            |net| Ok(run(net).0),
            20,
            seed,
        )
        .unwrap();
        ensure_connected(&mut net).unwrap();
        println!("gradcheck stack seed {seed}: {:.3e}", report.max_relative_error());
        assert!(report.max_relative_error() <= TOLERANCE, "{:?}", report.worst());
    }
}

#[test]
fn affine_scalar_graph_is_exact() {
    // y = a * x + b as a 1x1 dense layer; loss = y
    let mut net = Sequential::<f64>::new(
        &[LayerSpec::Dense { inputs: 1, units: 1 }],
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let x = 3.5;
    let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
    net.forward(Tensor::from_vec(&[1, 1], vec![x]).unwrap(), &mut ctx).unwrap();
    net.backward(Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
    let grads = net.layers()[0].grads();
    assert_eq!(grads[0].as_ref().unwrap().data(), &[x]);
    assert_eq!(grads[1].as_ref().unwrap().data(), &[1.0]);
}

#[test]
fn disconnected_parameter_is_reported_distinctly() {
    let mut net = Sequential::<f64>::new(
        &[LayerSpec::conv(1, 1, 1, 1), LayerSpec::conv(1, 1, 1, 1)],
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    // gradient only reaches the second layer
    let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
    let x = Tensor::filled(&[1, 1, 2, 2], 1.0);
    let h = net.layers_mut()[0].forward(x, &mut ctx).unwrap();
    net.layers_mut()[1].forward(h, &mut ctx).unwrap();
    net.layers_mut()[1].backward(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    let err = ensure_connected(&mut net).unwrap_err();
    assert!(err.to_string().contains("0.conv2d.weight"), "{err}");

    // numerically zero but connected gradient passes
    net.zero_grad();
    let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
    net.forward(Tensor::filled(&[1, 1, 2, 2], 1.0), &mut ctx).unwrap();
    net.backward(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    ensure_connected(&mut net).unwrap();
}

#[test]
fn fixed_seed_training_is_bit_deterministic() {
    let specs = [LayerSpec::conv(1, 4, 3, 2), LayerSpec::Elu, LayerSpec::Dropout { p: 0.35 }, LayerSpec::conv(4, 3, 1, 1), LayerSpec::Softmax];
    let train = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Sequential::<f32>::new(&specs, &mut rng).unwrap();
        let mut opt = calc_neural::OptimizerState::new(calc_neural::AdamConfig::default());
        let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(12));
        let mut losses = Vec::new();
        for step in 0..5 {
            let x = {
                let mut r = ChaCha8Rng::seed_from_u64(step);
                Tensor::from_vec(&[4, 1, 9, 9], (0..324).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
            };
            net.zero_grad();
            let p = net.forward(x, &mut ctx).unwrap();
            let targets: Vec<usize> = (0..p.len() / 3).map(|i| i % 3).collect();
            let (loss, g) = cross_entropy(&p, &targets, None).unwrap();
            net.backward(g).unwrap();
            opt.step(&mut net.slots("net")).unwrap();
            losses.push(loss.to_bits());
        }
        (losses, calc_neural::NetworkWeights::capture(&net, 11, 5, "{}".into()).to_bytes())
    };
    assert_eq!(train(), train());
}
