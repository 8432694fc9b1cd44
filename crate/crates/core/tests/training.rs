use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use circconv::nn::{
    backward_pass, batch_loss, forward_pass, sgd_step, CircConvLayer, Layer, LossHead, Network, SgdConfig, SgdState,
    Targets,
};
use circconv::{CirculantBaseTensor, ConvGeometry, PartitionConfig, Tensor3};

fn linear_circ_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PartitionConfig::new(4, 8, 8).unwrap();
    Network::new(
        (4, 4, 8),
        vec![Layer::CircConv(CircConvLayer {
            name: "conv".into(),
            base: CirculantBaseTensor::random_he(3, 3, cfg, &mut rng),
            bias: vec![0.0; 8],
            geometry: ConvGeometry::padded(1),
        })],
        LossHead::SquaredError,
    )
    .unwrap()
}

#[test]
fn convex_problem_loss_decreases_every_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher = linear_circ_net(99);
    let xs: Vec<Tensor3> = (0..8).map(|_| Tensor3::random((4, 4, 8), &mut rng)).collect();
    let targets: Vec<Vec<f64>> = forward_pass(&teacher, &xs)
        .unwrap()
        .outputs()
        .iter()
        .map(|a| a.as_slice().to_vec())
        .collect();
    let mut net = linear_circ_net(1);
    let cfg = SgdConfig {
        learning_rate: 1e-3,
        momentum: 0.0,
        weight_decay: 0.0,
        batch_size: 8,
    };
    let mut state = SgdState::new(&net);
    let mut last = f64::INFINITY;
    for step in 0..100 {
        let cache = forward_pass(&net, &xs).unwrap();
        let (loss, grads) = backward_pass(&net, &cache, Targets::Values(&targets)).unwrap();
        assert!(loss < last, "step {step}: {loss} >= {last}");
        last = loss;
        sgd_step(&mut net, &grads, &mut state, &cfg).unwrap();
    }
    let cache = forward_pass(&net, &xs).unwrap();
    assert!(batch_loss(&net, &cache, Targets::Values(&targets)).unwrap() < last);
}

#[test]
fn fixed_seed_gives_identical_trajectories() {
    let run = || {
        let mut net = Network::classifier((6, 6, 3), 6, 3, Some(3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Tensor3> = (0..12).map(|_| Tensor3::random((6, 6, 3), &mut rng)).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut losses = Vec::new();
        circconv::nn::train(&mut net, &xs, &labels, &SgdConfig { batch_size: 4, ..SgdConfig::default() }, 15, 9, |_, r| {
            losses.push(r.loss.to_bits());
            true
        })
        .unwrap();
        (losses, net)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert_eq!(a, b);
    assert_eq!(na, nb);
}
