use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use circconv::analysis::{flop_count, FlopConventions, LayerSpec, ModelSpec};
use circconv::convops::circ_forward;
use circconv::nn::Network;
use circconv::spectral::{flop_counter, reset_flop_counter};
use circconv::{CirculantBaseTensor, ConvGeometry, PartitionConfig, Tensor3};

#[test]
fn counted_flops_track_the_model() {
    let conv = FlopConventions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [2, 4, 8, 16] {
        for (c0, c2, k, spatial) in [(16, 16, 3, 8), (32, 16, 1, 6), (16, 48, 3, 5)] {
            let cfg = PartitionConfig::new(n, c0, c2).unwrap();
            let base = CirculantBaseTensor::random_he(k, k, cfg, &mut rng);
            let x = Tensor3::random((spatial, spatial, c0), &mut rng);
            reset_flop_counter();
            circ_forward(&x, &base, ConvGeometry::valid()).unwrap();
            let counted = flop_counter() as f64;
            let out = spatial + 1 - k;
            let predicted = flop_count(&LayerSpec::conv("l", k, c0, c2, spatial, out, 1, None).with_partition(n), &conv) as f64;
            let rel = (counted - predicted).abs() / predicted;
            assert!(rel <= 0.05, "N={n} ({c0},{c2},{k},{spatial}): counted {counted} predicted {predicted}");
        }
    }
}

#[test]
fn network_accounting_matches_layer_shapes() {
    let net = Network::classifier((10, 8, 4), 12, 5, Some(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let spec = ModelSpec::from_network("toy", &net).unwrap();
    assert_eq!(spec.layers.len(), 2);
    let c = &spec.layers[0];
    assert_eq!((c.input, c.output, c.channels, c.n), ((10, 8), (10, 8), (4, 12), 4));
    assert_eq!(spec.layers[1].channels, (12, 5));
    assert_eq!(spec.units(), vec![0]);
    assert_eq!(spec.densified().layers[0].n, 1);
}
