//! The benchmark inputs are valid for the kernels they exercise.

use mavlkit::matching_losses::hungarian;
use mavlkit::msda::{msda_forward, FeaturePyramid, MsdaParams, MsdaShape, ReferencePoint};
use mavlkit::Tensor;

#[test]
fn benchmark_shapes_run() {
    let shape = MsdaShape { channels: 64, heads: 4, levels: 3, points: 4 };
    let params = MsdaParams::init(shape, 0).unwrap();
    let maps: Vec<Tensor> = [8, 4, 2].iter().map(|&s| Tensor::zeros(&[s, s, 64])).collect();
    let pyramid = FeaturePyramid::from_maps(&maps, &[8, 16, 32]).unwrap();
    let refs = vec![ReferencePoint::new(0.5, 0.5).unwrap(); 24];
    let out = msda_forward(&Tensor::zeros(&[24, 64]), &refs, &pyramid, &params).unwrap();
    assert_eq!(out.output.shape(), &[24, 64]);

    let cost = Tensor::from_fn(&[300, 50], |i| ((i * 7919) % 101) as f64);
    assert_eq!(hungarian(&cost).unwrap().pairs.len(), 50);
}
