#![allow(dead_code)]

use ensemble_kd::ensemble::ArchitectureSpec;
use ensemble_kd::layers::{BlockSpec, LayerSpec};
use ensemble_kd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_images<T: ensemble_kd::tensor::Element>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = uniform(&mut rng, shape).into_iter().map(T::from_f64).collect();
    Tensor::new(data, shape).unwrap()
}

/// Small residual network used across tests.
pub fn small_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        input_shape: [1, 8, 8],
        num_classes: 3,
        blocks: vec![
            BlockSpec::new(1, vec![LayerSpec::conv(1, 4, 3, 1)]),
            BlockSpec::new(2, vec![LayerSpec::residual(4, 6, 3, 1, 1)]),
            BlockSpec::new(3, vec![LayerSpec::residual(6, 12, 3, 2, 1)]),
            BlockSpec::new(4, vec![LayerSpec::residual(12, 24, 3, 2, 1)]),
        ],
        classifier: LayerSpec::linear(24, 3),
    }
}

/// Conv-dominant residual network shaped like a CIFAR ResNet-20.
pub fn resnet20_like() -> ArchitectureSpec {
    ArchitectureSpec {
        input_shape: [3, 32, 32],
        num_classes: 10,
        blocks: vec![
            BlockSpec::new(1, vec![LayerSpec::conv(3, 16, 3, 1)]),
            BlockSpec::new(2, vec![LayerSpec::residual(16, 16, 3, 1, 3)]),
            BlockSpec::new(3, vec![LayerSpec::residual(16, 32, 3, 2, 3)]),
            BlockSpec::new(4, vec![LayerSpec::residual(32, 64, 3, 2, 3)]),
        ],
        classifier: LayerSpec::linear(64, 10),
    }
}
