use ensemble_kd::ensemble::EnsembleModel;
use ensemble_kd::eval::{ensemble_gradient_check, finite_difference_check, oracle_spec, GradCheckReport};
use ensemble_kd::layers::{build_layer, AdaptationLayer, Block, BlockSpec, LayerSpec, Param};
use ensemble_kd::losses::{ensemble_loss, intermediate_loss, kd_loss, LossWeights};
use ensemble_kd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks parameters and the input of `forward` against a random linear
/// readout of its output.
fn check_module<F>(mut params: Vec<Param<f64>>, input_shape: &[usize], seed: u64, forward: F) -> GradCheckReport
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::parameter(random(&mut rng, input_shape), input_shape).unwrap();
    params.push(Param {
        name: "input".into(),
        tensor: x.clone(),
    });
    let probe_shape = forward(&x).shape().to_vec();
    let probe = Tensor::new(random(&mut rng, &probe_shape), &probe_shape).unwrap();
    let report = finite_difference_check(&params, || Ok(forward(&x).mul(&probe)?.sum()), H, TOL).unwrap();
    assert!(report.passed(), "{report:?}");
    report
}

fn layer_report(spec: LayerSpec, input_shape: &[usize], seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = build_layer::<f64, _>(&spec, "l", &mut rng).unwrap();
    // non-zero biases so their gradients are exercised away from init
    for p in layer.parameters() {
        let n = p.tensor.numel();
        p.tensor.data_mut().iter_mut().zip(random(&mut rng, &[n])).for_each(|(v, r)| *v += 0.1 * r);
    }
    check_module(layer.parameters(), input_shape, seed + 1, |x| layer.forward(x).unwrap())
}

#[test]
fn conv_layer_gradients() {
    layer_report(LayerSpec::conv(2, 3, 3, 1), &[2, 2, 5, 5], 1);
    layer_report(LayerSpec::conv(3, 2, 3, 2), &[2, 3, 6, 5], 2);
    layer_report(LayerSpec::conv(2, 4, 1, 1), &[1, 2, 3, 3], 3);
}

#[test]
fn residual_layer_gradients() {
    // identity skip, projection skip, and two stacked units
    layer_report(LayerSpec::residual(3, 3, 3, 1, 1), &[2, 3, 4, 4], 4);
    layer_report(LayerSpec::residual(2, 4, 3, 2, 1), &[2, 2, 5, 5], 5);
    let r = layer_report(LayerSpec::residual(2, 3, 3, 2, 2), &[2, 2, 6, 6], 6);
    assert!(r.checked > 2 * 3 * 9 * 2);
}

#[test]
fn pooling_and_linear_gradients() {
    layer_report(LayerSpec::max_pool(2, 2, 2), &[2, 2, 4, 4], 7);
    layer_report(LayerSpec::max_pool(1, 3, 2), &[1, 1, 7, 7], 8);
    layer_report(LayerSpec::global_avg_pool(3), &[2, 3, 3, 2], 9);
    layer_report(LayerSpec::linear(6, 4), &[3, 6], 10);
}

#[test]
fn block_and_adaptation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = BlockSpec::new(2, vec![LayerSpec::residual(2, 3, 3, 1, 2), LayerSpec::max_pool(3, 2, 2)]);
    let block = Block::<f64>::build(&spec, "b", &mut rng).unwrap();
    check_module(block.parameters(), &[2, 2, 4, 4], 12, |x| block.forward(x).unwrap());

    let adapt = AdaptationLayer::<f64>::new("a", 2, 5, &mut rng).unwrap();
    check_module(adapt.parameters(), &[2, 2, 3, 3], 13, |x| adapt.adapt_channels(x).unwrap());
}

fn tiny_batch(seed: u64) -> (EnsembleModel<f64>, Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = EnsembleModel::<f64>::build(&oracle_spec(), 3, &mut rng).unwrap();
    for p in model.parameters() {
        if p.name.ends_with(".bias") {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&random(&mut rng, &[n]).iter().map(|v| 0.1 * v).collect::<Vec<_>>());
        }
    }
    let images = Tensor::new(random(&mut rng, &[4, 1, 12, 12]), &[4, 1, 12, 12]).unwrap();
    let labels = vec![0, 2, 1, 2];
    (model, images, labels)
}

#[test]
fn combined_loss_gradients_on_small_ensemble() {
    let (model, images, labels) = tiny_batch(21);
    let count: usize = model.parameters().iter().map(|p| p.tensor.numel()).sum();
    assert!(count <= 2000, "{count} parameters");
    let report = ensemble_gradient_check(&model, &images, &labels, &LossWeights::default(), H, TOL).unwrap();
    assert_eq!(report.checked, count);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn combined_loss_variants() {
    let (model, images, labels) = tiny_batch(22);
    let variants = [
        LossWeights {
            kd_teacher_grad: true,
            ..LossWeights::default()
        },
        LossWeights {
            kd_t2_scale: true,
            temperature: 3.0,
            ..LossWeights::default()
        },
        LossWeights::baseline(),
    ];
    for w in variants {
        let report = ensemble_gradient_check(&model, &images, &labels, &w, H, TOL).unwrap();
        assert!(report.passed(), "{w:?}: {report:?}");
    }
}

fn grads(model: &EnsembleModel<f64>) -> Vec<(String, Vec<f64>)> {
    model
        .parameters()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.numel()])))
        .collect()
}

fn is_pseudo_teacher(name: &str) -> bool {
    name.starts_with("base.") || name.starts_with("student1.")
}

#[test]
fn intermediate_loss_leaves_pseudo_teacher_untouched() {
    let (model, images, _) = tiny_batch(31);
    let out = model.forward(&images).unwrap();
    let teacher = out.taps[0].clone().map(|t| t.stop_gradient());
    let loss = intermediate_loss(&model, &out.taps[1..], &teacher).unwrap();
    assert!(loss.item() > 0.0);
    loss.backward().unwrap();
    // the hint gradient stops at the branch input and never reaches the base
    let proxy = out.base_proxy.as_ref().unwrap();
    assert!(proxy.grad().unwrap().iter().any(|x| *x != 0.0));
    let g = grads(&model);
    for (name, v) in &g {
        if is_pseudo_teacher(name) {
            assert!(v.iter().all(|x| *x == 0.0), "{name} received gradient");
        }
    }
    assert!(g.iter().any(|(n, v)| n.starts_with("adapt") && v.iter().any(|x| *x != 0.0)));
    assert!(g.iter().any(|(n, v)| n.starts_with("student3.") && v.iter().any(|x| *x != 0.0)));
}

#[test]
fn routed_training_backward_keeps_hint_off_the_base() {
    // β-only weighting: the base and student 1 see no gradient at all
    let (model, images, labels) = tiny_batch(32);
    let w = LossWeights {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let out = model.forward(&images).unwrap();
    ensemble_loss(&model, &out, &labels, &w, None).unwrap().backward(&out).unwrap();
    for (name, v) in grads(&model) {
        if is_pseudo_teacher(&name) {
            assert!(v.iter().all(|x| *x == 0.0), "{name} received gradient");
        }
    }
}

#[test]
fn detached_teacher_path_is_inert() {
    let (model, images, _) = tiny_batch(33);
    let run = |teacher_of: &dyn Fn(&Tensor<f64>) -> Tensor<f64>| {
        model.zero_grad();
        let out = model.forward(&images).unwrap();
        let teacher = teacher_of(&out.teacher_logits);
        kd_loss(&out.logits, &teacher, 2.0, false).unwrap().backward().unwrap();
        out.propagate_to_base().unwrap();
        (grads(&model), out.teacher_logits.grad())
    };
    let (detached, teacher_grad) = run(&|t| t.clone());
    assert!(teacher_grad.is_none() || teacher_grad.unwrap().iter().all(|g| *g == 0.0));
    // the same teacher values supplied as an unrelated constant
    let (constant, _) = run(&|t| Tensor::new(t.to_vec(), t.shape()).unwrap());
    assert_eq!(detached, constant);
    // a teacher path routed through an extra zero-valued parameter: same
    // values, and the parameter must stay gradient-free
    let shift = Tensor::parameter(vec![0.0; 3], &[3]).unwrap();
    let (shifted, _) = run(&|t| t.add(&shift).unwrap());
    assert_eq!(detached, shifted);
    assert!(shift.grad().is_none_or(|g| g.iter().all(|x| *x == 0.0)));
    assert!(detached.iter().any(|(_, v)| v.iter().any(|x| *x != 0.0)));
}

#[test]
fn oracle_suite_passes_for_several_seeds() {
    for seed in 0..3 {
        for (name, report) in ensemble_kd::eval::gradient_oracle_suite(seed).unwrap() {
            assert!(report.passed(), "seed {seed} {name}: {report:?}");
        }
    }
}
