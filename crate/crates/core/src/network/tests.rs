use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::OpKind;
use crate::tensor::Tensor;

fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, 3, h, w], |_| rng.random_range(-1.0..1.0))
}

fn tiny(mode: Mode) -> SfanetConfig {
    SfanetConfig {
        width: 0.0625,
        input_h: 32,
        input_w: 32,
        mode,
        ..SfanetConfig::default()
    }
}

fn run(model: &mut SfanetModel<f64>, x: &Tensor<f64>) -> (Graph<f64>, ModelOutput) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, Bindings::default()).unwrap();
    (g, out)
}

#[test]
fn encoder_map_shapes() {
    let cfg = SfanetConfig {
        input_h: 64,
        input_w: 128,
        ..SfanetConfig::default()
    };
    let mut model = SfanetModel::<f64>::new(cfg, 1).unwrap();
    let (g, out) = run(&mut model, &image(1, 64, 128, 2));
    let shapes: Vec<&[usize]> = out.encoder.res.iter().map(|&v| g.shape(v)).collect();
    assert_eq!(
        shapes,
        vec![&[1, 16, 16, 32][..], &[1, 32, 8, 16], &[1, 64, 4, 8], &[1, 128, 2, 4]]
    );
}

#[test]
fn indivisible_extents_are_rejected() {
    let mut model = SfanetModel::<f64>::new(tiny(Mode::Train), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(1, 48, 32, 3));
    let err = model.forward(&mut g, x, Bindings::default()).unwrap_err();
    assert!(err.to_string().contains("64×32"), "{err}");
    assert!(SfanetModel::<f64>::new(SfanetConfig { input_h: 40, ..tiny(Mode::Train) }, 1).is_err());
}

#[test]
fn attention_only_in_later_stages() {
    let model = SfanetModel::<f32>::new(SfanetConfig::default(), 1).unwrap();
    let has: Vec<bool> = model.encoder.stages.iter().map(|s| s.sca.is_some()).collect();
    assert_eq!(has, vec![false, true, true, true]);
}

#[test]
fn train_and_infer_outputs() {
    let x = image(2, 32, 32, 4);
    let mut model = SfanetModel::<f64>::new(tiny(Mode::Train), 5).unwrap();
    let (g, out) = run(&mut model, &x);
    let aux = out.decoder.aux.expect("train mode has auxiliary logits");
    for v in std::iter::once(out.decoder.logits).chain(aux) {
        assert_eq!(g.shape(v), &[2, 4, 32, 32]);
    }
    let train_nodes = g.len();

    model.set_mode(Mode::Infer).unwrap();
    let (g, out) = run(&mut model, &x);
    assert!(out.decoder.aux.is_none());
    assert_eq!(g.shape(out.decoder.logits), &[2, 4, 32, 32]);
    assert!(g.len() < train_nodes);
    // Five heads in train mode, one in infer mode; each head has one resize
    // to the output extents.
    let resizes_to_output = g
        .vars_of(OpKind::BilinearResize)
        .into_iter()
        .filter(|&v| g.shape(v)[2..] == [32, 32])
        .count();
    assert_eq!(resizes_to_output, 1);
}

#[test]
fn principal_head_sees_doubled_res1_channels() {
    let model = SfanetModel::<f32>::new(SfanetConfig::default(), 1).unwrap();
    assert_eq!(model.decoder.head.cbr.inner.conv.spec.in_channels, 16 + 16);
    assert_eq!(model.decoder.sfa[0].faa.channels, 16);
    assert_eq!(model.decoder.sfa[3].low_cbr.inner.conv.spec.in_channels, 128);
    assert_eq!(model.decoder.sfa[3].low_cbr.out_channels(), 64);
}

#[test]
fn aux_in_infer_mode_is_a_mode_error() {
    let mut model = SfanetModel::<f64>::new(tiny(Mode::Infer), 5).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(1, 32, 32, 6));
    let mut ctx = Ctx::new(&mut g, &mut model.store, Mode::Infer);
    let maps = model.encoder.forward(&mut ctx, x).unwrap();
    let err = model.decoder.forward(&mut ctx, &maps, 32, 32, true).unwrap_err();
    assert!(matches!(err, Error::Mode(_)));
}

#[test]
fn loss_examples() {
    let mut g = Graph::<f64>::new();
    let zeros = g.constant(Tensor::zeros(vec![1, 19, 2, 2]));
    let (root, b) = total_loss(&mut g, zeros, None, &[3; 4], [0.0; 4], None).unwrap();
    assert!((b.principal - 19f64.ln()).abs() < 1e-12);
    assert!((b.principal - 2.9444).abs() < 1e-4);
    assert_eq!(g.value(root).item().unwrap(), b.total);

    let mut big = Tensor::full(vec![1, 3, 1, 2], -40.0);
    big.data_mut()[0] = 40.0;
    big.data_mut()[3] = 40.0;
    let v = g.constant(big);
    let (_, b) = total_loss(&mut g, v, None, &[0, 1], [0.0; 4], None).unwrap();
    assert!(b.principal < 1e-30);
}

#[test]
fn loss_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let mut logits = || g.constant(Tensor::from_fn(vec![2, 3, 4, 4], |_| rng.random_range(-3.0..3.0)));
    let main = logits();
    let aux = [logits(), logits(), logits(), logits()];
    let labels: Vec<u8> = (0..32).map(|i| (i % 3) as u8).collect();
    let lambda = [0.0, 0.0, 1.0, 1.0];
    let (root, b) = total_loss(&mut g, main, Some(aux), &labels, lambda, None).unwrap();
    assert_eq!(b.total, b.principal + b.aux[2] + b.aux[3]);
    assert!(b.aux[0] > 0.0 && b.aux[1] > 0.0);
    assert!((g.value(root).item().unwrap() - b.total).abs() < 1e-12);
    // Zero-weight terms stay off the combined node.
    assert_eq!(g.count(OpKind::WeightedSum), 1);
    g.backward(root).unwrap();
}

fn randomize_norms(model: &mut SfanetModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, e) in model.store.iter_mut() {
        let (lo, hi) = match e.kind {
            ParamKind::BnScale => (0.5, 1.5),
            ParamKind::BnShift | ParamKind::BnRunningMean => (-0.5, 0.5),
            ParamKind::BnRunningVar => (0.5, 2.0),
            _ => continue,
        };
        e.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
}

#[test]
fn folding_preserves_outputs() {
    let mut model = SfanetModel::<f64>::new(tiny(Mode::Infer), 11).unwrap();
    assert!(model.batch_norm_tensor_count() > 0);
    randomize_norms(&mut model, 12);
    let inputs: Vec<_> = (0..3).map(|i| image(1, 32, 32, 100 + i)).collect();
    let before: Vec<_> = inputs
        .iter()
        .map(|x| {
            let (g, o) = run(&mut model, x);
            g.into_value(o.decoder.logits)
        })
        .collect();
    model.fold_batch_norm().unwrap();
    assert_eq!(model.batch_norm_tensor_count(), 0);
    assert!(model.decoder.aux_heads.is_none());
    for (x, b) in inputs.iter().zip(&before) {
        let (g, o) = run(&mut model, x);
        assert_eq!(g.count(OpKind::BatchNormInfer), 0);
        assert!(g.value(o.decoder.logits).max_abs_diff(b).unwrap() < 1e-9);
    }
    assert!(model.set_mode(Mode::Train).is_err());
}

#[test]
fn folding_requires_infer_mode() {
    let mut model = SfanetModel::<f64>::new(tiny(Mode::Train), 1).unwrap();
    assert!(matches!(model.fold_batch_norm(), Err(Error::Mode(_))));
}

#[test]
fn forward_is_deterministic() {
    let x = image(2, 32, 32, 13);
    let mut a = SfanetModel::<f64>::new(tiny(Mode::Train), 3).unwrap();
    let mut b = SfanetModel::<f64>::new(tiny(Mode::Train), 3).unwrap();
    let (ga, oa) = run(&mut a, &x);
    let (gb, ob) = run(&mut b, &x);
    assert_eq!(ga.value(oa.decoder.logits), gb.value(ob.decoder.logits));
}

#[test]
fn config_validation() {
    assert!(SfanetConfig::default().validate().is_ok());
    assert_eq!(SfanetConfig::default().channels(), [16, 32, 64, 128]);
    assert!(SfanetConfig { width: 0.0, ..SfanetConfig::default() }.validate().is_err());
    assert!(SfanetConfig { num_classes: 0, ..SfanetConfig::default() }.validate().is_err());
    assert!(SfanetConfig { width: 0.02, ..SfanetConfig::default() }.validate().is_err());
}
