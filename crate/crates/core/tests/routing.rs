use mdae::graph::{backward_through, Group, Mode, ModelSpec, ParamRegistry};
use mdae::model::MergedAutoencoder;
use mdae::tensor::{mse, Dims, Scalar, Tensor4};
use mdae::trainer::compute_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelSpec {
    ModelSpec {
        encoder_channels: vec![2, 4, 8],
        bottleneck_channels: 16,
        decoder_channels: vec![16, 8, 4],
        decoders: 3,
        ..ModelSpec::default()
    }
}

fn batch<T: Scalar>(seed: u64) -> (Tensor4<T>, Tensor4<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dims::new(4, 1, 8, 8);
    let x = Tensor4::random_uniform(d, 0.0, 1.0, &mut rng);
    let y = Tensor4::random_uniform(d, 0.0, 1.0, &mut rng);
    (x, y)
}

fn group_grads<T: Scalar>(reg: &ParamRegistry<T>, g: Group) -> Vec<(String, Vec<T>)> {
    reg.iter()
        .filter(|(_, p)| p.group == g && p.trainable)
        .map(|(_, p)| (p.name.clone(), p.grad.data().to_vec()))
        .collect()
}

/// Gradients of one decoder's loss alone, taken along that decoder's path.
fn single_path(
    model: &MergedAutoencoder<f32>,
    x: &Tensor4<f32>,
    y: &Tensor4<f32>,
    k: usize,
) -> ParamRegistry<f32> {
    let mut m = model.clone();
    let out = m.forward_all(x, Mode::Train).unwrap();
    m.absorb_batch_stats(&out.cache);
    let (_, lc) = mse(&out.outputs[k], y).unwrap();
    let g = lc.backward(1.0).unwrap();
    let dec_cache = out.cache.decoders.into_iter().nth(k).unwrap();
    let mut reg = m.registry().clone();
    reg.zero_grads();
    backward_through(
        &mut reg,
        m.encoder(),
        &m.decoders()[k],
        out.cache.encoder,
        dec_cache,
        &g,
    )
    .unwrap();
    reg
}

#[test]
fn encoder_gradient_comes_only_from_the_best_decoder() {
    for seed in 0..4 {
        let model = MergedAutoencoder::<f32>::new(tiny(), seed).unwrap();
        let (x, y) = batch::<f32>(100 + seed);

        let out = model.forward_all(&x, Mode::Train).unwrap();
        let losses: Vec<f64> = out.outputs.iter().map(|o| mse(o, &y).unwrap().0).collect();
        let mut k = 0;
        for (i, &l) in losses.iter().enumerate() {
            if l < losses[k] {
                k = i;
            }
        }

        let mut trained = model.clone();
        let step = compute_gradients(&mut trained, &x, &y).unwrap();
        assert_eq!(step.selected, k);
        assert_eq!(step.losses, losses);

        let oracle = single_path(&model, &x, &y, k);
        assert_eq!(
            group_grads(trained.registry(), Group::Encoder),
            group_grads(&oracle, Group::Encoder),
            "seed {seed}"
        );
        for j in 0..3 {
            let own = single_path(&model, &x, &y, j);
            assert_eq!(
                group_grads(trained.registry(), Group::Decoder(j)),
                group_grads(&own, Group::Decoder(j)),
                "seed {seed} decoder {j}"
            );
            let any_nonzero = group_grads(trained.registry(), Group::Decoder(j))
                .iter()
                .any(|(_, g)| g.iter().any(|&v| v != 0.0));
            assert!(any_nonzero, "decoder {j} got no gradient");
        }
    }
}

#[test]
fn routed_gradient_is_the_derivative_of_the_minimum_loss() {
    let model = MergedAutoencoder::<f64>::new(tiny(), 11).unwrap();
    let (x, y) = batch::<f64>(12);
    let min_loss = |m: &MergedAutoencoder<f64>| {
        let out = m.forward_all(&x, Mode::Train).unwrap();
        out.outputs
            .iter()
            .map(|o| mse(o, &y).unwrap().0)
            .fold(f64::INFINITY, f64::min)
    };
    let mut g = model.clone();
    compute_gradients(&mut g, &x, &y).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ids: Vec<_> = model
        .registry()
        .iter()
        .filter(|(_, p)| p.trainable && p.group == Group::Encoder)
        .map(|(id, _)| id)
        .collect();
    // small enough that no ReLU or pooling switch flips across the stencil
    let h = 1e-6;
    let mut checked = 0;
    for _ in 0..40 {
        let id = ids[rng.random_range(0..ids.len())];
        let n = model.registry().value(id).data().len();
        let e = rng.random_range(0..n);
        let analytic = g.registry().grad(id).data()[e];
        let mut m = model.clone();
        let v0 = m.registry().value(id).data()[e];
        m.registry_mut().value_mut(id).data_mut()[e] = v0 + h;
        let up = min_loss(&m);
        m.registry_mut().value_mut(id).data_mut()[e] = v0 - h;
        let down = min_loss(&m);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        assert!(
            rel < 1e-4,
            "{}[{e}]: analytic {analytic} numeric {numeric}",
            model.registry().param(id).name
        );
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} informative probes");
}
