use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{conv_encoder_forward, layer_norm, recurrent_step, RecurrentState};

fn small_spec() -> EncoderSpec {
    EncoderSpec {
        conv_layers: 2,
        filters: 4,
        kernel: 3,
        latent_dim: 6,
        head_dim: 10,
    }
}

fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Arc<Frame> {
    let mut f = Frame::new(size, size);
    f.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
    Arc::new(f)
}

fn perturb_params(p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in p.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
}

fn pixel_repr(mode: RepresentationMode, n: usize) -> Representation {
    Representation::new(mode, n, InputShape::Frame(12), &small_spec()).unwrap()
}

fn rows(g: &Graph<f64>, v: Var) -> Vec<Vec<f64>> {
    let t = g.tensor(v);
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn frame_input(g: &Graph<f64>, frames: &[Arc<Frame>]) -> Vec<Var> {
    frames
        .iter()
        .map(|f| {
            let b = WindowBatch::<f64>::from_frames(&[vec![f.clone()]]).unwrap();
            g.input(b.steps[0].clone())
        })
        .collect()
}

#[test]
fn shared_encoder_matches_per_frame_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let repr = pixel_repr(RepresentationMode::FlarePixel, 3);
    let enc = repr.encoder().unwrap();
    let params: ParamSet<f64> = repr.init(&mut rng);
    let a = random_frame(&mut rng, 12);
    let b = random_frame(&mut rng, 12);
    let g = Graph::new();
    let frames = vec![a.clone(), b.clone(), a.clone()];
    let z = encode_frames(&g, Bind::frozen(&params), enc, &frame_input(&g, &frames)).unwrap();
    assert_eq!(g.tensor(z[0]), g.tensor(z[2]));
    for (f, zi) in frames.iter().zip(&z) {
        let t = WindowBatch::<f64>::from_frames(&[vec![f.clone()]])
            .unwrap()
            .steps[0]
            .clone();
        let single =
            conv_encoder_forward(enc, &params, &t.reshaped(&[12, 12, 1]).unwrap()).unwrap();
        assert_eq!(g.tensor(*zi).data(), &single[..]);
    }
    let swapped = encode_frames(&g, Bind::frozen(&params), enc, &frame_input(&g, &[b, a])).unwrap();
    assert_eq!(g.tensor(swapped[0]), g.tensor(z[1]));
    assert_eq!(g.tensor(swapped[1]), g.tensor(z[0]));
}

#[test]
fn flow_of_constant_latents_is_zero_and_differences_otherwise() {
    let g = Graph::<f64>::new();
    let a = g.input(Tensor::row(vec![1.0, -2.0, 0.5]));
    let d = g.input(Tensor::row(vec![0.25, 1.0, -3.0]));
    let b = g.add(a, d);
    let flat = latent_flow(&g, &[a, a, a]).unwrap();
    assert!(flat
        .iter()
        .all(|&f| g.tensor(f).data().iter().all(|&v| v == 0.0)));
    let flow = latent_flow(&g, &[a, b]).unwrap();
    assert_eq!(g.tensor(flow[0]), g.tensor(d));
    assert!(matches!(
        latent_flow(&g, &[a]),
        Err(ReprError::Count { .. })
    ));
}

/// `||delta||^2` through the encoder with a given treatment of the older latent.
fn flow_loss_grads(
    enc: &ConvEncoder,
    params: &ParamSet<f64>,
    frames: &[Arc<Frame>],
    older: Option<&Tensor<f64>>,
    detach: bool,
) -> ParamSet<f64> {
    let g = Graph::new();
    let x = frame_input(&g, frames);
    let z_new = enc.forward(&g, Bind::trainable(params), x[1]).unwrap();
    let z_old = match older {
        Some(t) => g.input(t.clone()),
        None => enc.forward(&g, Bind::trainable(params), x[0]).unwrap(),
    };
    let delta = if detach {
        latent_flow(&g, &[z_old, z_new]).unwrap()[0]
    } else {
        g.sub(z_new, z_old)
    };
    let loss = g.sum(g.square(delta));
    let grads = g.backward(loss).unwrap();
    let mut out = ParamSet::new();
    for key in params.keys() {
        let shape = params.get(key).unwrap().shape().to_vec();
        out.insert(key.clone(), grads.params().value_or_zero(key, &shape));
    }
    out
}

fn flat(p: &ParamSet<f64>) -> Vec<f64> {
    p.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn flow_gradient_only_passes_through_newest_latent() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let repr = pixel_repr(RepresentationMode::FlarePixel, 2);
        let enc = repr.encoder().unwrap();
        let mut params: ParamSet<f64> = repr.init(&mut rng);
        perturb_params(&mut params, &mut rng);
        let frames = vec![random_frame(&mut rng, 12), random_frame(&mut rng, 12)];
        let g = Graph::new();
        let old = enc
            .forward(&g, Bind::frozen(&params), frame_input(&g, &frames)[0])
            .unwrap();
        let frozen_old = g.tensor(old);

        let detached = flat(&flow_loss_grads(enc, &params, &frames, None, true));
        let oracle = flat(&flow_loss_grads(
            enc,
            &params,
            &frames,
            Some(&frozen_old),
            false,
        ));
        let full = flat(&flow_loss_grads(enc, &params, &frames, None, false));
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff =
            |a: &[f64], b: &[f64]| norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        assert!(diff(&detached, &oracle) < 1e-10);
        assert!(diff(&detached, &full) / norm(&full) > 1e-3);
    }
}

#[test]
fn two_frame_fusion_input_is_latest_latent_then_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let repr = pixel_repr(RepresentationMode::FlarePixel, 2);
    assert_eq!(repr.pre_head_dim(), Some(2 * small_spec().latent_dim));
    let params: ParamSet<f64> = repr.init(&mut rng);
    let frames = vec![random_frame(&mut rng, 12), random_frame(&mut rng, 12)];
    let g = Graph::new();
    let z = encode_frames(
        &g,
        Bind::frozen(&params),
        repr.encoder().unwrap(),
        &frame_input(&g, &frames),
    )
    .unwrap();
    let flows = latent_flow(&g, &z).unwrap();
    let fused = g.concat(&[z[1], flows[0]]);
    let zt = g.tensor(z[1]).into_data();
    let d: Vec<f64> = zt
        .iter()
        .zip(g.tensor(z[0]).data())
        .map(|(a, b)| a - b)
        .collect();
    assert_eq!(g.tensor(fused).into_data(), [zt, d].concat());
}

#[test]
fn fusion_with_zero_flows_is_normalized_head_of_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = Linear::new("h", 6, 5);
    let norm = LayerNorm::new("n", 5);
    let mut p = ParamSet::new();
    head.init(&mut p, 1.0, &mut rng);
    norm.init(&mut p);
    let lat: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Graph::new();
    let z = g.input(Tensor::row(lat.clone()));
    let zero = g.input(Tensor::row(vec![0.0; 3]));
    let out = fuse(&g, Bind::frozen(&p), &head, &norm, &[z], &[zero]).unwrap();
    let pre = crate::nn::mlp_forward(
        &crate::nn::Mlp::new("h", &[6, 5]),
        &rename(&p, "h", "h.l0"),
        &[lat, vec![0.0; 3]].concat(),
    )
    .unwrap();
    let want = layer_norm(&pre, &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
    let got = g.tensor(out).into_data();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    let mean = got.iter().sum::<f64>() / 5.0;
    let var = got.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
    assert!(fuse(&g, Bind::frozen(&p), &head, &norm, &[z], &[zero, zero]).is_err());
}

fn rename(p: &ParamSet<f64>, from: &str, to: &str) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (k, v) in p.iter() {
        out.insert(k.replacen(from, to, 1), v.clone());
    }
    out
}

#[test]
fn state_flare_features_follow_definition() {
    let s = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    assert_eq!(
        state_flare_features(&s(&[0.0, 1.0, 3.0, 6.0])).unwrap(),
        vec![6.0, 3.0, 2.0, 1.0]
    );
    assert_eq!(
        state_flare_features(&s(&[2.5; 4])).unwrap(),
        vec![2.5, 0.0, 0.0, 0.0]
    );
    assert!(state_flare_features(&s(&[1.0, 2.0, 3.0])).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let got = state_flare_features(&pos).unwrap();
    let mut want = pos[3].clone();
    for (a, b) in [(3, 2), (2, 1), (1, 0)] {
        want.extend((0..2).map(|i| pos[a][i] - pos[b][i]));
    }
    assert_eq!(got, want);
}

#[test]
fn pixel_flow_channels() {
    let mut a = Frame::new(16, 16);
    a.set(4, 4, 1.0);
    let mut b = Frame::new(16, 16);
    b.set(4, 5, 1.0);
    let out = pixel_flow_preprocess(&[Arc::new(a.clone()), Arc::new(b)]).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[2].get(4, 5), 1.0);
    assert_eq!(out[2].get(4, 4), -1.0);
    assert_eq!(out[2].data.iter().filter(|&&v| v != 0.0).count(), 2);
    let still = pixel_flow_preprocess(&[Arc::new(a.clone()), Arc::new(a.clone())]).unwrap();
    assert!(still[2].data.iter().all(|&v| v == 0.0));
    for n in [2, 3, 5] {
        let frames = vec![Arc::new(a.clone()); n];
        assert_eq!(pixel_flow_preprocess(&frames).unwrap().len(), 2 * n - 1);
    }
    assert!(pixel_flow_preprocess(&[Arc::new(a)]).is_err());
}

fn scalar_windows(values: &[f64]) -> WindowBatch<f64> {
    let items: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    let window: Vec<&[f64]> = items.iter().map(|v| v.as_slice()).collect();
    WindowBatch::from_vectors(&[window]).unwrap()
}

#[test]
fn state_modes_build_expected_features() {
    let spec = EncoderSpec::default();
    let batch = scalar_windows(&[0.0, 1.0, 3.0, 6.0]);
    let run = |mode| {
        let r = Representation::new(mode, 4, InputShape::Vector(1), &spec).unwrap();
        let p: ParamSet<f64> = r.init(&mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::new();
        let v = r.forward(&g, Bind::frozen(&p), &batch).unwrap();
        assert_eq!(g.shape(v)[1], r.feature_dim());
        g.tensor(v).into_data()
    };
    assert_eq!(
        run(RepresentationMode::StateStack),
        vec![0.0, 1.0, 3.0, 6.0]
    );
    assert_eq!(
        run(RepresentationMode::StateFlare),
        vec![6.0, 3.0, 2.0, 1.0]
    );
    assert_eq!(run(RepresentationMode::StatePositionOnly), vec![6.0]);
    assert_eq!(run(RepresentationMode::StateFull), vec![6.0]);
}

#[test]
fn recurrent_mode_is_final_hidden_of_the_cell() {
    let r = Representation::new(
        RepresentationMode::StateRecurrent,
        4,
        InputShape::Vector(2),
        &EncoderSpec::default(),
    )
    .unwrap();
    assert_eq!(r.feature_dim(), 6);
    let p: ParamSet<f64> = r.init(&mut ChaCha8Rng::seed_from_u64(4));
    let pos = [[0.1, 0.9], [0.3, 0.7], [0.6, 0.2], [0.8, -0.4]];
    let window: Vec<&[f64]> = pos.iter().map(|v| v.as_slice()).collect();
    let batch = WindowBatch::from_vectors(&[window]).unwrap();
    let g = Graph::new();
    let v = r.forward(&g, Bind::frozen(&p), &batch).unwrap();
    let cell = LstmCell::new("encoder.lstm", 2, 6);
    let mut state = RecurrentState::zeros(6);
    for x in &pos {
        state = recurrent_step(&cell, &p, x, &state).unwrap();
    }
    for (a, b) in g.tensor(v).data().iter().zip(&state.hidden) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pixel_feature_width_is_head_width() {
    let spec = EncoderSpec::default();
    for n in [2, 3, 5] {
        let r = Representation::new(
            RepresentationMode::FlarePixel,
            n,
            InputShape::Frame(20),
            &spec,
        )
        .unwrap();
        assert_eq!(r.pre_head_dim(), Some(2 * (n - 1) * 64));
        assert_eq!(r.feature_dim(), spec.head_dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 3, 5] {
        for mode in [
            RepresentationMode::FlarePixel,
            RepresentationMode::LatentConcatPixel,
            RepresentationMode::FrameStackPixel,
            RepresentationMode::PixelFlow,
        ] {
            let r = pixel_repr(mode, n);
            let p: ParamSet<f64> = r.init(&mut rng);
            let windows: Vec<Vec<Arc<Frame>>> = (0..3)
                .map(|_| (0..n).map(|_| random_frame(&mut rng, 12)).collect())
                .collect();
            let batch = WindowBatch::from_frames(&windows).unwrap();
            let g = Graph::new();
            let v = r.forward(&g, Bind::frozen(&p), &batch).unwrap();
            assert_eq!(g.shape(v), vec![3, small_spec().head_dim]);
        }
    }
}

#[test]
fn latent_concat_is_fusion_without_flows() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = pixel_repr(RepresentationMode::LatentConcatPixel, 3);
    let p: ParamSet<f64> = r.init(&mut rng);
    let frames: Vec<Arc<Frame>> = (0..3).map(|_| random_frame(&mut rng, 12)).collect();
    let g = Graph::new();
    let got = r
        .forward(
            &g,
            Bind::frozen(&p),
            &WindowBatch::from_frames(std::slice::from_ref(&frames)).unwrap(),
        )
        .unwrap();
    let Net::Pixel {
        encoder,
        head,
        norm,
    } = &r.net
    else {
        unreachable!()
    };
    let z = encode_frames(&g, Bind::frozen(&p), encoder, &frame_input(&g, &frames)).unwrap();
    let want = fuse(&g, Bind::frozen(&p), head, norm, &z, &[]).unwrap();
    assert_eq!(rows(&g, got), rows(&g, want));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let spec = small_spec();
    assert!(Representation::new(
        RepresentationMode::FlarePixel,
        2,
        InputShape::Vector(3),
        &spec
    )
    .is_err());
    assert!(Representation::new(
        RepresentationMode::StateStack,
        4,
        InputShape::Frame(12),
        &spec
    )
    .is_err());
    assert!(Representation::new(
        RepresentationMode::FlarePixel,
        1,
        InputShape::Frame(12),
        &spec
    )
    .is_err());
    assert!(Representation::new(
        RepresentationMode::StateFlare,
        3,
        InputShape::Vector(2),
        &spec
    )
    .is_err());
    let r = pixel_repr(RepresentationMode::FlarePixel, 3);
    let p: ParamSet<f64> = r.init(&mut ChaCha8Rng::seed_from_u64(0));
    let short = WindowBatch::from_frames(&[vec![Arc::new(Frame::new(12, 12)); 2]]).unwrap();
    assert!(r.forward(&Graph::new(), Bind::frozen(&p), &short).is_err());
}

#[test]
fn zero_perturbation_gives_zero_on_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = pixel_repr(RepresentationMode::FlarePixel, 2);
    let p: ParamSet<f64> = r.init(&mut rng);
    let f = random_frame(&mut rng, 12);
    let report =
        linearization_check(r.encoder().unwrap(), &p, &f, &Frame::new(12, 12), 1e-6).unwrap();
    assert!(report.finite_difference.iter().all(|&v| v == 0.0));
    assert!(report.jvp.iter().all(|&v| v == 0.0));
    assert!(report.passed);
}

#[test]
fn linear_encoder_linearizes_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = EncoderSpec {
        conv_layers: 0,
        ..small_spec()
    };
    let r = Representation::new(
        RepresentationMode::FlarePixel,
        2,
        InputShape::Frame(12),
        &spec,
    )
    .unwrap();
    let p: ParamSet<f64> = r.init(&mut rng);
    let f = random_frame(&mut rng, 12);
    let delta = random_frame(&mut rng, 12);
    let report = linearization_check(r.encoder().unwrap(), &p, &f, &delta, 1e-12).unwrap();
    assert!(report.passed, "relative error {}", report.relative_error);
}

#[test]
fn linearization_error_shrinks_with_the_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = pixel_repr(RepresentationMode::FlarePixel, 2);
    let mut p: ParamSet<f64> = r.init(&mut rng);
    perturb_params(&mut p, &mut rng);
    let f = random_frame(&mut rng, 12);
    let dir = random_frame(&mut rng, 12);
    let dir_norm = dir
        .data
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scaled = |size: f64| Frame {
        data: dir
            .data
            .iter()
            .map(|&v| (v as f64 * size / dir_norm) as f32)
            .collect(),
        ..(*dir).clone()
    };
    let sizes: Vec<f64> = (0..14).map(|k| 4.0 / f64::powi(2.0, k)).collect();
    let errors: Vec<f64> = sizes
        .iter()
        .map(|&s| {
            let report =
                linearization_check(r.encoder().unwrap(), &p, &f, &scaled(s), 1.0).unwrap();
            report.relative_error
        })
        .collect();
    assert!(
        errors[0] > 1e-3,
        "the largest step must see the nonlinearity: {errors:?}"
    );
    for (e, s) in errors.iter().zip(&sizes) {
        assert!(*e <= 2.0 * errors[0] * s / sizes[0] + 1e-9, "{errors:?}");
    }
    let small = sizes.iter().position(|&s| s <= 1e-3).unwrap();
    assert!(errors[small] < 1e-3);
}
