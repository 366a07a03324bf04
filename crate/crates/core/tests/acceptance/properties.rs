//! Property criteria: gradients, stop-gradient, Bellman oracles, building
//! blocks and dimension algebra.

use std::sync::Arc;

use flare::augment::{crop, random_translate, TranslateSpec};
use flare::dqn::{Dqn, DqnBatch, DqnHyper};
use flare::envs::{Action, Frame, Observation};
use flare::nn::{
    gradient_error, layer_norm, Bind, ConvEncoder, ConvEncoderConfig, ConvLayerSpec, Graph,
    LayerNorm, Linear, LstmCell, Mlp, ParamSet, Tensor,
};
use flare::replay::{ReplayBuffer, Transition, Window};
use flare::representation::{
    latent_flow, state_flare_features, EncoderSpec, InputShape, Representation, RepresentationMode,
    WindowBatch,
};
use flare::sac::{ema_update, normal_noise, twin_critic_loss, Sac, SacArch, SacBatch, SacHyper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::{
    chi_square_critical, chi_square_uniform, flat, norm, relu_mlp, squashed_policy,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;
pub const DETACH_TOL: f64 = 1e-10;
pub const DETACH_MARGIN: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-6;
pub const ORACLE_BATCHES: u64 = 100;
pub const LN_MEAN_TOL: f64 = 1e-6;
pub const LN_VAR_TOL: f64 = 1e-5;
pub const EMA_TOL: f64 = 1e-9;
pub const CHI_ALPHA: f64 = 0.01;

type Check = Result<String, crate::Miss>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn jitter(p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in p.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-scale..scale));
    }
}

fn state_repr(dim: usize) -> Representation {
    Representation::new(
        RepresentationMode::StateFull,
        1,
        InputShape::Vector(dim),
        &EncoderSpec::default(),
    )
    .unwrap()
}

fn tiny_hyper() -> SacHyper {
    SacHyper {
        hidden_dim: 5,
        hidden_layers: 1,
        batch_size: 6,
        ..SacHyper::default()
    }
}

fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Arc<Frame> {
    let mut f = Frame::new(size, size);
    f.data
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(0.01..1.0));
    Arc::new(f)
}

/// Finite-difference checks of every network type over many seeds.
pub fn gradient_oracle() -> Check {
    let mut worst = [0.0f64; 6];
    let names = [
        "mlp",
        "conv encoder",
        "recurrent cell",
        "fusion head",
        "policy",
        "critics",
    ];
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut errs = [0.0; 6];

        let mlp = Mlp::new("mlp", &[4, 6, 6, 3]);
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut rng);
        jitter(&mut p, &mut rng, 0.1);
        let x = random_tensor(&mut rng, &[5, 4]);
        errs[0] = gradient_error(&p, FD_STEP, |g, b| {
            g.mean(g.square(mlp.forward(g, b, g.input(x.clone())).unwrap()))
        });

        let enc = ConvEncoder::new(
            "enc",
            ConvEncoderConfig {
                height: 9,
                width: 9,
                channels: 2,
                layers: vec![
                    ConvLayerSpec {
                        kernel: 3,
                        stride: 2,
                        filters: 3,
                    },
                    ConvLayerSpec {
                        kernel: 2,
                        stride: 1,
                        filters: 3,
                    },
                ],
                latent_dim: 4,
            },
        )
        .unwrap();
        let mut p = ParamSet::new();
        enc.init(&mut p, &mut rng);
        jitter(&mut p, &mut rng, 0.1);
        let frames = random_tensor(&mut rng, &[2, 9, 9, 2]);
        errs[1] = gradient_error(&p, FD_STEP, |g, b| {
            let z = enc.forward(g, b, g.input(frames.clone())).unwrap();
            g.add(g.mean(g.square(z)), g.mean(g.tanh(z)))
        });

        let cell = LstmCell::new("rnn", 3, 4);
        let mut p = ParamSet::new();
        cell.init(&mut p, &mut rng);
        jitter(&mut p, &mut rng, 0.1);
        let seq: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[2, 3])).collect();
        errs[2] = gradient_error(&p, FD_STEP, |g, b| {
            let mut h = g.input(Tensor::zeros(&[2, 4]));
            let mut c = h;
            for x in &seq {
                (h, c) = cell.forward(g, b, g.input(x.clone()), h, c).unwrap();
            }
            g.add(g.mean(g.square(h)), g.mean(c))
        });

        let head = Linear::new("head", 12, 5);
        let ln = LayerNorm::new("norm", 5);
        let mut p = ParamSet::new();
        head.init(&mut p, 1.0, &mut rng);
        ln.init(&mut p);
        jitter(&mut p, &mut rng, 0.1);
        let parts: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &[3, 3])).collect();
        let target = random_tensor(&mut rng, &[3, 5]);
        errs[3] = gradient_error(&p, FD_STEP, |g, b| {
            let v: Vec<_> = parts.iter().map(|t| g.input(t.clone())).collect();
            let out = flare::representation::fuse(g, b, &head, &ln, &v[..2], &v[2..]).unwrap();
            g.mean(g.square(g.sub(out, g.input(target.clone()))))
        });

        let arch = SacArch::new(state_repr(3), 2, &tiny_hyper());
        let mut nets = arch.init::<f64, _>(0.1, &mut rng);
        jitter(&mut nets.actor, &mut rng, 0.1);
        jitter(&mut nets.critic, &mut rng, 0.1);
        let feat = random_tensor(&mut rng, &[4, 3]);
        let noise = normal_noise::<f64, _>(4, 2, &mut rng);
        errs[4] = gradient_error(&nets.actor, FD_STEP, |g, b| {
            let s = arch
                .policy_sample(g, b, g.input(feat.clone()), &noise)
                .unwrap();
            g.add(g.mean(s.log_prob), g.mean(g.square(s.action)))
        });
        let act = random_tensor(&mut rng, &[4, 2]);
        let y = random_tensor(&mut rng, &[4, 1]);
        errs[5] = gradient_error(&nets.critic, FD_STEP, |g, b| {
            let (q1, q2) = arch
                .q_values(g, b, g.input(feat.clone()), g.input(act.clone()))
                .unwrap();
            twin_critic_loss(g, q1, q2, g.input(y.clone()))
        });

        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(if e.is_finite() { e } else { f64::INFINITY });
        }
    }
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|&w| w < FD_TOL), || {
        format!("worst relative error over {GRAD_SEEDS} seeds: {detail}")
    })?;
    Ok(format!(
        "{GRAD_SEEDS} seeds each, worst relative error: {detail}"
    ))
}

fn flow_grads(
    enc: &ConvEncoder,
    p: &ParamSet<f64>,
    frames: &[Tensor<f64>],
    older: Option<&Tensor<f64>>,
    detach: bool,
) -> Vec<f64> {
    let g = Graph::new();
    let z_new = enc
        .forward(&g, Bind::trainable(p), g.input(frames[1].clone()))
        .unwrap();
    let z_old = match older {
        Some(t) => g.input(t.clone()),
        None => enc
            .forward(&g, Bind::trainable(p), g.input(frames[0].clone()))
            .unwrap(),
    };
    let delta = if detach {
        latent_flow(&g, &[z_old, z_new]).unwrap()[0]
    } else {
        g.sub(z_new, z_old)
    };
    let grads = g.backward(g.sum(g.square(delta))).unwrap();
    p.iter()
        .flat_map(|(k, t)| grads.params().value_or_zero(k, t.shape()).data().to_vec())
        .collect()
}

/// Flow gradients equal the frozen-previous-latent oracle and differ from
/// the undetached gradient.
pub fn stop_gradient() -> Check {
    let (mut worst_eq, mut min_margin) = (0.0f64, f64::INFINITY);
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let enc = ConvEncoder::new(
            "enc",
            ConvEncoderConfig {
                height: 10,
                width: 10,
                channels: 1,
                layers: vec![
                    ConvLayerSpec {
                        kernel: 3,
                        stride: 2,
                        filters: 4,
                    },
                    ConvLayerSpec {
                        kernel: 3,
                        stride: 1,
                        filters: 4,
                    },
                ],
                latent_dim: 6,
            },
        )
        .unwrap();
        let mut p = ParamSet::new();
        enc.init(&mut p, &mut rng);
        jitter(&mut p, &mut rng, 0.1);
        let frames: Vec<Tensor<f64>> = (0..2)
            .map(|_| random_tensor(&mut rng, &[1, 10, 10, 1]))
            .collect();
        let g = Graph::new();
        let old = g.tensor(
            enc.forward(&g, Bind::frozen(&p), g.input(frames[0].clone()))
                .unwrap(),
        );
        let detached = flow_grads(&enc, &p, &frames, None, true);
        let oracle = flow_grads(&enc, &p, &frames, Some(&old), false);
        let full = flow_grads(&enc, &p, &frames, None, false);
        let diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        worst_eq = worst_eq.max(diff(&detached, &oracle));
        let rel: Vec<f64> = detached.iter().zip(&full).map(|(a, b)| a - b).collect();
        min_margin = min_margin.min(norm(&rel) / norm(&full));
    }
    let detail = format!("max |detached - frozen oracle| {worst_eq:.1e}, min relative gap to undetached {min_margin:.3}");
    ensure(worst_eq < DETACH_TOL && min_margin > DETACH_MARGIN, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn tiny_sac(seed: u64) -> Sac<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sac = Sac::new(state_repr(3), 2, tiny_hyper(), None, &mut rng).unwrap();
    for set in [
        &mut sac.nets.target_critic,
        &mut sac.nets.critic,
        &mut sac.nets.actor,
    ] {
        jitter(set, &mut rng, 0.3);
    }
    sac.nets.set_log_alpha(rng.gen_range(-3.0..0.0));
    sac
}

fn vectors(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor<f64> {
    random_tensor(rng, &[b, d])
}

fn soft_value_script(sac: &Sac<f64>, next: &[f64], eps: &[f64]) -> f64 {
    let out = relu_mlp(next, &sac.nets.actor, "actor", 2);
    let (a, logp) = squashed_policy(&out, eps, sac.hyper.log_std_min, sac.hyper.log_std_max);
    let x: Vec<f64> = next.iter().chain(&a).copied().collect();
    let q1 = relu_mlp(&x, &sac.nets.target_critic, "critic1", 2)[0];
    let q2 = relu_mlp(&x, &sac.nets.target_critic, "critic2", 2)[0];
    q1.min(q2) - sac.nets.alpha() * logp
}

/// Soft target values, twin critic loss and DQN loss against direct scripts.
pub fn bellman_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut e_target, mut e_critic, mut e_q) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..ORACLE_BATCHES {
        let sac = tiny_sac(seed);
        let b = 5;
        let wrap = |t: Tensor<f64>| WindowBatch { steps: vec![t] };
        let batch = SacBatch {
            obs: wrap(vectors(&mut rng, b, 3)),
            actions: vectors(&mut rng, b, 2),
            rewards: (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            next_obs: wrap(vectors(&mut rng, b, 3)),
            dones: (0..b).map(|i| i % 3 == 0).collect(),
        };
        let noise = normal_noise::<f64, _>(b, 2, &mut rng);
        let values = sac.target_values(&batch.next_obs, &noise).unwrap();
        let g = Graph::new();
        let (loss, _) = sac.critic_loss(&g, &batch, &noise).unwrap();
        let mut want = 0.0;
        for r in 0..b {
            let v = soft_value_script(
                &sac,
                batch.next_obs.steps[0].row_slice(r),
                noise.row_slice(r),
            );
            e_target = e_target.max((values[r] - v).abs());
            let y = batch.rewards[r]
                + if batch.dones[r] {
                    0.0
                } else {
                    sac.hyper.gamma * v
                };
            let x: Vec<f64> = batch.obs.steps[0]
                .row_slice(r)
                .iter()
                .chain(batch.actions.row_slice(r))
                .copied()
                .collect();
            for name in ["critic1", "critic2"] {
                want += (relu_mlp(&x, &sac.nets.critic, name, 2)[0] - y).powi(2) / (2 * b) as f64;
            }
        }
        e_critic = e_critic.max((g.scalar(loss) - want).abs());

        let hyper = DqnHyper {
            hidden_dim: 4,
            hidden_layers: 1,
            batch_size: 6,
            ..DqnHyper::default()
        };
        let mut dqn = Dqn::new(
            state_repr(3),
            3,
            hyper,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        jitter(&mut dqn.nets.target_q, &mut rng, 0.3);
        let db = DqnBatch {
            obs: wrap(vectors(&mut rng, 6, 3)),
            actions: (0..6).map(|_| rng.gen_range(0..3)).collect(),
            rewards: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            next_obs: wrap(vectors(&mut rng, 6, 3)),
            dones: (0..6).map(|i| i % 4 == 1).collect(),
        };
        let g = Graph::new();
        let (loss, _) = dqn.q_loss(&g, &db).unwrap();
        let mut want = 0.0;
        for r in 0..6 {
            let next = relu_mlp(
                db.next_obs.steps[0].row_slice(r),
                &dqn.nets.target_q,
                "q",
                2,
            );
            let best = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let y = db.rewards[r]
                + if db.dones[r] {
                    0.0
                } else {
                    dqn.hyper.gamma * best
                };
            let q = relu_mlp(db.obs.steps[0].row_slice(r), &dqn.nets.q, "q", 2)[db.actions[r]];
            want += (q - y).powi(2) / 6.0;
        }
        e_q = e_q.max((g.scalar(loss) - want).abs());
    }
    let detail = format!(
        "{ORACLE_BATCHES} batches, max abs error: target value {e_target:.1e}, critic loss {e_critic:.1e}, q loss {e_q:.1e}"
    );
    ensure(
        e_target < ORACLE_TOL && e_critic < ORACLE_TOL && e_q < ORACLE_TOL,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn scalar_obs(v: f64) -> Arc<Observation> {
    Arc::new(Observation::PositionOnly(vec![v]))
}

fn filled_buffer(capacity: usize, lengths: &[usize]) -> ReplayBuffer {
    let mut buf = ReplayBuffer::new(capacity);
    for (e, &len) in lengths.iter().enumerate() {
        let mut obs = scalar_obs(100.0 * e as f64);
        for t in 0..len {
            let next = scalar_obs(100.0 * e as f64 + t as f64 + 1.0);
            buf.push(Transition {
                obs,
                action: Action::Discrete(0),
                reward: t as f64,
                next_obs: next.clone(),
                done: t + 1 == len,
                episode: e as u64,
            });
            obs = next;
        }
    }
    buf
}

fn window_values(w: &Window) -> Vec<f64> {
    w.iter().map(|o| o.as_vector().unwrap()[0]).collect()
}

/// Layer norm, EMA convergence, replay and translation invariants.
pub fn building_blocks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut parts = Vec::new();

    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = rng.gen_range(2..40);
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let out = layer_norm(&v, &vec![1.0; d], &vec![0.0; d], 1e-6).unwrap();
        let mean = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    ensure(worst_mean < LN_MEAN_TOL && worst_var < LN_VAR_TOL, || {
        format!("layer norm mean {worst_mean:.1e}, variance error {worst_var:.1e}")
    })?;
    parts.push(format!(
        "layer norm |mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}"
    ));

    let online = tiny_sac(1).nets.critic;
    let start = tiny_sac(2).nets.critic;
    let tau = 0.05;
    let mut t = start.clone();
    let dist = |t: &ParamSet<f64>| {
        let d: Vec<f64> = flat(t)
            .iter()
            .zip(flat(&online))
            .map(|(a, b)| a - b)
            .collect();
        norm(&d)
    };
    let d0 = dist(&t);
    let mut worst_ema = 0.0f64;
    for k in 1..=100 {
        ema_update(&online, &mut t, tau).unwrap();
        worst_ema = worst_ema.max((dist(&t) - d0 * (1.0 - tau).powi(k)).abs() / d0);
    }
    ensure(worst_ema < EMA_TOL, || {
        format!("EMA deviates from geometric decay by {worst_ema:.1e}")
    })?;
    parts.push(format!("EMA geometric deviation {worst_ema:.1e}"));

    let buf = filled_buffer(5, &[6]);
    ensure(
        buf.len() == 5 && buf.get(0).is_none() && buf.get(1).unwrap().reward == 1.0,
        || "replay eviction is not FIFO".into(),
    )?;
    let buf = filled_buffer(50, &[4, 5]);
    ensure(
        window_values(&buf.window(0, 3, false)) == [0.0; 3]
            && window_values(&buf.window(4, 3, false)) == [100.0; 3],
        || "replay windows are not padded with the episode's first frame".into(),
    )?;
    let buf = filled_buffer(1000, &[40; 25]);
    let mut counts = vec![0usize; 1000];
    for _ in 0..100 {
        buf.sample(1000, 2, &mut rng)
            .unwrap()
            .indices
            .iter()
            .for_each(|&i| counts[i as usize] += 1);
    }
    let (chi, crit) = (
        chi_square_uniform(&counts),
        chi_square_critical(1000, CHI_ALPHA),
    );
    ensure(chi < crit, || {
        format!("replay sampling chi-square {chi:.1} >= {crit:.1}")
    })?;
    parts.push(format!(
        "replay FIFO and padding hold, sampling chi-square {chi:.1} < {crit:.1}"
    ));

    let spec = TranslateSpec {
        pad: 0.0,
        ..TranslateSpec::new(100, 108).unwrap()
    };
    let stack = vec![random_frame(&mut rng, 100), random_frame(&mut rng, 100)];
    for _ in 0..20 {
        let (out, (r0, c0)) = random_translate(&stack, &spec, &mut rng).unwrap();
        for (o, f) in out.iter().zip(&stack) {
            ensure(crop(o, (r0, c0), 100) == **f, || {
                "translated content differs".into()
            })?;
            let outside = (0..108 * 108)
                .filter(|i| {
                    !((r0..r0 + 100).contains(&(i / 108)) && (c0..c0 + 100).contains(&(i % 108)))
                })
                .all(|i| o.data[i] == 0.0);
            ensure(outside, || {
                "canvas outside the frame is not the pad value".into()
            })?;
        }
    }
    let mut counts = vec![0usize; 81];
    for _ in 0..10_000 {
        let (_, (r, c)) = random_translate(&[], &spec, &mut rng).unwrap();
        counts[r * 9 + c] += 1;
    }
    let (chi, crit) = (
        chi_square_uniform(&counts),
        chi_square_critical(81, CHI_ALPHA),
    );
    ensure(chi < crit, || {
        format!("translate offsets chi-square {chi:.1} >= {crit:.1}")
    })?;
    parts.push(format!(
        "translate preserves content, offset chi-square {chi:.1} < {crit:.1}"
    ));
    Ok(parts.join("; "))
}

/// Fusion width and positional-offset features.
pub fn dimension_algebra() -> Check {
    let spec = EncoderSpec {
        latent_dim: 64,
        ..EncoderSpec::default()
    };
    let mut dims = Vec::new();
    for n in [2, 3, 5] {
        let repr = Representation::new(
            RepresentationMode::FlarePixel,
            n,
            InputShape::Frame(84),
            &spec,
        )
        .unwrap();
        let got = repr.pre_head_dim().unwrap_or(0);
        ensure(got == 2 * (n - 1) * 64, || {
            format!("n={n}: fused width {got}, expected {}", 2 * (n - 1) * 64)
        })?;
        dims.push(format!("n={n}: {got}"));
    }
    let pos: Vec<Vec<f64>> = [0.0, 1.0, 3.0, 6.0].iter().map(|&v| vec![v]).collect();
    let feats = state_flare_features(&pos).map_err(|e| e.to_string())?;
    ensure(feats == [6.0, 3.0, 2.0, 1.0], || {
        format!("state features {feats:?}")
    })?;
    Ok(format!(
        "fused widths {}; state features {feats:?}",
        dims.join(", ")
    ))
}
