use dynalang::codecs::LatentMode;
use dynalang::diff::{grad_check, Adam, AdamConfig, GradCheckOptions, Graph, ParamStore, Tensor};
use dynalang::worldmodel::{prefix, ActionInput, KlSides, LossMode, SeqBatch, WorldModel, WorldModelConfig};
use dynalang_envs::{ActionSpace, ImageKind, ObsSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 12;

fn spaces() -> (ObsSpace, ActionSpace) {
    (
        ObsSpace {
            image: [3, 3, 3],
            kind: ImageKind::Symbols,
            vocab: VOCAB,
        },
        ActionSpace {
            moves: 4,
            tokens: VOCAB,
        },
    )
}

fn model(seed: u64, config: WorldModelConfig) -> (WorldModel, ParamStore<f64>) {
    let (obs, act) = spaces();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wm = WorldModel::new(config, obs, act, &mut store, &mut rng).unwrap();
    (wm, store)
}

fn random_batch(seed: u64, batch: usize, length: usize) -> SeqBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = batch * length;
    let mut is_first = vec![false; rows];
    is_first[..batch].iter_mut().for_each(|f| *f = true);
    SeqBatch {
        batch,
        length,
        images: (0..rows * 27).map(|_| rng.gen_range(0..2)).collect(),
        tokens: (0..rows).map(|_| rng.gen_range(0..VOCAB)).collect(),
        moves: (0..rows).map(|_| rng.gen_range(0..4)).collect(),
        act_tokens: (0..rows).map(|_| rng.gen_range(0..VOCAB)).collect(),
        rewards: (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        conts: (0..rows).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect(),
        is_first,
    }
}

/// KL sides at the current parameters; finite differences hold them fixed
/// as the stop-gradients do.
fn frozen_sides(wm: &WorldModel, store: &ParamStore<f64>, batch: &SeqBatch) -> KlSides<f64> {
    let mut g = Graph::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    wm.compute_losses(&mut g, store, batch, LossMode::Full, LatentMode::Probs, &mut rng)
        .unwrap()
        .kl_sides
}

#[test]
fn total_is_the_sum_of_terms_and_floors_hold() {
    let (wm, store) = model(0, WorldModelConfig::tiny());
    let batch = random_batch(1, 3, 5);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = wm
        .compute_losses(&mut g, &store, &batch, LossMode::Full, LatentMode::Sample, &mut rng)
        .unwrap();
    let b = out.breakdown;
    let sum = b.image + b.token + b.reward + b.cont + b.reg + b.pred;
    assert!((b.total - sum).abs() < 1e-9);
    assert!(b.reg / 0.1 >= 1.0 - 1e-12 && b.pred / 0.5 >= 1.0 - 1e-12);
    assert_eq!(out.posterior.h.shape(), &[15, 16]);
    assert_eq!(out.posterior.z.shape(), &[15, 16]);
    for r in 0..15 {
        let ones = out.posterior.z.row(r).iter().filter(|&&x| x == 1.0).count();
        assert_eq!(ones, 4);
    }
}

#[test]
fn every_head_matches_finite_differences() {
    let (wm, mut store) = model(3, WorldModelConfig::tiny());
    let batch = random_batch(4, 2, 3);
    let frozen = frozen_sides(&wm, &store, &batch);
    let opts = GradCheckOptions::new(1e-4);
    let report = grad_check(&mut store, &opts, |s, g| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Ok(wm
            .compute_losses_frozen(g, s, &batch, LossMode::Full, LatentMode::Probs, &mut rng, &frozen)?
            .total)
    })
    .unwrap();
    for b in &report.blocks {
        assert!(b.max_rel_err < 1e-4, "{}: {}", b.name, b.max_rel_err);
    }
    assert!(report.passed());
}

#[test]
fn kl_terms_stop_gradients_on_the_right_side() {
    // one step, so the posterior reaches L_pred only through z_t itself
    let cfg = WorldModelConfig {
        beta_reg: 50.0,
        beta_pred: 50.0,
        ..WorldModelConfig::tiny()
    };
    let (wm, store) = model(6, cfg);
    let batch = random_batch(7, 4, 1);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let out = wm
        .compute_losses(&mut g, &store, &batch, LossMode::Full, LatentMode::Sample, &mut rng)
        .unwrap();
    let [.., reg, pred] = out.terms;

    let grads = g.backward(reg).unwrap();
    let mut post_nonzero = false;
    for id in store.ids() {
        let name = store.name(id);
        let norm = grads.param(id).map_or(0.0, |t| t.sq_norm());
        if name.starts_with(prefix::PRIOR) {
            assert_eq!(norm, 0.0, "L_reg reached {name}");
        }
        post_nonzero |= name.starts_with(prefix::POSTERIOR) && norm > 0.0;
    }
    // the floor must not hide the gradient for this check to mean anything
    assert!(post_nonzero || out.breakdown.reg / 50.0 <= 1.0);

    let grads = g.backward(pred).unwrap();
    let mut prior_nonzero = false;
    for id in store.ids() {
        let name = store.name(id);
        let norm = grads.param(id).map_or(0.0, |t| t.sq_norm());
        if name.starts_with(prefix::POSTERIOR) || name.starts_with(prefix::ENCODER) {
            assert_eq!(norm, 0.0, "L_pred reached {name}");
        }
        prior_nonzero |= name.starts_with(prefix::PRIOR) && norm > 0.0;
    }
    assert!(prior_nonzero || out.breakdown.pred / 50.0 <= 1.0);
}

#[test]
fn kl_gradients_check_on_both_sides() {
    // L_reg and L_pred alone, with the floor out of the way
    let cfg = WorldModelConfig {
        beta_reg: 1.0,
        beta_pred: 1.0,
        image_scale: 0.0,
        token_scale: 0.0,
        reward_scale: 0.0,
        cont_scale: 0.0,
        ..WorldModelConfig::tiny()
    };
    let (wm, mut store) = model(9, cfg);
    // sharpen the posterior so the KL clears one nat
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with("post/out") {
            let v = store.value_mut(id);
            v.data_mut().iter_mut().for_each(|x| *x *= 40.0);
        }
    }
    let batch = random_batch(10, 2, 3);
    let frozen = frozen_sides(&wm, &store, &batch);
    for term in [4usize, 5] {
        let report = grad_check(&mut store, &GradCheckOptions::new(1e-4), |s, g| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let out = wm.compute_losses_frozen(g, s, &batch, LossMode::Full, LatentMode::Probs, &mut rng, &frozen)?;
            assert!(out.breakdown.values()[term] > 1.0, "KL under the floor");
            Ok(out.terms[term])
        })
        .unwrap();
        for b in &report.blocks {
            assert!(b.max_rel_err < 1e-4, "term {term} {}: {}", b.name, b.max_rel_err);
        }
    }
}

#[test]
fn gradient_reaches_back_sixteen_steps() {
    let (wm, store) = model(12, WorldModelConfig::tiny());
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h0 = g.input(Tensor::zeros(&[1, 16]));
    let z0 = g.input(Tensor::full(&[1, 16], 0.25));
    let (mut h, mut z) = (h0, z0);
    let image = g.constant(Tensor::zeros(&[1, 27]));
    for t in 0..17 {
        let a = ActionInput::new(&[t % 4], &[t % VOCAB]);
        let (h1, _) = wm.sequence_step(&mut g, &store, z, h, &a).unwrap();
        let logits = wm.encode(&mut g, &store, h1, image, &[t % VOCAB]).unwrap();
        z = wm.sample_code(&mut g, logits, LatentMode::Sample, &mut rng).unwrap();
        h = h1;
    }
    let [_, tok, _, _] = wm.decode(&mut g, &store, h, z).unwrap();
    let loss = g.sum(tok);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(h0).unwrap().sq_norm() > 0.0);
    assert!(grads.wrt(z0).unwrap().sq_norm() > 0.0);
    assert!(g.value(h).data().iter().all(|x| x.abs() < 1.0));
}

#[test]
fn text_mode_zeroes_image_reward_and_continue() {
    let (wm, store) = model(14, WorldModelConfig::tiny());
    let seqs = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
    let first = vec![vec![true, false, false, false], vec![true, false, true, false]];
    let batch = SeqBatch::text(&seqs, &first).unwrap();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let out = wm
        .compute_losses(&mut g, &store, &batch, LossMode::TextPretrain, LatentMode::Sample, &mut rng)
        .unwrap();
    let b = out.breakdown;
    assert_eq!((b.image, b.reward, b.cont), (0.0, 0.0, 0.0));
    assert!(b.token > 0.0);
    let grads = g.backward(out.total).unwrap();
    for id in store.ids() {
        let name = store.name(id);
        if name.starts_with(prefix::IMAGE_HEAD) || name.starts_with(prefix::REWARD_HEAD) || name.starts_with(prefix::CONT_HEAD) {
            assert_eq!(grads.param(id).map_or(0.0, |t| t.sq_norm()), 0.0, "{name}");
        }
    }
}

#[test]
fn tokens_change_the_posterior() {
    let (wm, store) = model(16, WorldModelConfig::tiny());
    let mut g = Graph::no_grad();
    let h = g.constant(Tensor::zeros(&[1, 16]));
    let img = g.constant(Tensor::zeros(&[1, 27]));
    let a = wm.encode(&mut g, &store, h, img, &[0]).unwrap();
    let b = wm.encode(&mut g, &store, h, img, &[3]).unwrap();
    let d: f64 = g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(d > 0.0);
    assert!(wm.encode(&mut g, &store, h, img, &[VOCAB]).is_err());
}

#[test]
fn losses_are_deterministic_under_a_seed() {
    let (wm, store) = model(17, WorldModelConfig::tiny());
    let batch = random_batch(18, 2, 4);
    let run = || {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        wm.compute_losses(&mut g, &store, &batch, LossMode::Full, LatentMode::Sample, &mut rng)
            .unwrap()
            .breakdown
    };
    assert_eq!(run(), run());
}

#[test]
fn short_overfit_reduces_token_loss() {
    let (wm, mut store) = model(20, WorldModelConfig::tiny());
    let batch = random_batch(21, 1, 8);
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
    ).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let mut g = Graph::new();
        let out = wm
            .compute_losses(&mut g, &store, &batch, LossMode::Full, LatentMode::Sample, &mut rng)
            .unwrap();
        first.get_or_insert(out.breakdown.token);
        last = out.breakdown.token;
        let grads = g.backward(out.total).unwrap();
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(&mut store).unwrap();
    }
    assert!(last < first.unwrap(), "{last} vs {first:?}");
}

#[test]
fn imagination_and_generation_are_reproducible() {
    let (wm, store) = model(23, WorldModelConfig::tiny());
    let roll = || {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut g = Graph::no_grad();
        let mut h = g.constant(Tensor::zeros(&[2, 16]));
        let mut z = g.constant(Tensor::zeros(&[2, 16]));
        let mut rewards = Vec::new();
        for t in 0..15 {
            let a = ActionInput::new(&[t % 4, 1], &[0, t % VOCAB]);
            let (h1, z1, out) = wm.imagine_step(&mut g, &store, h, z, &a, LatentMode::Sample, &mut rng).unwrap();
            assert!(out.cont.iter().all(|&c| c > 0.0 && c < 1.0));
            assert!(out.reward.iter().all(|r| r.is_finite()));
            rewards.extend(out.reward);
            (h, z) = (h1, z1);
        }
        rewards
    };
    let a = roll();
    assert_eq!(a.len(), 30);
    assert_eq!(a, roll());

    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let g1 = wm.generate(&store, &[1, 2], 10, 0.0, &mut r1).unwrap();
    let g2 = wm.generate(&store, &[1, 2], 10, 0.0, &mut r2).unwrap();
    assert_eq!(g1, g2);
    assert!(g1.iter().all(|&t| t < VOCAB));
    assert!(wm.generate(&store, &[], 0, 1.0, &mut r1).unwrap().is_empty());
    assert_eq!(wm.generate(&store, &[], 5, 1.0, &mut r1).unwrap().len(), 5);
}

#[test]
fn bad_batches_are_rejected() {
    let (wm, store) = model(25, WorldModelConfig::tiny());
    let mut batch = random_batch(26, 2, 2);
    batch.tokens[0] = VOCAB;
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(wm.compute_losses(&mut g, &store, &batch, LossMode::Full, LatentMode::Sample, &mut rng).is_err());
    let mut batch = random_batch(26, 2, 2);
    batch.images.pop();
    assert!(wm.compute_losses(&mut g, &store, &batch, LossMode::Full, LatentMode::Sample, &mut rng).is_err());
}

#[test]
fn pixel_model_builds_and_runs() {
    let obs = ObsSpace {
        image: [3, 64, 64],
        kind: ImageKind::Pixels,
        vocab: VOCAB,
    };
    let act = ActionSpace { moves: 4, tokens: 0 };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wm = WorldModel::new(WorldModelConfig::tiny(), obs, act, &mut store, &mut rng).unwrap();
    let mut batch = random_batch(1, 1, 2);
    batch.images = (0..2 * 3 * 64 * 64).map(|i| (i % 256) as u8).collect();
    let mut g = Graph::new();
    let out = wm
        .compute_losses(&mut g, &store, &batch, LossMode::Full, LatentMode::Sample, &mut rng)
        .unwrap();
    assert!(out.breakdown.image.is_finite() && out.breakdown.image > 0.0);
    g.backward(out.total).unwrap();
}
