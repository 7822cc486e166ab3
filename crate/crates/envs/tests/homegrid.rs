use dynalang_envs::homegrid::{
    BinState, Claim, HomeGridLite, ObjLoc, Target, Task, TaskKind, DOWN, DROP, LEFT, NUM_ACTIONS, PEDAL, RIGHT, UP,
};
use dynalang_envs::{Action, Env, EnvStep, HintMode, HomeGridConfig, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quiet() -> HomeGridConfig {
    HomeGridConfig {
        teleport_prob: 0.0,
        spawn_rate: 0.0,
        ..Default::default()
    }
}

fn act(env: &mut HomeGridLite, a: usize) -> EnvStep {
    env.step(&Action::movement(a)).unwrap()
}

fn done_tag(kind: TaskKind) -> String {
    format!("task_done:{kind:?}").to_lowercase()
}

#[test]
fn expert_solves_every_task_type() {
    let kinds = [TaskKind::Find, TaskKind::Get, TaskKind::Put, TaskKind::Move, TaskKind::Open];
    for kind in kinds {
        let (mut tried, mut solved) = (0, 0);
        for seed in 0..100 {
            let mut env = HomeGridLite::new(HomeGridConfig::default(), seed).unwrap();
            env.reset();
            if !env.force_task(kind) {
                continue;
            }
            tried += 1;
            for _ in 0..100 {
                let a = env.expert_action();
                let s = act(&mut env, a);
                if s.info.events.contains(&done_tag(kind)) {
                    assert_eq!(s.reward, 1.0);
                    solved += 1;
                    break;
                }
                if s.is_last {
                    break;
                }
            }
        }
        assert!(tried >= 50, "{kind:?}: only {tried} episodes could host the task");
        assert!(solved as f64 >= 0.95 * tried as f64, "{kind:?}: {solved}/{tried}");
    }
}

#[test]
fn find_pays_one_and_samples_a_new_task() {
    let mut env = HomeGridLite::new(quiet(), 3).unwrap();
    env.reset();
    assert!(env.force_task(TaskKind::Find));
    let old = env.task();
    let mut total = 0.0;
    for _ in 0..100 {
        let a = env.expert_action();
        let s = act(&mut env, a);
        total += s.reward;
        if s.reward > 0.0 {
            assert_eq!(s.reward, 1.0);
            assert!(s.info.events.contains(&done_tag(TaskKind::Find)));
            break;
        }
    }
    assert_eq!(total, 1.0);
    assert!(!env.task_done(env.task()));
    let _ = old;
}

/// Walks the expert until it faces `bin`, which must be closed.
fn face_bin(env: &mut HomeGridLite, bin: usize) {
    for _ in 0..100 {
        if env.front() == Some(env.bins()[bin].pos) {
            return;
        }
        let a = env.expert_action();
        assert!(a < PEDAL, "expert tried a bin action before facing");
        act(env, a);
    }
    panic!("never reached bin {bin}");
}

fn closed_bin_episode(bin: usize) -> HomeGridLite {
    for seed in 0..200 {
        let mut env = HomeGridLite::new(quiet(), seed).unwrap();
        env.reset();
        if env.bins()[bin].state == BinState::Closed && env.assign_task(Task::Open(bin)) {
            return env;
        }
    }
    panic!("no seed with a closed bin {bin}");
}

#[test]
fn wrong_action_breaks_resettable_bin_for_five_steps() {
    let mut env = closed_bin_episode(0);
    assert!(env.bins()[0].resettable);
    face_bin(&mut env, 0);
    let kind = env.bins()[0].kind;
    let right = PEDAL + env.opens_with(kind);
    let wrong = PEDAL + (env.opens_with(kind) + 1) % 3;
    let s = act(&mut env, wrong);
    assert_eq!(s.reward, 0.0);
    assert!(matches!(env.bins()[0].state, BinState::Broken { .. }));
    for k in 0..5 {
        let s = act(&mut env, right);
        assert_eq!(s.reward, 0.0, "broken bin opened after {k} steps");
        if k < 4 {
            assert!(matches!(env.bins()[0].state, BinState::Broken { .. }), "step {k}");
        }
    }
    assert_eq!(env.bins()[0].state, BinState::Closed);
    let s = act(&mut env, right);
    assert_eq!(env.bins()[0].state, BinState::Open);
    assert_eq!(s.reward, 1.0);
}

#[test]
fn irreversible_bin_stays_broken() {
    let mut env = closed_bin_episode(1);
    assert!(!env.bins()[1].resettable);
    face_bin(&mut env, 1);
    let kind = env.bins()[1].kind;
    let right = PEDAL + env.opens_with(kind);
    let wrong = PEDAL + (env.opens_with(kind) + 2) % 3;
    act(&mut env, wrong);
    for _ in 0..30 {
        let s = act(&mut env, right);
        assert_eq!(s.reward, 0.0);
        assert!(matches!(env.bins()[1].state, BinState::Broken { .. }));
    }
    assert!(!env.task_feasible(Task::Open(1)));
}

#[test]
fn drop_with_empty_inventory_is_a_no_op() {
    let mut env = HomeGridLite::new(quiet(), 4).unwrap();
    env.reset();
    assert_eq!(env.inventory(), None);
    let (agent, facing, objects, bins) = (env.agent(), env.facing(), *env.objects(), env.bins().to_vec());
    let s = act(&mut env, DROP);
    assert_eq!(s.reward, 0.0);
    assert_eq!(env.agent(), agent);
    assert_eq!(env.facing(), facing);
    assert_eq!(*env.objects(), objects);
    assert_eq!(env.bins(), &bins[..]);
}

#[test]
fn inventory_holds_at_most_one_object() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..20 {
        let mut env = HomeGridLite::new(HomeGridConfig::default(), seed).unwrap();
        env.reset();
        loop {
            let s = act(&mut env, rng.gen_range(0..NUM_ACTIONS));
            let held = env.objects().iter().filter(|o| **o == Some(ObjLoc::Held)).count();
            assert_eq!(held, usize::from(env.inventory().is_some()));
            if s.is_last {
                break;
            }
        }
    }
}

#[test]
fn instructions_repeat_every_twenty_steps() {
    let mut env = HomeGridLite::new(quiet(), 5).unwrap();
    env.reset();
    for _ in 0..100 {
        act(&mut env, DROP);
    }
    let times: Vec<usize> = env
        .hint_log()
        .iter()
        .filter(|h| matches!(h.claim, Claim::Instruction(_)))
        .map(|h| h.t)
        .collect();
    assert_eq!(times, vec![0, 20, 40, 60, 80, 100]);
}

/// Tokens streamed from `first` on while idling, cut short if another
/// reward arrives (which would start a new instruction).
fn stream_tokens(env: &mut HomeGridLite, first: &EnvStep, n: usize) -> (Vec<usize>, EnvStep) {
    let mut toks = vec![first.obs.token];
    let mut last = first.clone();
    while toks.len() < n && !last.is_last {
        last = act(env, DROP);
        if last.reward != 0.0 {
            break;
        }
        toks.push(last.obs.token);
    }
    (toks, last)
}

#[test]
fn dynamics_preamble_is_capped_and_holds_the_agent() {
    let v = Vocab::default();
    for cap in [28, 8] {
        let cfg = HomeGridConfig {
            hints: HintMode::Dynamics,
            dynamics_cap: cap,
            ..quiet()
        };
        let mut env = HomeGridLite::new(cfg, 6).unwrap();
        let first = env.reset();
        let preamble: Vec<usize> = env
            .hint_log()
            .iter()
            .filter(|h| matches!(h.claim, Claim::OpensWith { .. }))
            .flat_map(|h| v.tokenize(&h.text))
            .collect();
        let expect_len = preamble.len().min(cap);
        assert!(expect_len <= 28);
        assert_eq!(env.held_steps(), expect_len - 1);
        let agent = env.agent();
        let mut toks = vec![first.obs.token];
        for _ in 1..expect_len {
            let s = act(&mut env, UP);
            assert_eq!(s.info.events, vec!["held".to_string()]);
            toks.push(s.obs.token);
        }
        assert_eq!(env.agent(), agent);
        assert_eq!(env.steps(), 0);
        assert_eq!(toks, preamble[..expect_len]);
        // the instruction follows the preamble
        let task = env.task_text(env.task());
        let s = act(&mut env, DROP);
        assert_eq!(s.obs.token, v.tokenize(&task)[0]);
    }
}

#[test]
fn new_task_interrupts_the_stream() {
    let v = Vocab::default();
    let cfg = HomeGridConfig {
        hints: HintMode::Futures,
        future_prob: 1.0,
        ..Default::default()
    };
    let mut checked = 0;
    for seed in 0..10 {
        let mut env = HomeGridLite::new(cfg.clone(), seed).unwrap();
        env.reset();
        let mut s = act(&mut env, DROP);
        while !s.is_last {
            if s.reward == 1.0 {
                let want = v.tokenize(&env.task_text(env.task()));
                let (got, next) = stream_tokens(&mut env, &s, want.len());
                assert_eq!(got, want[..got.len()]);
                checked += usize::from(got.len() == want.len());
                s = next;
                continue;
            }
            let a = env.expert_action();
            s = act(&mut env, a);
        }
    }
    assert!(checked >= 5, "only {checked} completions");
}

#[test]
fn moving_away_triggers_a_correction() {
    let v = Vocab::default();
    let cfg = HomeGridConfig {
        hints: HintMode::Corrections,
        correction_prob: 1.0,
        ..quiet()
    };
    let mut corrected = 0;
    for seed in 0..20 {
        let mut env = HomeGridLite::new(cfg.clone(), seed).unwrap();
        env.reset();
        if !env.force_task(TaskKind::Find) {
            continue;
        }
        for _ in 0..10 {
            act(&mut env, DROP);
        }
        let d = env.goal_distance().unwrap();
        let away = [UP, DOWN, LEFT, RIGHT].into_iter().find(|&a| {
            let mut probe = env.clone();
            act(&mut probe, a);
            probe.goal_distance().unwrap() > d
        });
        let Some(a) = away else { continue };
        let s = act(&mut env, a);
        assert_eq!(s.obs.token, v.expect_id("no"));
        let last = env.hint_log().last().unwrap();
        assert!(matches!(last.claim, Claim::TurnAround { .. }));
        assert_eq!(last.text, "no, turn around");
        assert!(last.truthful);
        corrected += 1;
    }
    assert!(corrected >= 10);
}

#[test]
fn every_hint_is_true_when_spoken() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [HintMode::Futures, HintMode::Dynamics, HintMode::Corrections] {
        let cfg = HomeGridConfig {
            hints: mode,
            correction_prob: 0.5,
            ..Default::default()
        };
        for seed in 0..30 {
            let mut env = HomeGridLite::new(cfg.clone(), seed).unwrap();
            env.reset();
            let mut promises = Vec::new();
            loop {
                let a = if rng.gen_bool(0.5) { env.expert_action() } else { rng.gen_range(0..NUM_ACTIONS) };
                let s = act(&mut env, a);
                for h in env.hint_log() {
                    if let Claim::WillSpawn { object, room, due } = h.claim {
                        if !promises.contains(&(object, room, due)) {
                            promises.push((object, room, due));
                        }
                    }
                }
                for &(object, room, due) in &promises {
                    if due == env.steps() {
                        let at = env.position(Target::Object(object)).and_then(|p| env.room_of(p));
                        assert_eq!(at, Some(room), "spawn promise broken");
                    }
                }
                if s.is_last {
                    break;
                }
            }
            for h in env.hint_log() {
                assert!(h.truthful, "{mode:?} seed {seed}: {:?}", h);
            }
        }
    }
}

#[test]
fn one_token_per_step_within_vocab() {
    let v = Vocab::default();
    let cfg = HomeGridConfig {
        hints: HintMode::Futures,
        ..Default::default()
    };
    let mut env = HomeGridLite::new(cfg, 7).unwrap();
    assert_eq!(env.obs_space().vocab, v.len());
    let first = env.reset();
    assert!(first.is_first);
    let mut n = 1;
    let mut s = first;
    while !s.is_last {
        assert!(s.obs.token < v.len());
        assert_eq!(s.obs.image.len(), env.obs_space().image_len());
        s = act(&mut env, DROP);
        n += 1;
    }
    assert_eq!(n, 101);
    assert!(env.step(&Action::new(0, 1)).is_err());
    assert!(env.step(&Action::movement(NUM_ACTIONS)).is_err());
}

#[test]
fn pixel_rendering_fills_the_frame() {
    let cfg = HomeGridConfig {
        render: dynalang_envs::ImageKind::Pixels,
        ..Default::default()
    };
    let mut env = HomeGridLite::new(cfg, 8).unwrap();
    let s = env.reset();
    assert_eq!(env.obs_space().image, [3, 64, 64]);
    assert_eq!(s.obs.image.len(), 3 * 64 * 64);
    assert!(s.obs.image.iter().any(|&b| b > 0));
}
