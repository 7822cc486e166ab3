use dynalang_envs::langroom::{self, LangRoom, LangRoomConfig, Phase};
use dynalang_envs::{Action, Env, Vocab, PAD};

fn env(seed: u64) -> LangRoom {
    LangRoom::new(LangRoomConfig::default(), seed).unwrap()
}

/// Steps with silence until the next emitted token is the answer.
fn advance_to_answer(env: &mut LangRoom) {
    while !env.answer_is_next() {
        env.step(&Action::default()).unwrap();
    }
}

#[test]
fn correct_answer_pays_one() {
    let mut e = env(0);
    e.reset();
    advance_to_answer(&mut e);
    let s = e.step(&Action::new(langroom::STAY, e.answer_token())).unwrap();
    assert_eq!(s.reward, 1.0);
    assert!(s.info.events.contains(&"answer_correct".to_string()));
}

#[test]
fn wrong_color_costs_a_tenth() {
    let mut e = env(1);
    e.reset();
    advance_to_answer(&mut e);
    let wrong = e
        .color_tokens()
        .into_iter()
        .find(|&c| c != e.answer_token())
        .unwrap();
    let s = e.step(&Action::new(langroom::STAY, wrong)).unwrap();
    assert_eq!(s.reward, -0.1);
}

#[test]
fn speaking_off_step_costs_a_hundredth() {
    let mut e = env(2);
    e.reset();
    // first step after reset is inside the question
    assert_eq!(e.phase(), Phase::Question);
    let color = e.color_tokens()[0];
    assert_eq!(e.step(&Action::new(langroom::STAY, color)).unwrap().reward, -0.01);
    while e.phase() != Phase::Silence {
        e.step(&Action::default()).unwrap();
    }
    assert_eq!(e.step(&Action::new(langroom::STAY, color)).unwrap().reward, -0.01);
    let it = Vocab::default().id("it").unwrap();
    assert_eq!(e.step(&Action::new(langroom::STAY, it)).unwrap().reward, -0.01);
}

#[test]
fn silent_agent_earns_zero() {
    let mut e = env(3);
    e.reset();
    let mut total = 0.0;
    let mut steps = 0;
    loop {
        let s = e.step(&Action::movement(steps % 5)).unwrap();
        total += s.reward;
        steps += 1;
        if s.is_last {
            assert!(!s.cont);
            break;
        }
        assert!(s.cont);
    }
    assert_eq!(steps, 200);
    assert_eq!(total, 0.0);
}

#[test]
fn oracle_earns_one_per_round() {
    for seed in 0..10 {
        let mut e = env(seed);
        e.reset();
        let (mut total, mut rounds) = (0.0, 0);
        loop {
            let a = e.oracle_action();
            let s = e.step(&a).unwrap();
            total += s.reward;
            if s.info.events.iter().any(|t| t.starts_with("answer")) {
                assert_eq!(s.info.events, vec!["answer_correct".to_string()]);
                rounds += 1;
            }
            if s.is_last {
                break;
            }
        }
        assert!(rounds >= 10);
        assert!((total - rounds as f64).abs() < 1e-9, "{total} vs {rounds}");
    }
}

#[test]
fn oracle_echoing_it_is_pays_the_speech_penalty() {
    let v = Vocab::default();
    let (it, is) = (v.id("it").unwrap(), v.id("is").unwrap());
    let mut e = env(5);
    e.reset();
    let mut per_round = Vec::new();
    let mut acc = 0.0;
    let mut echoed = Vec::new();
    loop {
        let mut a = e.oracle_action();
        // say "it is" on the two steps before the answer, aligned with the env
        let before_answer = e.phase() == Phase::Answer && !e.answer_is_next();
        if before_answer {
            a.token = if echoed.is_empty() { it } else { is };
            echoed.push(a.token);
        }
        let s = e.step(&a).unwrap();
        acc += s.reward;
        if s.info.events.iter().any(|t| t.starts_with("answer")) {
            per_round.push((acc, echoed.len()));
            acc = 0.0;
            echoed.clear();
        }
        if s.is_last {
            break;
        }
    }
    for (r, extra) in per_round {
        assert!((r - (1.0 - 0.01 * extra as f64)).abs() < 1e-9, "{r} with {extra} extra tokens");
    }
}

#[test]
fn colors_rerandomize_between_rounds() {
    let mut e = env(7);
    e.reset();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..200 {
        seen.insert(e.colors());
        if e.step(&Action::default()).unwrap().is_last {
            break;
        }
    }
    assert!(seen.len() > 5);
}

#[test]
fn exactly_one_token_per_step_and_invalid_tokens_rejected() {
    let mut e = env(8);
    let first = e.reset();
    assert!(first.is_first);
    assert!(first.obs.token < 15);
    for _ in 0..50 {
        let s = e.step(&Action::default()).unwrap();
        assert!(s.obs.token < 15);
        assert!(!s.is_first);
    }
    assert!(e.step(&Action::new(0, 15)).is_err());
    assert!(e.step(&Action::new(5, PAD)).is_err());
}

#[test]
fn padded_vocabulary_accepts_dummy_tokens() {
    let cfg = LangRoomConfig {
        vocab_size: 10_000,
        ..Default::default()
    };
    let mut e = LangRoom::new(cfg, 0).unwrap();
    assert_eq!(e.action_space().tokens, 10_000);
    assert_eq!(e.obs_space().vocab, 10_000);
    e.reset();
    // a dummy token is speech like any other
    assert_eq!(e.step(&Action::new(0, 9_999)).unwrap().reward, -0.01);
}
