use dynalang_envs::grammar::{unigram_entropy, Corpus, Grammar};
use dynalang_envs::trace::{read_lines, write_line, TraceLine};
use dynalang_envs::{Action, Env, HintMode, HomeGridConfig, HomeGridLite, LangRoom, LangRoomConfig, Vocab};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn utterances_round_trip_through_the_tokenizer() {
    let v = Vocab::default();
    let unk = v.unk().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut texts = 0;
    for episode in 0..1000u64 {
        let hints = [HintMode::Futures, HintMode::Dynamics, HintMode::Corrections][episode as usize % 3];
        let cfg = HomeGridConfig {
            hints,
            correction_prob: 0.5,
            ..Default::default()
        };
        let mut env = HomeGridLite::new(cfg, episode).unwrap();
        env.reset();
        loop {
            let s = env.step(&Action::movement(rng.gen_range(0..10))).unwrap();
            if s.is_last {
                break;
            }
        }
        for h in env.hint_log() {
            let ids = v.tokenize(&h.text);
            assert!(!ids.contains(&unk), "{}", h.text);
            assert_eq!(v.detokenize(&ids), h.text);
            texts += 1;
        }
    }
    assert!(texts > 5000);
}

#[test]
fn corpus_is_deterministic_and_grammatical() {
    let a = Corpus::generate(3, 200, 20);
    let b = Corpus::generate(3, 200, 20);
    assert_eq!(a, b);
    assert_ne!(a, Corpus::generate(4, 200, 20));
    let g = Grammar::default();
    let v = Vocab::default();
    for doc in a.train.iter().chain(&a.heldout) {
        let words: Vec<&str> = doc.split_whitespace().collect();
        assert!(g.is_complete(&words), "{doc}");
        let ids = v.tokenize(doc);
        assert_eq!(v.detokenize(&ids).split_whitespace().count(), words.len() - punct_merges(&words));
    }
    for h in &a.heldout {
        assert!(!a.train.contains(h));
    }
    let text = Corpus::to_text(&a.train);
    assert_eq!(Corpus::parse_text(&text), a.train);
}

/// Punctuation tokens that detokenize onto the previous word.
fn punct_merges(words: &[&str]) -> usize {
    words.iter().filter(|w| matches!(**w, "." | "," | "?")).count()
}

#[test]
fn unigram_entropy_exceeds_the_entropy_rate() {
    let corpus = Corpus::generate(0, 2000, 0);
    let words = corpus.train.iter().flat_map(|d| d.split_whitespace());
    let h1 = unigram_entropy(words);
    let rate = Grammar::default().entropy_rate();
    assert!(rate > 0.1 && h1 > rate + 0.5, "unigram {h1} rate {rate}");
}

#[test]
fn trace_round_trips() {
    let mut env = LangRoom::new(LangRoomConfig::default(), 2).unwrap();
    let mut buf = Vec::new();
    let first = env.reset();
    write_line(&mut buf, &TraceLine { episode: 0, t: 0, action: None, step: first.clone() }).unwrap();
    let mut steps = vec![first];
    for t in 1..20 {
        let a = env.oracle_action();
        let s = env.step(&a).unwrap();
        write_line(&mut buf, &TraceLine { episode: 0, t, action: Some(a), step: s.clone() }).unwrap();
        steps.push(s);
    }
    let lines = read_lines(&buf[..]).unwrap();
    assert_eq!(lines.len(), 20);
    for (l, s) in lines.iter().zip(&steps) {
        assert_eq!(&l.step, s);
    }
    assert!(lines[0].action.is_none() && lines[1].action.is_some());
}

proptest! {
    #[test]
    fn grammar_prefixes_are_valid(seed in 0u64..10_000, cut in 0usize..40) {
        let g = Grammar::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = g.document(&mut rng);
        let words: Vec<&str> = doc.split_whitespace().collect();
        let cut = cut.min(words.len());
        prop_assert!(g.is_valid_prefix(&words[..cut]));
        prop_assert_eq!(g.is_complete(&words[..cut]), cut > 0 && matches!(words[cut - 1], "." | "?"));
    }

    #[test]
    fn tokenizer_round_trips_vocab_sequences(ids in proptest::collection::vec(1usize..55, 1..30)) {
        let v = Vocab::default();
        let ids: Vec<usize> = ids.into_iter().filter(|&i| i < v.len() && Some(i) != v.unk()).collect();
        let text = v.detokenize(&ids);
        prop_assert_eq!(v.tokenize(&text), ids);
    }
}
