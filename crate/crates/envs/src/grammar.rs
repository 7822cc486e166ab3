//! Synthetic text corpus from a small probabilistic grammar over the
//! environment vocabulary, with a membership checker.
//!
//! A document is a run of 3 to 8 sentences; every sentence ends in `.` or
//! `?`. The language is finite, so exact sentence probabilities (and the
//! grammar's entropy rate) can be enumerated.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAMMAR: &str = "
S      = 2 : what color is the LOBJ ?
       | 2 : it is COLOR .
       | 2 : the LOBJ is COLOR .
       | 2 : the THING is in the ROOM .
       | 1 : i moved the HOBJ to the ROOM .
       | 1 : there will be HOBJ in the ROOM later .
       | 1 : ACT to open the BIN .
       | 2 : TASK .
       | 1 : no , turn around .
TASK   = find the THING | get the HOBJ | put the HOBJ in the BIN | move the HOBJ to the ROOM | open the BIN
THING  = HOBJ | BIN
BIN    = BKIND bin
LOBJ   = ball | block | key | box
COLOR  = red | green | blue | yellow
HOBJ   = bottle | fruit | papers | plates
BKIND  = recycling | trash | compost
ROOM   = living room | dining room | kitchen
ACT    = pedal | grasp | lift
";

pub const MIN_SENTENCES: usize = 3;
pub const MAX_SENTENCES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
enum Sym {
    Word(String),
    Rule(String),
}

#[derive(Clone, Debug)]
struct Alt {
    weight: f64,
    syms: Vec<Sym>,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    rules: HashMap<String, Vec<Alt>>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::parse(GRAMMAR)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    /// Matched completely, ending before this index.
    End(usize),
    /// Input ran out part-way through.
    Prefix,
}

impl Grammar {
    fn parse(text: &str) -> Self {
        let mut rules: HashMap<String, Vec<Alt>> = HashMap::new();
        let mut current = String::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let body = if let Some(rest) = line.strip_prefix('|') {
                rest
            } else {
                let (name, rest) = line.split_once('=').expect("rule line");
                current = name.trim().to_string();
                rest
            };
            for alt in body.split('|') {
                let (weight, words) = match alt.split_once(':') {
                    Some((w, rest)) => (w.trim().parse().expect("weight"), rest),
                    None => (1.0, alt),
                };
                let syms = words
                    .split_whitespace()
                    .map(|w| {
                        if w.chars().all(|c| c.is_ascii_uppercase()) {
                            Sym::Rule(w.to_string())
                        } else {
                            Sym::Word(w.to_string())
                        }
                    })
                    .collect();
                rules.entry(current.clone()).or_default().push(Alt { weight, syms });
            }
        }
        Self { rules }
    }

    /// Every word the grammar can produce.
    pub fn terminals(&self) -> HashSet<String> {
        self.rules
            .values()
            .flatten()
            .flat_map(|a| &a.syms)
            .filter_map(|s| match s {
                Sym::Word(w) => Some(w.clone()),
                Sym::Rule(_) => None,
            })
            .collect()
    }

    fn expand(&self, sym: &Sym, rng: &mut impl Rng, out: &mut Vec<String>) {
        match sym {
            Sym::Word(w) => out.push(w.clone()),
            Sym::Rule(r) => {
                let alts = &self.rules[r];
                let total: f64 = alts.iter().map(|a| a.weight).sum();
                let mut u = rng.gen::<f64>() * total;
                let alt = alts
                    .iter()
                    .find(|a| {
                        u -= a.weight;
                        u < 0.0
                    })
                    .unwrap_or_else(|| alts.last().expect("nonempty rule"));
                for s in &alt.syms {
                    self.expand(s, rng, out);
                }
            }
        }
    }

    pub fn sentence(&self, rng: &mut impl Rng) -> Vec<String> {
        let mut out = Vec::new();
        self.expand(&Sym::Rule("S".into()), rng, &mut out);
        out
    }

    pub fn document(&self, rng: &mut impl Rng) -> String {
        let n = rng.gen_range(MIN_SENTENCES..=MAX_SENTENCES);
        (0..n)
            .map(|_| self.sentence(rng).join(" "))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn match_sym(&self, sym: &Sym, toks: &[&str], pos: usize, out: &mut Vec<Outcome>) {
        if pos >= toks.len() {
            out.push(Outcome::Prefix);
            return;
        }
        match sym {
            Sym::Word(w) => {
                if toks[pos] == w {
                    out.push(Outcome::End(pos + 1));
                }
            }
            Sym::Rule(r) => {
                for alt in &self.rules[r] {
                    self.match_seq(&alt.syms, toks, pos, out);
                }
            }
        }
    }

    fn match_seq(&self, syms: &[Sym], toks: &[&str], pos: usize, out: &mut Vec<Outcome>) {
        let Some((first, rest)) = syms.split_first() else {
            out.push(Outcome::End(pos));
            return;
        };
        let mut heads = Vec::new();
        self.match_sym(first, toks, pos, &mut heads);
        for h in heads {
            match h {
                Outcome::Prefix => out.push(Outcome::Prefix),
                Outcome::End(p) if rest.is_empty() => out.push(Outcome::End(p)),
                Outcome::End(p) if p >= toks.len() => out.push(Outcome::Prefix),
                Outcome::End(p) => self.match_seq(rest, toks, p, out),
            }
        }
    }

    fn scan(&self, words: &[&str]) -> (bool, bool) {
        // sentences end in a terminator, so segmentation is unique
        let mut pos = 0;
        while pos < words.len() {
            let mut outs = Vec::new();
            self.match_sym(&Sym::Rule("S".into()), words, pos, &mut outs);
            let ends: Vec<usize> = outs
                .iter()
                .filter_map(|o| match o {
                    Outcome::End(p) => Some(*p),
                    Outcome::Prefix => None,
                })
                .collect();
            match ends.iter().min() {
                Some(&p) => pos = p,
                None => return (false, outs.contains(&Outcome::Prefix)),
            }
        }
        (true, true)
    }

    /// True iff `words` is a sequence of complete sentences.
    pub fn is_complete(&self, words: &[&str]) -> bool {
        !words.is_empty() && self.scan(words).0
    }

    /// True iff `words` can be extended to a sequence of sentences.
    pub fn is_valid_prefix(&self, words: &[&str]) -> bool {
        self.scan(words).1
    }

    /// Every sentence with its probability.
    pub fn enumerate(&self) -> Vec<(Vec<String>, f64)> {
        self.enumerate_sym(&Sym::Rule("S".into()))
    }

    fn enumerate_sym(&self, sym: &Sym) -> Vec<(Vec<String>, f64)> {
        match sym {
            Sym::Word(w) => vec![(vec![w.clone()], 1.0)],
            Sym::Rule(r) => {
                let alts = &self.rules[r];
                let total: f64 = alts.iter().map(|a| a.weight).sum();
                let mut out = Vec::new();
                for alt in alts {
                    let mut partial = vec![(Vec::new(), alt.weight / total)];
                    for s in &alt.syms {
                        let tails = self.enumerate_sym(s);
                        partial = partial
                            .into_iter()
                            .flat_map(|(words, p)| {
                                tails.iter().map(move |(t, q)| {
                                    let mut w = words.clone();
                                    w.extend(t.iter().cloned());
                                    (w, p * q)
                                })
                            })
                            .collect();
                    }
                    out.extend(partial);
                }
                out
            }
        }
    }

    /// Entropy per token (nats) of the sentence stream: sentence entropy
    /// divided by expected sentence length.
    pub fn entropy_rate(&self) -> f64 {
        let sentences = self.enumerate();
        let h: f64 = sentences.iter().map(|(_, p)| -p * p.ln()).sum();
        let len: f64 = sentences.iter().map(|(w, p)| p * w.len() as f64).sum();
        h / len
    }
}

/// Train and held-out documents; no held-out document occurs in train.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

impl Corpus {
    pub fn generate(seed: u64, documents: usize, heldout: usize) -> Self {
        let grammar = Grammar::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train: Vec<String> = (0..documents).map(|_| grammar.document(&mut rng)).collect();
        let seen: HashSet<&String> = train.iter().collect();
        let mut held = Vec::with_capacity(heldout);
        while held.len() < heldout {
            let d = grammar.document(&mut rng);
            if !seen.contains(&d) {
                held.push(d);
            }
        }
        Self { train, heldout: held }
    }

    /// One document per line.
    pub fn to_text(docs: &[String]) -> String {
        let mut s = docs.join("\n");
        s.push('\n');
        s
    }

    pub fn parse_text(text: &str) -> Vec<String> {
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    }
}

/// Entropy (nats) of the empirical unigram distribution of `tokens`.
pub fn unigram_entropy<'a>(tokens: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n = 0usize;
    for t in tokens {
        *counts.entry(t).or_default() += 1;
        n += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}
