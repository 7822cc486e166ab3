//! Text-only world-model training: token windows with zero images and
//! zero actions, scored by held-out predictive cross entropy.

use std::collections::HashMap;

use rand::Rng;

use dynalang_envs::Vocab;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::worldmodel::SeqBatch;

use super::agent::Agent;
use super::config::PretrainConfig;
use super::metrics::{Metrics, Record};

/// Tokenized corpus: training documents concatenated into one stream with
/// a start marker per document, plus held-out documents kept separate.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCorpus {
    pub stream: Vec<usize>,
    pub starts: Vec<bool>,
    pub heldout: Vec<Vec<usize>>,
    pub vocab: usize,
}

impl TextCorpus {
    pub fn new(train: &[String], heldout: &[String], vocab: &Vocab) -> Result<Self> {
        let mut stream = Vec::new();
        let mut starts = Vec::new();
        for doc in train {
            let ids = vocab.tokenize(doc);
            for (i, id) in ids.into_iter().enumerate() {
                stream.push(id);
                starts.push(i == 0);
            }
        }
        if stream.is_empty() {
            return Err(Error::Usage("empty corpus".into()));
        }
        let heldout: Vec<Vec<usize>> = heldout
            .iter()
            .map(|d| vocab.tokenize(d))
            .filter(|d| !d.is_empty())
            .collect();
        Ok(Self {
            stream,
            starts,
            heldout,
            vocab: vocab.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.stream.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stream.is_empty()
    }

    /// `batch` uniformly placed windows of `length` tokens, time-major.
    pub fn sample(&self, batch: usize, length: usize, rng: &mut impl Rng) -> Result<SeqBatch> {
        if self.stream.len() < length {
            return Err(Error::Usage(format!(
                "corpus has {} tokens, fewer than one window of {length}",
                self.stream.len()
            )));
        }
        let starts: Vec<usize> = (0..batch)
            .map(|_| rng.gen_range(0..=self.stream.len() - length))
            .collect();
        let seqs: Vec<Vec<usize>> = starts.iter().map(|&s| self.stream[s..s + length].to_vec()).collect();
        let firsts: Vec<Vec<bool>> = starts
            .iter()
            .map(|&s| {
                let mut f = self.starts[s..s + length].to_vec();
                // a window begins a fresh latent state either way
                f[0] = true;
                f
            })
            .collect();
        SeqBatch::text(&seqs, &firsts)
    }

    /// Per-token cross entropy (nats) of the held-out documents under an
    /// add-one smoothed unigram model fit on the training stream.
    pub fn unigram_cross_entropy(&self) -> f64 {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &t in &self.stream {
            *counts.entry(t).or_default() += 1;
        }
        let total = (self.stream.len() + self.vocab) as f64;
        let (mut nll, mut n) = (0.0, 0usize);
        for doc in &self.heldout {
            for t in doc {
                let c = counts.get(t).copied().unwrap_or(0) as f64 + 1.0;
                nll -= (c / total).ln();
                n += 1;
            }
        }
        nll / n.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub updates: u64,
    pub heldout_cross_entropy: f64,
    pub unigram_cross_entropy: f64,
}

/// Runs `config.steps` text-only updates and scores the held-out split.
pub fn pretrain_loop<T: Scalar>(
    agent: &mut Agent<T>,
    corpus: &TextCorpus,
    config: &PretrainConfig,
    metrics: &mut Metrics,
    rng: &mut impl Rng,
) -> Result<PretrainReport> {
    if corpus.vocab > agent.wm.obs.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} tokens but the model observes {}",
            corpus.vocab, agent.wm.obs.vocab
        )));
    }
    if corpus.heldout.is_empty() {
        return Err(Error::Usage("held-out split is empty".into()));
    }
    for _ in 0..config.steps {
        let batch = corpus.sample(config.batch_size, config.batch_length, rng)?;
        let (loss, grad_norm) = agent.pretrain_step(&batch, rng)?;
        metrics.push(Record::Pretrain {
            update: agent.updates(),
            loss,
            grad_norm,
        })?;
    }
    let ce = agent
        .wm
        .predictive_cross_entropy(&agent.wm_store, &corpus.heldout, config.eval_samples, rng)?;
    let report = PretrainReport {
        updates: agent.updates(),
        heldout_cross_entropy: ce,
        unigram_cross_entropy: corpus.unigram_cross_entropy(),
    };
    metrics.push(Record::PretrainEval {
        update: report.updates,
        heldout_cross_entropy: report.heldout_cross_entropy,
        unigram_cross_entropy: report.unigram_cross_entropy,
    })?;
    metrics.flush()?;
    Ok(report)
}
