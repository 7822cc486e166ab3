//! Sequence replay.
//!
//! Each environment instance writes its own ring, so a stored stream is
//! always contiguous in time and episode boundaries inside a segment carry
//! an `is_first` marker. Segments are drawn uniformly over every eligible
//! `(stream, start)` pair.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::worldmodel::SeqBatch;

/// One environment step with the action taken after observing it.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub image: Vec<u8>,
    pub token: usize,
    pub reward: f64,
    pub cont: bool,
    pub is_first: bool,
    pub movement: usize,
    pub act_token: usize,
    pub episode: u64,
    pub step: u32,
}

#[derive(Clone, Debug, PartialEq)]
struct Ring {
    cap: usize,
    image_len: usize,
    /// Index of the oldest element once full.
    head: usize,
    len: usize,
    images: Vec<u8>,
    tokens: Vec<u32>,
    rewards: Vec<f32>,
    flags: Vec<u8>,
    moves: Vec<u32>,
    act_tokens: Vec<u32>,
    episodes: Vec<u64>,
    steps: Vec<u32>,
}

const CONT: u8 = 1;
const FIRST: u8 = 2;

impl Ring {
    fn new(cap: usize, image_len: usize) -> Self {
        Self {
            cap,
            image_len,
            head: 0,
            len: 0,
            images: Vec::new(),
            tokens: Vec::new(),
            rewards: Vec::new(),
            flags: Vec::new(),
            moves: Vec::new(),
            act_tokens: Vec::new(),
            episodes: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn slot(&self, i: usize) -> usize {
        (self.head + i) % self.cap
    }

    fn push(&mut self, t: &Transition) {
        let flags = (t.cont as u8) * CONT | (t.is_first as u8) * FIRST;
        if self.len < self.cap {
            self.images.extend_from_slice(&t.image);
            self.tokens.push(t.token as u32);
            self.rewards.push(t.reward as f32);
            self.flags.push(flags);
            self.moves.push(t.movement as u32);
            self.act_tokens.push(t.act_token as u32);
            self.episodes.push(t.episode);
            self.steps.push(t.step);
            self.len += 1;
        } else {
            let s = self.head;
            self.images[s * self.image_len..(s + 1) * self.image_len].copy_from_slice(&t.image);
            self.tokens[s] = t.token as u32;
            self.rewards[s] = t.reward as f32;
            self.flags[s] = flags;
            self.moves[s] = t.movement as u32;
            self.act_tokens[s] = t.act_token as u32;
            self.episodes[s] = t.episode;
            self.steps[s] = t.step;
            self.head = (self.head + 1) % self.cap;
        }
    }

    fn get(&self, i: usize) -> Transition {
        let s = self.slot(i);
        Transition {
            image: self.images[s * self.image_len..(s + 1) * self.image_len].to_vec(),
            token: self.tokens[s] as usize,
            reward: self.rewards[s] as f64,
            cont: self.flags[s] & CONT != 0,
            is_first: self.flags[s] & FIRST != 0,
            movement: self.moves[s] as usize,
            act_token: self.act_tokens[s] as usize,
            episode: self.episodes[s],
            step: self.steps[s],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    rings: Vec<Ring>,
    image_len: usize,
    inserted: u64,
}

impl ReplayBuffer {
    /// `capacity` transitions split evenly over `streams` environments.
    pub fn new(capacity: usize, streams: usize, image_len: usize) -> Result<Self> {
        if streams == 0 || capacity < streams {
            return Err(Error::Config(format!("replay capacity {capacity} too small for {streams} streams")));
        }
        let per = capacity / streams;
        Ok(Self {
            rings: (0..streams).map(|_| Ring::new(per, image_len)).collect(),
            image_len,
            inserted: 0,
        })
    }

    pub fn streams(&self) -> usize {
        self.rings.len()
    }

    pub fn len(&self) -> usize {
        self.rings.iter().map(|r| r.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.rings.iter().map(|r| r.cap).sum()
    }

    /// Transitions inserted since creation, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn stream_len(&self, stream: usize) -> usize {
        self.rings[stream].len
    }

    pub fn push(&mut self, stream: usize, t: &Transition) -> Result<()> {
        if t.image.len() != self.image_len {
            return Err(Error::shape("replay_push", format!("{} image bytes, expected {}", t.image.len(), self.image_len)));
        }
        let ring = self
            .rings
            .get_mut(stream)
            .ok_or_else(|| Error::Usage(format!("replay stream {stream} does not exist")))?;
        ring.push(t);
        self.inserted += 1;
        Ok(())
    }

    /// The `i`-th oldest transition of a stream.
    pub fn get(&self, stream: usize, i: usize) -> Transition {
        self.rings[stream].get(i)
    }

    /// Number of distinct segment starts of the given length.
    pub fn eligible(&self, length: usize) -> usize {
        self.rings.iter().map(|r| (r.len + 1).saturating_sub(length)).sum()
    }

    /// Maps a uniform index over eligible starts to `(stream, start)`.
    pub fn locate(&self, mut index: usize, length: usize) -> (usize, usize) {
        for (s, r) in self.rings.iter().enumerate() {
            let n = (r.len + 1).saturating_sub(length);
            if index < n {
                return (s, index);
            }
            index -= n;
        }
        panic!("segment index out of range");
    }

    /// Uniform segment start.
    pub fn sample_start(&self, length: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
        let n = self.eligible(length);
        if n == 0 {
            return Err(Error::Usage(format!("replay holds no segment of length {length}")));
        }
        Ok(self.locate(rng.gen_range(0..n), length))
    }

    /// A time-major batch of `batch` uniformly drawn segments.
    pub fn sample(&self, batch: usize, length: usize, rng: &mut impl Rng) -> Result<SeqBatch> {
        let starts: Vec<(usize, usize)> = (0..batch)
            .map(|_| self.sample_start(length, rng))
            .collect::<Result<_>>()?;
        let rows = batch * length;
        let mut out = SeqBatch {
            batch,
            length,
            images: Vec::with_capacity(rows * self.image_len),
            tokens: Vec::with_capacity(rows),
            moves: Vec::with_capacity(rows),
            act_tokens: Vec::with_capacity(rows),
            rewards: Vec::with_capacity(rows),
            conts: Vec::with_capacity(rows),
            is_first: Vec::with_capacity(rows),
        };
        for t in 0..length {
            for &(s, start) in &starts {
                let ring = &self.rings[s];
                let i = ring.slot(start + t);
                out.images
                    .extend_from_slice(&ring.images[i * self.image_len..(i + 1) * self.image_len]);
                out.tokens.push(ring.tokens[i] as usize);
                out.moves.push(ring.moves[i] as usize);
                out.act_tokens.push(ring.act_tokens[i] as usize);
                out.rewards.push(ring.rewards[i] as f64);
                out.conts.push(if ring.flags[i] & CONT != 0 { 1.0 } else { 0.0 });
                out.is_first.push(ring.flags[i] & FIRST != 0);
            }
        }
        Ok(out)
    }

    /// SHA-256 over the stored contents of one stream, oldest first.
    pub fn hash_stream(&self, stream: usize, range: std::ops::Range<usize>) -> [u8; 32] {
        let r = &self.rings[stream];
        let mut h = Sha256::new();
        for i in range {
            let s = r.slot(i);
            h.update(&r.images[s * r.image_len..(s + 1) * r.image_len]);
            h.update(r.tokens[s].to_le_bytes());
            h.update(r.rewards[s].to_le_bytes());
            h.update([r.flags[s]]);
            h.update(r.moves[s].to_le_bytes());
            h.update(r.act_tokens[s].to_le_bytes());
            h.update(r.episodes[s].to_le_bytes());
            h.update(r.steps[s].to_le_bytes());
        }
        h.finalize().into()
    }

    /// Compact binary form for checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.rings.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.image_len as u64).to_le_bytes());
        out.extend_from_slice(&self.inserted.to_le_bytes());
        for r in &self.rings {
            out.extend_from_slice(&(r.cap as u64).to_le_bytes());
            out.extend_from_slice(&(r.len as u64).to_le_bytes());
            for i in 0..r.len {
                let s = r.slot(i);
                out.extend_from_slice(&r.images[s * r.image_len..(s + 1) * r.image_len]);
                out.extend_from_slice(&r.tokens[s].to_le_bytes());
                out.extend_from_slice(&r.rewards[s].to_le_bytes());
                out.push(r.flags[s]);
                out.extend_from_slice(&r.moves[s].to_le_bytes());
                out.extend_from_slice(&r.act_tokens[s].to_le_bytes());
                out.extend_from_slice(&r.episodes[s].to_le_bytes());
                out.extend_from_slice(&r.steps[s].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed replay section".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(bad)?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let u64_ = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let u32_ = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let streams = u64_(take(8)?) as usize;
        let image_len = u64_(take(8)?) as usize;
        let inserted = u64_(take(8)?);
        let mut rings = Vec::with_capacity(streams.min(1024));
        for _ in 0..streams {
            let cap = u64_(take(8)?) as usize;
            let len = u64_(take(8)?) as usize;
            if len > cap || cap == 0 {
                return Err(bad());
            }
            let mut r = Ring::new(cap, image_len);
            for _ in 0..len {
                r.images.extend_from_slice(take(image_len)?);
                r.tokens.push(u32_(take(4)?));
                r.rewards.push(f32::from_le_bytes(take(4)?.try_into().unwrap()));
                r.flags.push(take(1)?[0]);
                r.moves.push(u32_(take(4)?));
                r.act_tokens.push(u32_(take(4)?));
                r.episodes.push(u64_(take(8)?));
                r.steps.push(u32_(take(4)?));
            }
            r.len = len;
            rings.push(r);
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Ok(Self {
            rings,
            image_len,
            inserted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(i: u64, first: bool) -> Transition {
        Transition {
            image: vec![i as u8; 2],
            token: i as usize % 5,
            reward: i as f64,
            cont: true,
            is_first: first,
            movement: 1,
            act_token: 0,
            episode: 0,
            step: i as u32,
        }
    }

    #[test]
    fn ring_evicts_oldest_and_keeps_order() {
        let mut r = ReplayBuffer::new(4, 1, 2).unwrap();
        for i in 0..6 {
            r.push(0, &tr(i, i == 0)).unwrap();
        }
        assert_eq!(r.len(), 4);
        assert_eq!(r.inserted(), 6);
        let steps: Vec<u32> = (0..4).map(|i| r.get(0, i).step).collect();
        assert_eq!(steps, vec![2, 3, 4, 5]);
        assert_eq!(r.eligible(3), 2);
        let back = ReplayBuffer::from_bytes(&r.to_bytes()).unwrap();
        assert_eq!(back.hash_stream(0, 0..4), r.hash_stream(0, 0..4));
        assert!(ReplayBuffer::from_bytes(&r.to_bytes()[..10]).is_err());
    }

    #[test]
    fn segments_are_time_major() {
        let mut r = ReplayBuffer::new(20, 2, 2).unwrap();
        for i in 0..10 {
            r.push(0, &tr(i, i == 0)).unwrap();
            r.push(1, &tr(100 + i, i == 0)).unwrap();
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let b = r.sample(2, 3, &mut rng).unwrap();
        assert_eq!(b.rewards.len(), 6);
        // both rows start at stream 0, start 0
        assert_eq!(b.rewards, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(b.is_first[0] && b.is_first[1] && !b.is_first[2]);
    }
}
