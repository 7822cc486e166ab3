use std::collections::VecDeque;

use crate::vocab::PAD;

/// One-token-per-step language channel.
///
/// Utterances queue up and are emitted token by token; an idle stream
/// emits the pad token. [`LanguageStream::interrupt`] drops whatever is
/// streaming or queued and starts a new utterance at its first token.
#[derive(Clone, Debug, Default)]
pub struct LanguageStream {
    current: Vec<usize>,
    cursor: usize,
    queue: VecDeque<Vec<usize>>,
}

impl LanguageStream {
    pub fn new() -> Self {
        Self::default()
    }

    /// True when nothing is streaming or queued.
    pub fn is_idle(&self) -> bool {
        self.cursor >= self.current.len() && self.queue.is_empty()
    }

    pub fn push(&mut self, utterance: Vec<usize>) {
        if !utterance.is_empty() {
            self.queue.push_back(utterance);
        }
    }

    pub fn interrupt(&mut self, utterance: Vec<usize>) {
        self.queue.clear();
        self.current = utterance;
        self.cursor = 0;
    }

    pub fn clear(&mut self) {
        self.interrupt(Vec::new());
    }

    /// Remaining tokens of the streaming utterance plus everything queued.
    pub fn pending(&self) -> usize {
        self.current.len().saturating_sub(self.cursor)
            + self.queue.iter().map(Vec::len).sum::<usize>()
    }

    pub fn next_token(&mut self) -> usize {
        while self.cursor >= self.current.len() {
            match self.queue.pop_front() {
                Some(u) => {
                    self.current = u;
                    self.cursor = 0;
                }
                None => return PAD,
            }
        }
        let t = self.current[self.cursor];
        self.cursor += 1;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_then_pads() {
        let mut s = LanguageStream::new();
        assert_eq!(s.next_token(), PAD);
        s.push(vec![3, 4]);
        s.push(vec![5]);
        assert_eq!(s.pending(), 3);
        let got: Vec<usize> = (0..5).map(|_| s.next_token()).collect();
        assert_eq!(got, vec![3, 4, 5, PAD, PAD]);
        assert!(s.is_idle());
    }

    #[test]
    fn interrupt_restarts_from_first_token() {
        let mut s = LanguageStream::new();
        s.push(vec![1, 2, 3]);
        s.push(vec![9]);
        assert_eq!(s.next_token(), 1);
        s.interrupt(vec![7, 8]);
        let got: Vec<usize> = (0..3).map(|_| s.next_token()).collect();
        assert_eq!(got, vec![7, 8, PAD]);
    }
}
