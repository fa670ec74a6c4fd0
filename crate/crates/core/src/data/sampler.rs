//! Batches mixing segmentation-labeled and classification-only samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Indices into the labeled and unlabeled sample lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Endless shuffled cycle over `0..len`, reshuffled on every pass.
#[derive(Clone, Debug)]
struct Stream {
    order: Vec<usize>,
    pos: usize,
    passes: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, passes: 0, rng }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.passes += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Two-stream sampler: each batch holds half labeled and half unlabeled
/// samples. If one stream is empty, batches come entirely from the other.
#[derive(Clone, Debug)]
pub struct TwoStreamSampler {
    labeled: Option<Stream>,
    unlabeled: Option<Stream>,
    batch_size: usize,
}

impl TwoStreamSampler {
    pub fn new(num_labeled: usize, num_unlabeled: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(Error::Contract(format!("batch size must be even and positive, got {batch_size}")));
        }
        if num_labeled + num_unlabeled == 0 {
            return Err(Error::Contract("both sample streams are empty".into()));
        }
        if num_labeled == 0 || num_unlabeled == 0 {
            let which = if num_labeled == 0 { "labeled" } else { "unlabeled" };
            log::warn!("{which} stream is empty; batches use a single stream");
        }
        Ok(Self {
            labeled: (num_labeled > 0).then(|| Stream::new(num_labeled, seed, 1)),
            unlabeled: (num_unlabeled > 0).then(|| Stream::new(num_unlabeled, seed, 2)),
            batch_size,
        })
    }

    pub fn is_two_stream(&self) -> bool {
        self.labeled.is_some() && self.unlabeled.is_some()
    }

    /// Batches needed for the longer stream to complete one pass.
    pub fn batches_per_epoch(&self) -> usize {
        let per = |s: &Option<Stream>, n: usize| s.as_ref().map_or(0, |s| s.order.len().div_ceil(n));
        if self.is_two_stream() {
            let half = self.batch_size / 2;
            per(&self.labeled, half).max(per(&self.unlabeled, half))
        } else {
            per(&self.labeled, self.batch_size).max(per(&self.unlabeled, self.batch_size))
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let half = self.batch_size / 2;
        match (&mut self.labeled, &mut self.unlabeled) {
            (Some(l), Some(u)) => Batch { labeled: l.take(half), unlabeled: u.take(half) },
            (Some(l), None) => Batch { labeled: l.take(self.batch_size), unlabeled: Vec::new() },
            (None, Some(u)) => Batch { labeled: Vec::new(), unlabeled: u.take(self.batch_size) },
            (None, None) => unreachable!("constructor rejects two empty streams"),
        }
    }

    /// Completed passes over the (labeled, unlabeled) streams.
    pub fn passes(&self) -> (usize, usize) {
        (self.labeled.as_ref().map_or(0, |s| s.passes), self.unlabeled.as_ref().map_or(0, |s| s.passes))
    }
}

impl Iterator for TwoStreamSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
