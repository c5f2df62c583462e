//! Dual-queue adaptation memory and the weighted batch sampler.
//!
//! Unlabeled and labeled events live in separate FIFO queues whose capacities
//! keep a 2:1 ratio. Batches are drawn with a fixed 3:1 unlabeled:labeled
//! composition so scarce labels are not drowned out by the unlabeled flow.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OttaError, Result};
use crate::signal::{BpLabel, SignalSegment, StreamEvent};

/// Queue capacities; `unlabeled = 2 * labeled`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferCapacity {
    pub unlabeled: usize,
    pub labeled: usize,
}

impl Default for BufferCapacity {
    fn default() -> Self {
        Self {
            unlabeled: 64,
            labeled: 32,
        }
    }
}

impl BufferCapacity {
    pub fn validate(&self) -> Result<()> {
        if self.labeled == 0 || self.unlabeled != 2 * self.labeled {
            return Err(OttaError::Config(format!(
                "capacities must be positive with unlabeled = 2 x labeled, got {}/{}",
                self.unlabeled, self.labeled
            )));
        }
        Ok(())
    }
}

/// Per-batch slot counts; `n_unlabel = 3 * n_label`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchComposition {
    pub n_unlabel: usize,
    pub n_label: usize,
}

impl Default for BatchComposition {
    fn default() -> Self {
        Self {
            n_unlabel: 24,
            n_label: 8,
        }
    }
}

impl BatchComposition {
    pub fn validate(&self) -> Result<()> {
        if self.n_label == 0 || self.n_unlabel != 3 * self.n_label {
            return Err(OttaError::Config(format!(
                "batch composition must be positive with n_unlabel = 3 x n_label, got {}/{}",
                self.n_unlabel, self.n_label
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_unlabel + self.n_label
    }
}

/// What goes into the buffer.
#[derive(Clone, Debug, PartialEq)]
pub enum Entry<U, L> {
    Unlabeled(U),
    Labeled(L),
}

/// One sampled batch slot, borrowing from the buffer.
#[derive(Debug, PartialEq)]
pub enum Slot<'a, U, L> {
    Unlabeled(&'a U),
    Labeled(&'a L),
}

impl<U, L> Clone for Slot<'_, U, L> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<U, L> Copy for Slot<'_, U, L> {}

impl<U, L> Slot<'_, U, L> {
    pub fn is_labeled(&self) -> bool {
        matches!(self, Slot::Labeled(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Unlabeled,
    Labeled,
}

#[derive(Clone, Debug)]
pub struct DualQueueBuffer<U = SignalSegment, L = (SignalSegment, BpLabel)> {
    q_unlabel: VecDeque<U>,
    q_label: VecDeque<L>,
    capacity: BufferCapacity,
    newest: Option<Side>,
}

impl<U, L> DualQueueBuffer<U, L> {
    pub fn new(capacity: BufferCapacity) -> Result<Self> {
        capacity.validate()?;
        Ok(Self {
            q_unlabel: VecDeque::with_capacity(capacity.unlabeled),
            q_label: VecDeque::with_capacity(capacity.labeled),
            capacity,
            newest: None,
        })
    }

    pub fn capacity(&self) -> BufferCapacity {
        self.capacity
    }

    /// `(unlabeled, labeled)` queue lengths.
    pub fn sizes(&self) -> (usize, usize) {
        (self.q_unlabel.len(), self.q_label.len())
    }

    pub fn unlabeled(&self) -> impl ExactSizeIterator<Item = &U> + '_ {
        self.q_unlabel.iter()
    }

    pub fn labeled(&self) -> impl ExactSizeIterator<Item = &L> + '_ {
        self.q_label.iter()
    }

    /// Routes the entry to its queue, evicting that queue's oldest entry when
    /// it is full.
    pub fn push(&mut self, entry: Entry<U, L>) {
        match entry {
            Entry::Unlabeled(u) => {
                if self.q_unlabel.len() == self.capacity.unlabeled {
                    self.q_unlabel.pop_front();
                }
                self.q_unlabel.push_back(u);
                self.newest = Some(Side::Unlabeled);
            }
            Entry::Labeled(l) => {
                if self.q_label.len() == self.capacity.labeled {
                    self.q_label.pop_front();
                }
                self.q_label.push_back(l);
                self.newest = Some(Side::Labeled);
            }
        }
    }

    /// Draws `comp.total()` slots.
    ///
    /// The most recently pushed entry always takes one slot of its queue's
    /// quota. The rest of each quota is drawn uniformly from the other entries
    /// of that queue, without replacement when the queue holds at least the
    /// quota and with replacement otherwise. An empty labeled queue hands its
    /// quota to the unlabeled side (and vice versa).
    pub fn sample_batch<'a>(
        &'a self,
        comp: &BatchComposition,
        rng: &mut impl Rng,
    ) -> Result<Vec<Slot<'a, U, L>>> {
        if self.q_unlabel.is_empty() && self.q_label.is_empty() {
            return Err(OttaError::Contract(
                "cannot sample from an empty buffer".into(),
            ));
        }
        let (mut n_u, mut n_l) = (comp.n_unlabel, comp.n_label);
        if self.q_label.is_empty() {
            n_u += n_l;
            n_l = 0;
        } else if self.q_unlabel.is_empty() {
            n_l += n_u;
            n_u = 0;
        }

        let mut out = Vec::with_capacity(n_u + n_l);
        for i in draw(
            self.q_unlabel.len(),
            n_u,
            self.newest == Some(Side::Unlabeled),
            rng,
        ) {
            out.push(Slot::Unlabeled(&self.q_unlabel[i]));
        }
        for i in draw(
            self.q_label.len(),
            n_l,
            self.newest == Some(Side::Labeled),
            rng,
        ) {
            out.push(Slot::Labeled(&self.q_label[i]));
        }
        Ok(out)
    }
}

/// Queue positions for `quota` slots from a queue of `len` entries whose last
/// entry is forced in when `newest_here`.
fn draw(len: usize, quota: usize, newest_here: bool, rng: &mut impl Rng) -> Vec<usize> {
    if quota == 0 || len == 0 {
        return Vec::new();
    }
    let mut picks = Vec::with_capacity(quota);
    let pool = if newest_here {
        picks.push(len - 1);
        len - 1
    } else {
        len
    };
    let need = quota - picks.len();
    if need == 0 {
        return picks;
    }
    if pool == 0 {
        picks.extend(std::iter::repeat(len - 1).take(need));
    } else if pool >= need {
        picks.extend(index::sample(rng, pool, need).into_iter());
    } else {
        picks.extend((0..need).map(|_| rng.gen_range(0..pool)));
    }
    picks
}

impl DualQueueBuffer<SignalSegment, (SignalSegment, BpLabel)> {
    pub fn push_event(&mut self, event: StreamEvent) {
        match event.label {
            Some(l) => self.push(Entry::Labeled((event.segment, l))),
            None => self.push(Entry::Unlabeled(event.segment)),
        }
    }
}
