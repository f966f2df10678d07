//! Spray rounds, adjustment and recalibration shared by every cache-based shuffle.
//!
//! A spray scatters input ciphertexts into `q` client caches keyed by a random
//! partition of the destination indices, and after each input group uploads
//! exactly one ciphertext per cache (a dummy when the cache is empty). Sources
//! and destinations of all moves depend only on the coins, never on σ.

use std::collections::VecDeque;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{Block, Permutation, PermutationMap};
use crate::error::{AbortReason, Error, Result};
use crate::session::Session;
use crate::storage::{ArrayId, Metrics};
use crate::util::default_delta;

/// A server location feeding a spray.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotRef {
    pub array: ArrayId,
    pub index: u32,
}

impl SlotRef {
    pub fn new(array: ArrayId, index: usize) -> Self {
        SlotRef { array, index: index as u32 }
    }

    pub fn range(array: ArrayId, len: usize) -> impl Iterator<Item = SlotRef> {
        (0..len).map(move |i| SlotRef::new(array, i))
    }
}

/// How strictly to enforce the `S ≥ 16·ln N` client-memory guideline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Off,
    /// Log a warning and run anyway.
    #[default]
    Warn,
    Strict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleConfig {
    pub epsilon: f64,
    /// Client cache cap multiplier; aborts when `Σ|Q_j| > δ·q` after a round.
    pub delta: f64,
    pub gate: Gate,
}

impl ShuffleConfig {
    pub fn new(epsilon: f64) -> Self {
        ShuffleConfig { epsilon, delta: default_delta(epsilon), gate: Gate::Warn }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = gate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let min = default_delta(self.epsilon);
        if !(self.delta >= min - 1e-12) {
            return Err(Error::invalid(format!("delta {} below (1+1/ε)·ln(2e) = {min}", self.delta)));
        }
        Ok(())
    }

    /// Applies the `S ≥ 16·ln N` guideline for a client budget `s` over `n` items.
    pub fn check_gate(&self, what: &str, s: usize, n: usize) -> Result<()> {
        let want = 16.0 * (n.max(2) as f64).ln();
        if (s as f64) >= want {
            return Ok(());
        }
        let msg = format!("{what} = {s} is below 16·ln N = {want:.1}; abort bounds are weaker here");
        match self.gate {
            Gate::Off => Ok(()),
            Gate::Warn => {
                log::warn!("{msg}");
                Ok(())
            }
            Gate::Strict => Err(Error::invalid(msg)),
        }
    }
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig::new(0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    /// Top-level spray followed by adjustment.
    Spray,
    Rspray,
    Root,
}

/// One sub-shuffle invocation and its exact move count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTrace {
    pub kind: CallKind,
    pub depth: usize,
    /// Input slots.
    pub n: usize,
    /// Destination indices.
    pub d: usize,
    /// Spray rounds, equal to the temp array length.
    pub rounds: usize,
    /// Caches, equal to the number of temp arrays.
    pub caches: usize,
}

impl CallTrace {
    /// `n + 3·rounds·caches` for sprays with adjustment,
    /// `n + 2·rounds·caches + d` for the root shuffle.
    pub fn bandwidth(&self) -> u64 {
        let sq = (self.rounds * self.caches) as u64;
        match self.kind {
            CallKind::Spray | CallKind::Rspray => self.n as u64 + 3 * sq,
            CallKind::Root => self.n as u64 + 2 * sq + self.d as u64,
        }
    }
}

/// Result of a completed shuffle.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub dest: ArrayId,
    pub metrics: Metrics,
    pub trace: Vec<CallTrace>,
}

/// Per-execution context shared by the recursive calls.
pub(crate) struct Ctx<'a> {
    pub sigma: &'a PermutationMap,
    pub dest: ArrayId,
    pub cfg: &'a ShuffleConfig,
    pub trace: Vec<CallTrace>,
}

/// Position lookup in a sorted destination list.
pub(crate) struct DestIndex<'a> {
    dests: &'a [u32],
    contiguous: bool,
}

impl<'a> DestIndex<'a> {
    pub fn new(dests: &'a [u32]) -> Self {
        debug_assert!(dests.windows(2).all(|w| w[0] < w[1]), "destinations must be sorted");
        let contiguous = dests.last().map_or(true, |&l| (l - dests[0]) as usize + 1 == dests.len());
        DestIndex { dests, contiguous }
    }

    pub fn locate(&self, d: u32) -> Option<usize> {
        if self.contiguous {
            let first = *self.dests.first()?;
            let i = d.checked_sub(first)? as usize;
            (i < self.dests.len()).then_some(i)
        } else {
            self.dests.binary_search(&d).ok()
        }
    }
}

/// Assigns every destination to a uniform part in `0..q`. Returns the part of
/// each destination (parallel to `dests`) and each part's sorted members.
pub(crate) fn partition(sess: &mut Session, dests: &[u32], q: usize) -> (Vec<u32>, Vec<Vec<u32>>) {
    let mut assign = Vec::with_capacity(dests.len());
    let mut parts = vec![Vec::new(); q];
    for &d in dests {
        let j = sess.coins().gen_range(0..q);
        assign.push(j as u32);
        parts[j].push(d);
    }
    (assign, parts)
}

/// A block waiting in a client cache, tagged with its destination index.
pub(crate) type Queued = (u32, Block);

/// Runs one spray round per group. `order[group]` lists the input slots of a
/// group; every round ends with one upload to slot `round` of each of the `q`
/// temp arrays. Returns the temps and the residual caches.
pub(crate) fn spray(
    sess: &mut Session,
    ctx: &Ctx<'_>,
    input: &[SlotRef],
    groups: &[Range<usize>],
    dests: &[u32],
    assign: &[u32],
    q: usize,
    label: &str,
) -> Result<(Vec<ArrayId>, Vec<VecDeque<Queued>>)> {
    let rounds = groups.len();
    let index = DestIndex::new(dests);
    let mut temps = Vec::with_capacity(q);
    for j in 0..q {
        temps.push(sess.store.alloc(format!("{label}.t{j}"), rounds)?);
    }
    let mut queues: Vec<VecDeque<Queued>> = vec![VecDeque::new(); q];
    let mut total = 0usize;
    let cap = ctx.cfg.delta * q as f64;
    for (round, g) in groups.iter().enumerate() {
        for slot in &input[g.clone()] {
            let block = sess.fetch(slot.array, slot.index as usize)?;
            if block.is_dummy() {
                sess.discard(1);
                continue;
            }
            let d = ctx.sigma.position(block.id) as u32;
            let i = index
                .locate(d)
                .ok_or_else(|| Error::violation(format!("block {} is not destined to this call", block.id)))?;
            queues[assign[i] as usize].push_back((d, block));
            total += 1;
        }
        for (j, queue) in queues.iter_mut().enumerate() {
            match queue.pop_front() {
                Some((_, block)) => {
                    sess.put(temps[j], round, &block)?;
                    total -= 1;
                }
                None => sess.put_dummy(temps[j], round)?,
            }
        }
        sess.store.record_cache(total);
        if total as f64 > cap {
            for t in temps {
                sess.store.free(t)?;
            }
            return Err(sess.abort(AbortReason::CacheOverflow { held: total, cap: cap as usize }));
        }
    }
    Ok((temps, queues))
}

/// Folds a residual cache into its temp array: every slot is downloaded, real
/// blocks are re-uploaded in place, dummies are replaced by cached blocks
/// while any remain.
pub(crate) fn adjust(sess: &mut Session, temp: ArrayId, queue: &mut VecDeque<Queued>) -> Result<()> {
    let len = sess.store.len(temp)?;
    for i in 0..len {
        let block = sess.fetch(temp, i)?;
        if !block.is_dummy() {
            sess.put(temp, i, &block)?;
            continue;
        }
        sess.discard(1);
        match queue.pop_front() {
            Some((_, b)) => sess.put(temp, i, &b)?,
            None => sess.put_dummy(temp, i)?,
        }
    }
    Ok(())
}

/// Downloads a temp array in slot order, merges it with the residual cache
/// and uploads one fresh ciphertext per destination index in increasing order.
pub(crate) fn recalibrate(
    sess: &mut Session,
    ctx: &Ctx<'_>,
    temp: ArrayId,
    queue: VecDeque<Queued>,
    dests: &[u32],
) -> Result<()> {
    let len = sess.store.len(temp)?;
    let mut held: Vec<Queued> = queue.into_iter().collect();
    for i in 0..len {
        let block = sess.fetch(temp, i)?;
        if block.is_dummy() {
            sess.discard(1);
        } else {
            held.push((ctx.sigma.position(block.id) as u32, block));
        }
    }
    held.sort_unstable_by_key(|(d, _)| *d);
    if held.len() != dests.len() || held.iter().zip(dests).any(|((d, _), want)| d != want) {
        return Err(Error::violation(format!(
            "recalibrate holds {} blocks for {} destinations",
            held.len(),
            dests.len()
        )));
    }
    for (d, block) in &held {
        sess.put(ctx.dest, *d as usize, block)?;
    }
    Ok(())
}
