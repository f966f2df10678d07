//! K-oblivious shuffles, where the adversary already knows the source
//! positions `π(T)` of a set `T` of `K` touched blocks.
//!
//! * [`k_cache_shuffle_basic`]: the touched blocks stay on the client; every
//!   destination index costs one download (the needed block, or a random
//!   untouched position once it is already held) and one upload.
//! * [`k_cache_shuffle`] / [`k_cache_shuffle_root`]: touched blocks are first
//!   sprayed into `q` buckets of exactly `S` slots; bucket by bucket the
//!   untouched blocks are merged in with a fixed download quota, and whatever
//!   is left over is shuffled at the end by the inner shuffle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{Block, BlockId, Permutation, PermutationMap};
use crate::error::{AbortReason, Error, Result};
use crate::recursive::{cache_shuffle, cache_shuffle_on, rspray_on, top_spray, Bucket};
use crate::root::{cache_shuffle_root, root_on};
use crate::session::Session;
use crate::spray::{Ctx, Outcome, ShuffleConfig, SlotRef};
use crate::storage::ArrayId;
use crate::util::{ceil_sqrt, ceil_tol, floor_tol, SampleSet};

/// Block ids whose source positions are known to the adversary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TouchedSet {
    ids: Vec<BlockId>,
    /// Source slots of dummy blocks that were also revealed (dummy shuffle only).
    dummy_slots: Vec<usize>,
}

impl TouchedSet {
    /// Sorts and deduplicates `ids`; ids are 1-based and must be real.
    pub fn new(mut ids: Vec<BlockId>) -> Result<Self> {
        if ids.contains(&0) {
            return Err(Error::invalid("touched ids are 1-based"));
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(TouchedSet { ids, dummy_slots: Vec::new() })
    }

    pub fn with_dummy_slots(mut self, mut slots: Vec<usize>) -> Self {
        slots.sort_unstable();
        slots.dedup();
        self.dummy_slots = slots;
        self
    }

    /// `k` distinct ids drawn uniformly from `1..=n`.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k > n {
            return Err(Error::invalid(format!("cannot touch {k} of {n} blocks")));
        }
        let ids = rand::seq::index::sample(rng, n, k).into_iter().map(|i| i as BlockId + 1).collect();
        Self::new(ids)
    }

    pub fn ids(&self) -> &[BlockId] {
        &self.ids
    }

    pub fn dummy_slots(&self) -> &[usize] {
        &self.dummy_slots
    }

    /// Number of touched source positions.
    pub fn len(&self) -> usize {
        self.ids.len() + self.dummy_slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Touched source positions in ascending id order, then the dummy slots.
    pub fn positions(&self, pi: &PermutationMap) -> Vec<usize> {
        self.ids.iter().map(|&id| pi.position(id)).chain(self.dummy_slots.iter().copied()).collect()
    }

    pub(crate) fn validate(&self, pi: &PermutationMap) -> Result<()> {
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize > pi.real_count()) {
            return Err(Error::invalid(format!("touched id {id} exceeds N = {}", pi.real_count())));
        }
        for &s in &self.dummy_slots {
            if s >= pi.len() || pi.block_at(s).is_some() {
                return Err(Error::invalid(format!("touched slot {s} is not a dummy slot")));
            }
        }
        Ok(())
    }
}

/// Deliberately broken behaviour used to check that the obliviousness tester
/// is not vacuous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasicVariant {
    #[default]
    Faithful,
    /// Downloads only when the needed block is missing, never a random one.
    /// Leaks σ through the timing of downloads.
    NeededOnly,
    /// Takes the lowest remaining position instead of a uniform one.
    Ascending,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicOptions {
    /// Destination indices per batched exchange; the client watermark is
    /// `K + batch`.
    pub batch: usize,
    pub variant: BasicVariant,
}

impl Default for BasicOptions {
    fn default() -> Self {
        BasicOptions { batch: 1, variant: BasicVariant::Faithful }
    }
}

fn check_square(pi: &PermutationMap, sigma: &PermutationMap, n: usize) -> Result<()> {
    if pi.len() != n || sigma.len() != n || pi.real_count() != n || sigma.real_count() != n {
        return Err(Error::invalid(format!(
            "π ({} slots) and σ ({} slots) must both be permutations of the {n} source slots",
            pi.len(),
            sigma.len()
        )));
    }
    Ok(())
}

/// Second phase of the basic shuffle. `held[id-1]` holds the blocks already
/// on the client; `tb_down` holds the source positions not yet downloaded.
pub(crate) fn basic_phase2(
    sess: &mut Session,
    source: ArrayId,
    pi: &PermutationMap,
    sigma: &PermutationMap,
    dest: ArrayId,
    held: &mut [Option<Block>],
    tb_down: &mut SampleSet,
    opts: BasicOptions,
) -> Result<()> {
    let n = sigma.len();
    let batch = opts.batch.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        for i in start..end {
            let who = sigma.block_at(i).expect("basic shuffle has no dummies");
            if held[who as usize - 1].is_none() {
                let pos = pi.position(who);
                if !tb_down.remove(pos as u32) {
                    return Err(Error::violation(format!("block {who} neither held nor downloadable")));
                }
                let b = sess.fetch(source, pos)?;
                held[who as usize - 1] = Some(b);
            } else if opts.variant != BasicVariant::NeededOnly {
                let pick = match opts.variant {
                    BasicVariant::Ascending => {
                        let low = tb_down.iter().min();
                        if let Some(p) = low {
                            tb_down.remove(p);
                        }
                        low
                    }
                    _ => tb_down.take_random(sess.coins()),
                };
                if let Some(pos) = pick {
                    let b = sess.fetch(source, pos as usize)?;
                    if b.is_dummy() {
                        return Err(Error::violation("dummy block in a basic shuffle source"));
                    }
                    let id = b.id as usize;
                    held[id - 1] = Some(b);
                }
            }
        }
        for i in start..end {
            let who = sigma.block_at(i).expect("basic shuffle has no dummies");
            let b = held[who as usize - 1]
                .take()
                .ok_or_else(|| Error::violation(format!("block {who} missing at upload")))?;
            sess.put(dest, i, &b)?;
        }
        start = end;
    }
    Ok(())
}

/// K-oblivious shuffle with client memory `K + batch` and bandwidth exactly `2N`.
pub fn k_cache_shuffle_basic(
    sess: &mut Session,
    source: ArrayId,
    pi: &PermutationMap,
    sigma: &PermutationMap,
    touched: &TouchedSet,
    opts: BasicOptions,
) -> Result<Outcome> {
    let n = sess.store.len(source)?;
    check_square(pi, sigma, n)?;
    touched.validate(pi)?;
    if !touched.dummy_slots().is_empty() {
        return Err(Error::invalid("basic shuffle sources have no dummy slots"));
    }
    let dest = sess.store.alloc("dest", n)?;
    let mut held: Vec<Option<Block>> = vec![None; n];
    let mut tb_down = SampleSet::full(n);
    for &id in touched.ids() {
        let pos = pi.position(id);
        tb_down.remove(pos as u32);
        held[id as usize - 1] = Some(sess.fetch(source, pos)?);
    }
    basic_phase2(sess, source, pi, sigma, dest, &mut held, &mut tb_down, opts)?;
    Ok(Outcome { dest, metrics: sess.store.metrics(), trace: Vec::new() })
}

/// What happened inside a three-phase K-shuffle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KReport {
    /// Slots per touched bucket.
    pub slots: usize,
    /// Number of touched buckets `q`.
    pub buckets: usize,
    /// Bucket at which phase 2 stopped.
    pub stop_bucket: usize,
    /// Destination index sets `destInd_j`, sorted.
    pub partition: Vec<Vec<u32>>,
    /// Untouched downloads required per processed bucket (`u_j`).
    pub quotas: Vec<usize>,
    /// Capacity of every `rem_j` array.
    pub rem_cap: usize,
    /// Ciphertexts handed to the final shuffle.
    pub phase3_input: usize,
    /// Destination indices left for the final shuffle.
    pub phase3_dests: usize,
}

#[derive(Clone, Debug)]
pub struct KOutcome {
    pub outcome: Outcome,
    /// `None` when the shuffle delegated to a full shuffle (`K > N/2`).
    pub report: Option<KReport>,
}

#[derive(Clone, Copy)]
enum Inner {
    Recursive,
    Root,
}

/// Phase 1: sprays the touched blocks into leaves of exactly `slots`
/// ciphertexts, partitioning `σ(T)` along the way.
fn bucketize(
    sess: &mut Session,
    ctx: &mut Ctx<'_>,
    input: &[SlotRef],
    touched_dests: &[u32],
    slots: usize,
) -> Result<Vec<Bucket>> {
    let k = input.len();
    let mut levels = 0u32;
    while k > slots.pow(levels + 2) {
        levels += 1;
    }
    let rounds = slots.pow(levels + 1);
    let caches = ceil_tol((1.0 + ctx.cfg.epsilon) * k as f64 / rounds as f64).max(1);
    let mut frontier = top_spray(sess, ctx, input, touched_dests, rounds, caches, 0)?;
    for depth in 1..=levels as usize {
        let mut next = Vec::with_capacity(frontier.len() * slots);
        for b in frontier {
            let len = sess.store.len(b.temp)?;
            let sub: Vec<SlotRef> = SlotRef::range(b.temp, len).collect();
            next.extend(rspray_on(sess, ctx, &sub, &b.dests, slots, depth)?);
            sess.store.free(b.temp)?;
        }
        frontier = next;
    }
    Ok(frontier)
}

fn k_core(
    sess: &mut Session,
    source: ArrayId,
    pi: &PermutationMap,
    sigma: &PermutationMap,
    touched: &TouchedSet,
    slots: usize,
    cfg: &ShuffleConfig,
    inner: Inner,
) -> Result<KOutcome> {
    let n = sess.store.len(source)?;
    let k = touched.len();
    let eps = cfg.epsilon;
    let dest = sess.store.alloc("dest", n)?;
    let mut ctx = Ctx { sigma, dest, cfg, trace: Vec::new() };

    // Phase 1.
    let mut is_touched = vec![false; n];
    for &id in touched.ids() {
        is_touched[id as usize - 1] = true;
    }
    let leaves: Vec<Bucket> = if k == 0 {
        Vec::new()
    } else {
        let input: Vec<SlotRef> = touched.positions(pi).into_iter().map(|p| SlotRef::new(source, p)).collect();
        let mut tdests: Vec<u32> = touched.ids().iter().map(|&id| sigma.position(id) as u32).collect();
        tdests.sort_unstable();
        bucketize(sess, &mut ctx, &input, &tdests, slots)?
    };
    let q = leaves.len().max(1);
    let leaf_slots = if k == 0 { 0 } else { slots };

    // Phase 2 bookkeeping: untouched destinations join uniform buckets.
    let mut bucket_of = vec![u32::MAX; n];
    for (j, leaf) in leaves.iter().enumerate() {
        for &d in &leaf.dests {
            bucket_of[d as usize] = j as u32;
        }
    }
    let mut untouched_in: Vec<Vec<u32>> = vec![Vec::new(); q];
    for d in 0..n {
        let who = sigma.block_at(d).expect("K-shuffle has no dummies");
        if !is_touched[who as usize - 1] {
            let j = sess.coins().gen_range(0..q);
            bucket_of[d] = j as u32;
            untouched_in[j].push(d as u32);
        }
    }
    let mut partition: Vec<Vec<u32>> = vec![Vec::new(); q];
    for (d, &j) in bucket_of.iter().enumerate() {
        partition[j as usize].push(d as u32);
    }
    let base = floor_tol((1.0 - eps) * k as f64 / q as f64);
    let rem_cap = ceil_tol(2.0 * eps * k as f64 / q as f64);
    let quotas: Vec<usize> = partition.iter().map(|p| p.len().saturating_sub(base)).collect();

    let mut remaining: SampleSet = SampleSet::new(n);
    for (id0, &t) in is_touched.iter().enumerate() {
        if !t {
            remaining.insert(pi.position(id0 as BlockId + 1) as u32);
        }
    }
    // Back pointer for surplus pulls: bucket and how many of its untouched
    // destinations (from the top) are already taken.
    let mut back = (q - 1, 0usize);
    let mut rems: Vec<ArrayId> = Vec::new();
    let mut stop = q;
    let sigma_inv_pos = |d: u32| pi.position(sigma.block_at(d as usize).unwrap());

    for j in 0..q {
        let r = remaining.len();
        let u = quotas[j];
        if r == 0 || r < u {
            stop = j;
            break;
        }
        let needed = untouched_in[j].len();
        if back.0 < j || (back.0 == j && back.1 > 0) {
            return Err(Error::violation("surplus pulls reached an unprocessed bucket"));
        }
        if needed > u {
            return Err(sess.abort(AbortReason::QuotaExceeded { bucket: j, needed, quota: u }));
        }
        let surplus = u - needed;
        if surplus > rem_cap {
            return Err(sess.abort(AbortReason::RemOverflow { bucket: j, surplus, cap: rem_cap }));
        }

        let mut at_dest: std::collections::HashMap<u32, Block> = std::collections::HashMap::new();
        if let Some(leaf) = leaves.get(j) {
            for i in 0..leaf_slots {
                let b = sess.fetch(leaf.temp, i)?;
                if b.is_dummy() {
                    sess.discard(1);
                } else {
                    at_dest.insert(sigma.position(b.id) as u32, b);
                }
            }
        }
        let rem = sess.store.alloc(format!("rem{j}"), rem_cap)?;
        let mut pulled: Vec<Block> = Vec::with_capacity(surplus);
        let mut next_needed = 0;
        for (t, &d) in partition[j].iter().enumerate() {
            if t < u {
                if next_needed < needed {
                    let nd = untouched_in[j][next_needed];
                    next_needed += 1;
                    let pos = sigma_inv_pos(nd);
                    remaining.remove(pos as u32);
                    let b = sess.fetch(source, pos)?;
                    at_dest.insert(nd, b);
                } else {
                    while untouched_in[back.0].len() == back.1 {
                        back = (back.0 - 1, 0);
                    }
                    let list = &untouched_in[back.0];
                    let nd = list[list.len() - 1 - back.1];
                    back.1 += 1;
                    let pos = sigma_inv_pos(nd);
                    remaining.remove(pos as u32);
                    pulled.push(sess.fetch(source, pos)?);
                }
            }
            let b = at_dest
                .remove(&d)
                .ok_or_else(|| Error::violation(format!("no block for Dest[{d}] in bucket {j}")))?;
            sess.put(dest, d as usize, &b)?;
        }
        for i in 0..rem_cap {
            match pulled.get(i) {
                Some(b) => sess.put(rem, i, b)?,
                None => sess.put_dummy(rem, i)?,
            }
        }
        rems.push(rem);
        if let Some(leaf) = leaves.get(j) {
            sess.store.free(leaf.temp)?;
        }
    }

    // Phase 3.
    let mut input: Vec<SlotRef> = Vec::new();
    for &rem in &rems {
        input.extend(SlotRef::range(rem, rem_cap));
    }
    let mut left: Vec<u32> = remaining.iter().collect();
    left.sort_unstable();
    input.extend(left.iter().map(|&p| SlotRef::new(source, p as usize)));
    for leaf in leaves.iter().skip(stop) {
        input.extend(SlotRef::range(leaf.temp, leaf_slots));
    }
    let mut dests: Vec<u32> = partition[stop.min(q)..].iter().flatten().copied().collect();
    dests.sort_unstable();
    let report = KReport {
        slots: leaf_slots,
        buckets: q,
        stop_bucket: stop,
        partition,
        quotas: quotas[..stop].to_vec(),
        rem_cap,
        phase3_input: input.len(),
        phase3_dests: dests.len(),
    };
    if !dests.is_empty() {
        match inner {
            Inner::Recursive => cache_shuffle_on(sess, &mut ctx, &input, &dests, slots, 0)?,
            Inner::Root => root_on(sess, &mut ctx, &input, &dests, 0)?,
        }
    }
    for rem in rems {
        sess.store.free(rem)?;
    }
    for leaf in leaves.iter().skip(stop) {
        sess.store.free(leaf.temp)?;
    }
    Ok(KOutcome { outcome: Outcome { dest, metrics: sess.store.metrics(), trace: ctx.trace }, report: Some(report) })
}

fn check_k(pi: &PermutationMap, sigma: &PermutationMap, touched: &TouchedSet, n: usize, cfg: &ShuffleConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.epsilon >= 1.0 {
        return Err(Error::invalid(format!("K-shuffle needs ε < 1, got {}", cfg.epsilon)));
    }
    check_square(pi, sigma, n)?;
    touched.validate(pi)?;
    if !touched.dummy_slots().is_empty() {
        return Err(Error::invalid("K-shuffle sources have no dummy slots"));
    }
    Ok(())
}

/// Three-phase K-oblivious shuffle with client memory `O(S)`. Delegates to
/// [`cache_shuffle`] when `K > N/2` and to [`k_cache_shuffle_basic`] when the
/// touched blocks fit in client memory (`K < S`).
pub fn k_cache_shuffle(
    sess: &mut Session,
    source: ArrayId,
    pi: &PermutationMap,
    sigma: &PermutationMap,
    touched: &TouchedSet,
    s_budget: usize,
    cfg: &ShuffleConfig,
) -> Result<KOutcome> {
    let n = sess.store.len(source)?;
    check_k(pi, sigma, touched, n, cfg)?;
    if s_budget < 2 {
        return Err(Error::invalid(format!("client budget S must be at least 2, got {s_budget}")));
    }
    cfg.check_gate("S", s_budget, n)?;
    if 2 * touched.len() > n {
        return Ok(KOutcome { outcome: cache_shuffle(sess, source, sigma, s_budget, cfg)?, report: None });
    }
    if touched.len() < s_budget {
        let outcome = k_cache_shuffle_basic(sess, source, pi, sigma, touched, BasicOptions::default())?;
        return Ok(KOutcome { outcome, report: None });
    }
    k_core(sess, source, pi, sigma, touched, s_budget, cfg, Inner::Recursive)
}

/// [`k_cache_shuffle`] with `S = ⌈√K⌉` and the root shuffle as inner shuffle.
/// Delegates to [`cache_shuffle_root`] when `K > N/2`.
pub fn k_cache_shuffle_root(
    sess: &mut Session,
    source: ArrayId,
    pi: &PermutationMap,
    sigma: &PermutationMap,
    touched: &TouchedSet,
    cfg: &ShuffleConfig,
) -> Result<KOutcome> {
    let n = sess.store.len(source)?;
    check_k(pi, sigma, touched, n, cfg)?;
    if 2 * touched.len() > n {
        return Ok(KOutcome { outcome: cache_shuffle_root(sess, source, sigma, cfg)?, report: None });
    }
    let slots = ceil_sqrt(touched.len()).max(1);
    k_core(sess, source, pi, sigma, touched, slots, cfg, Inner::Root)
}
