//! RSpray and the recursive CacheShuffle for client memory `S`.
//!
//! The top level sprays `N` ciphertexts into `⌈(1+ε)S⌉` caches, which leaves
//! every temp array with roughly an `ε/(1+ε)` fraction of dummies. Each bucket
//! is then split by RSpray into `S` buckets per level until its destination
//! set has at most `S²` indices, and finished with the root shuffle.

use crate::crypto::{Permutation, PermutationMap};
use crate::error::{AbortReason, Error, Result};
use crate::root::root_on;
use crate::session::Session;
use crate::spray::{adjust, partition, spray, CallKind, CallTrace, Ctx, Outcome, ShuffleConfig, SlotRef};
use crate::storage::ArrayId;
use crate::util::{balanced_ranges, ceil_tol};

/// A temp array together with the destination indices it serves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub temp: ArrayId,
    pub dests: Vec<u32>,
}

impl Bucket {
    pub fn slots(&self, sess: &Session) -> Result<usize> {
        sess.store.len(self.temp)
    }
}

#[derive(Clone, Debug)]
pub struct RsprayOutput {
    pub buckets: Vec<Bucket>,
    pub trace: CallTrace,
}

fn check_budget(s_budget: usize) -> Result<()> {
    if s_budget < 2 {
        return Err(Error::invalid(format!("client budget S must be at least 2, got {s_budget}")));
    }
    Ok(())
}

/// Splits `input` into `S` temp arrays of exactly `⌈n/S⌉` slots each, with
/// `dests` randomly partitioned so that every real block lands in the temp of
/// its part.
pub(crate) fn rspray_on(
    sess: &mut Session,
    ctx: &mut Ctx<'_>,
    input: &[SlotRef],
    dests: &[u32],
    s_budget: usize,
    depth: usize,
) -> Result<Vec<Bucket>> {
    let n = input.len();
    let q = s_budget;
    let s = n.div_ceil(q).max(1);
    let (assign, parts) = partition(sess, dests, q);
    if let Some((j, p)) = parts.iter().enumerate().find(|(_, p)| p.len() > s) {
        return Err(sess.abort(AbortReason::BucketOverflow { bucket: j, real: p.len(), slots: s }));
    }

    // Uniform source bucket per input ciphertext, kept in input order.
    let mut which = Vec::with_capacity(n);
    let mut counts = vec![0usize; s];
    for _ in 0..n {
        let b = rand::Rng::gen_range(sess.coins(), 0..s);
        which.push(b);
        counts[b] += 1;
    }
    let mut starts = Vec::with_capacity(s);
    let mut acc = 0;
    for c in &counts {
        starts.push(acc);
        acc += c;
    }
    let groups: Vec<_> = starts.iter().zip(&counts).map(|(&a, &c)| a..a + c).collect();
    let mut order = vec![input[0]; n];
    let mut next = starts;
    for (slot, b) in input.iter().zip(which) {
        order[next[b]] = *slot;
        next[b] += 1;
    }

    let (temps, mut queues) = spray(sess, ctx, &order, &groups, dests, &assign, q, &format!("rs{depth}"))?;
    for (temp, queue) in temps.iter().zip(queues.iter_mut()) {
        adjust(sess, *temp, queue)?;
    }
    if let Some(j) = queues.iter().position(|q| !q.is_empty()) {
        let real = parts[j].len();
        for t in temps {
            sess.store.free(t)?;
        }
        return Err(sess.abort(AbortReason::BucketOverflow { bucket: j, real, slots: s }));
    }
    ctx.trace.push(CallTrace { kind: CallKind::Rspray, depth, n, d: dests.len(), rounds: s, caches: q });
    Ok(temps.into_iter().zip(parts).map(|(temp, dests)| Bucket { temp, dests }).collect())
}

/// Standalone RSpray over `input` toward the sorted destination set `dests`
/// of a `Dest` array laid out by σ.
pub fn rspray(
    sess: &mut Session,
    input: &[SlotRef],
    dests: &[u32],
    sigma: &PermutationMap,
    s_budget: usize,
    cfg: &ShuffleConfig,
) -> Result<RsprayOutput> {
    cfg.validate()?;
    check_budget(s_budget)?;
    if input.is_empty() {
        return Err(Error::invalid("RSpray needs a nonempty input"));
    }
    if dests.len() > input.len() {
        return Err(Error::invalid(format!("{} destinations for {} input slots", dests.len(), input.len())));
    }
    let mut ctx = Ctx { sigma, dest: ArrayId(u32::MAX), cfg, trace: Vec::new() };
    let buckets = rspray_on(sess, &mut ctx, input, dests, s_budget, 0)?;
    Ok(RsprayOutput { buckets, trace: ctx.trace.pop().expect("rspray records its call") })
}

/// One recursion level below the top spray.
fn level(
    sess: &mut Session,
    ctx: &mut Ctx<'_>,
    input: &[SlotRef],
    dests: &[u32],
    s_budget: usize,
    depth: usize,
) -> Result<()> {
    let (n, d) = (input.len(), dests.len());
    if d <= s_budget * s_budget {
        return root_on(sess, ctx, input, dests, depth);
    }
    let eta = ctx.cfg.epsilon / (1.0 + ctx.cfg.epsilon);
    if d as f64 > (1.0 - eta / 2.0) * n as f64 {
        return Err(sess.abort(AbortReason::LevelSize { level: depth, real: d, slots: n }));
    }
    let buckets = rspray_on(sess, ctx, input, dests, s_budget, depth)?;
    for b in buckets {
        let len = sess.store.len(b.temp)?;
        let sub: Vec<SlotRef> = SlotRef::range(b.temp, len).collect();
        level(sess, ctx, &sub, &b.dests, s_budget, depth + 1)?;
        sess.store.free(b.temp)?;
    }
    Ok(())
}

/// Spray over `rounds` contiguous input groups into `caches` temp arrays of
/// `rounds` slots, followed by adjustment of every cache into its temp.
pub(crate) fn top_spray(
    sess: &mut Session,
    ctx: &mut Ctx<'_>,
    input: &[SlotRef],
    dests: &[u32],
    rounds: usize,
    caches: usize,
    depth: usize,
) -> Result<Vec<Bucket>> {
    let n = input.len();
    let (assign, parts) = partition(sess, dests, caches);
    if let Some((j, p)) = parts.iter().enumerate().find(|(_, p)| p.len() > rounds) {
        return Err(sess.abort(AbortReason::BucketOverflow { bucket: j, real: p.len(), slots: rounds }));
    }
    let groups: Vec<_> = balanced_ranges(n, rounds).collect();
    let (temps, mut queues) = spray(sess, ctx, input, &groups, dests, &assign, caches, &format!("sp{depth}"))?;
    for (temp, queue) in temps.iter().zip(queues.iter_mut()) {
        adjust(sess, *temp, queue)?;
    }
    if let Some(j) = queues.iter().position(|q| !q.is_empty()) {
        let real = parts[j].len();
        for t in temps {
            sess.store.free(t)?;
        }
        return Err(sess.abort(AbortReason::BucketOverflow { bucket: j, real, slots: rounds }));
    }
    ctx.trace.push(CallTrace { kind: CallKind::Spray, depth, n, d: dests.len(), rounds, caches });
    Ok(temps.into_iter().zip(parts).map(|(temp, dests)| Bucket { temp, dests }).collect())
}

/// Top spray with `⌈(1+ε)S⌉` caches, then one recursion per bucket; inputs
/// with at most `S²` destinations go straight to the root shuffle.
pub(crate) fn cache_shuffle_on(
    sess: &mut Session,
    ctx: &mut Ctx<'_>,
    input: &[SlotRef],
    dests: &[u32],
    s_budget: usize,
    depth: usize,
) -> Result<()> {
    let d = dests.len();
    if d <= s_budget * s_budget {
        return root_on(sess, ctx, input, dests, depth);
    }
    let rounds = input.len().div_ceil(s_budget);
    let caches = ceil_tol((1.0 + ctx.cfg.epsilon) * s_budget as f64);
    let buckets = top_spray(sess, ctx, input, dests, rounds, caches, depth)?;
    for b in buckets {
        let sub: Vec<SlotRef> = SlotRef::range(b.temp, rounds).collect();
        level(sess, ctx, &sub, &b.dests, s_budget, depth + 1)?;
        sess.store.free(b.temp)?;
    }
    Ok(())
}

/// Oblivious shuffle of `source` into a fresh `Dest` laid out under σ using
/// `O(S)` client memory and `O(N log_S N)` bandwidth.
pub fn cache_shuffle(
    sess: &mut Session,
    source: ArrayId,
    sigma: &PermutationMap,
    s_budget: usize,
    cfg: &ShuffleConfig,
) -> Result<Outcome> {
    cfg.validate()?;
    check_budget(s_budget)?;
    let n = sess.store.len(source)?;
    if sigma.len() != n || sigma.real_count() != n {
        return Err(Error::invalid(format!("σ has {} slots, source has {n}", sigma.len())));
    }
    cfg.check_gate("S", s_budget, n)?;
    let dest = sess.store.alloc("dest", n)?;
    let mut ctx = Ctx { sigma, dest, cfg, trace: Vec::new() };
    let input: Vec<SlotRef> = SlotRef::range(source, n).collect();
    let dests: Vec<u32> = (0..n as u32).collect();
    cache_shuffle_on(sess, &mut ctx, &input, &dests, s_budget, 0)?;
    Ok(Outcome { dest, metrics: sess.store.metrics(), trace: ctx.trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, random_permutation, Block, CipherKind};
    use crate::session::{sample_blocks, SessionConfig};
    use crate::spray::Gate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain() -> SessionConfig {
        SessionConfig { cipher: CipherKind::Plain, ..Default::default() }
    }

    /// Source with `n` slots holding the `d` real blocks whose σ-position is
    /// in `dests` (σ over `d` blocks into a Dest of `n` indices) plus dummies.
    fn rspray_fixture(n: usize, d: usize, seed: u64) -> (Session, Vec<SlotRef>, Vec<u32>, PermutationMap, Vec<Block>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_permutation(n, d, &mut rng).unwrap();
        let sigma = random_permutation(n, d, &mut rng).unwrap();
        let mut dests: Vec<u32> = (1..=d as u32).map(|l| sigma.position(l) as u32).collect();
        dests.sort();
        let mut sess = Session::new(keygen(seed), &plain(), n, seed);
        let blocks = sample_blocks(d, 16);
        let src = sess.setup_source("source", &blocks, &pi).unwrap();
        let input = SlotRef::range(src, n).collect();
        (sess, input, dests, sigma, blocks)
    }

    #[test]
    fn rspray_all_dummies_costs_4n() {
        let (mut sess, input, dests, sigma, _) = rspray_fixture(4, 0, 1);
        let out = rspray(&mut sess, &input, &dests, &sigma, 2, &ShuffleConfig::new(0.5)).unwrap();
        assert_eq!(sess.store.metrics().bandwidth, 16);
        assert_eq!(sess.store.metrics().max_cache, 0);
        assert_eq!(out.trace.bandwidth(), 16);
    }

    #[test]
    fn rspray_blocks_recoverable_from_their_bucket() {
        for seed in 0..20 {
            let (mut sess, input, dests, sigma, blocks) = rspray_fixture(8, 4, seed);
            let out = match rspray(&mut sess, &input, &dests, &sigma, 2, &ShuffleConfig::new(0.5)) {
                Ok(o) => o,
                Err(e) if e.is_abort() => continue,
                Err(e) => panic!("{e}"),
            };
            assert_eq!(sess.store.metrics().bandwidth, 32);
            for b in &out.buckets {
                assert_eq!(sess.store.len(b.temp).unwrap(), 4);
                let ids: Vec<u32> = (0..4).map(|i| sess.peek(b.temp, i).unwrap().id).filter(|&id| id != 0).collect();
                let mut want: Vec<u32> =
                    b.dests.iter().map(|&d| sigma.block_at(d as usize).unwrap()).collect();
                let mut got = ids.clone();
                got.sort();
                want.sort();
                assert_eq!(got, want);
                for id in ids {
                    assert_eq!(blocks[id as usize - 1].id, id);
                }
            }
        }
    }

    #[test]
    fn rspray_bandwidth_is_4n_when_s_divides_n() {
        for (n, d, s) in [(64, 32, 4), (256, 160, 16), (120, 60, 8)] {
            let (mut sess, input, dests, sigma, _) = rspray_fixture(n, d, n as u64);
            let out = rspray(&mut sess, &input, &dests, &sigma, s, &ShuffleConfig::new(0.5)).unwrap();
            assert_eq!(sess.store.metrics().bandwidth, 4 * n as u64);
            assert_eq!(out.buckets.len(), s);
        }
    }

    #[test]
    fn rspray_overflow_aborts() {
        // d = n leaves no dummy slack; some bucket is overfull w.h.p.
        let (mut sess, input, dests, sigma, _) = rspray_fixture(64, 64, 3);
        let err = rspray(&mut sess, &input, &dests, &sigma, 8, &ShuffleConfig::new(0.5)).unwrap_err();
        assert!(matches!(err.abort().unwrap().reason, AbortReason::BucketOverflow { .. }));
        assert!(err.abort().unwrap().metrics.aborted);
    }

    fn run(n: usize, s: usize, eps: f64, seed: u64) -> Result<(Session, Outcome)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let pi = random_permutation(n, n, &mut rng).unwrap();
        let sigma = random_permutation(n, n, &mut rng).unwrap();
        let mut sess = Session::new(keygen(seed), &plain(), n, seed);
        let blocks = sample_blocks(n, 16);
        let src = sess.setup_source("source", &blocks, &pi).unwrap();
        let cfg = ShuffleConfig::new(eps).with_gate(Gate::Off);
        let out = cache_shuffle(&mut sess, src, &sigma, s, &cfg)?;
        sess.verify_dest(out.dest, &sigma, &blocks).unwrap();
        Ok((sess, out))
    }

    #[test]
    fn square_input_is_a_single_root_call() {
        let (_, out) = run(256, 16, 0.5, 0).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].kind, CallKind::Root);
    }

    #[test]
    fn bandwidth_equals_sum_of_calls() {
        for seed in 0..5 {
            let (_, out) = run(4096, 8, 0.5, seed).unwrap();
            let sum: u64 = out.trace.iter().map(CallTrace::bandwidth).sum();
            assert_eq!(out.metrics.bandwidth, sum);
            assert!(out.trace.iter().any(|t| t.kind == CallKind::Rspray));
        }
    }

    #[test]
    fn rejects_tiny_budget() {
        assert!(matches!(run(16, 1, 0.5, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn strict_gate_rejects_small_s() {
        let mut sess = Session::new(keygen(0), &plain(), 64, 0);
        let blocks = sample_blocks(64, 16);
        let src = sess.setup_source("source", &blocks, &PermutationMap::identity(64)).unwrap();
        let cfg = ShuffleConfig::new(0.5).with_gate(Gate::Strict);
        let r = cache_shuffle(&mut sess, src, &PermutationMap::identity(64), 4, &cfg);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
