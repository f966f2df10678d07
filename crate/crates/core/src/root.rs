//! CacheShuffleRoot: spray into `q = ⌈(1+ε/2)√n⌉` caches over `s = ⌈√n⌉`
//! contiguous input groups, then recalibrate each bucket into `Dest`.

use crate::crypto::{Permutation, PermutationMap};
use crate::error::{Error, Result};
use crate::session::Session;
use crate::spray::{partition, recalibrate, spray, CallKind, CallTrace, Ctx, Outcome, ShuffleConfig, SlotRef};
use crate::storage::ArrayId;
use crate::util::{balanced_ranges, ceil_sqrt, ceil_tol};

/// Rounds and caches used by the root shuffle on `n` input slots.
pub fn root_params(n: usize, epsilon: f64) -> (usize, usize) {
    let s = ceil_sqrt(n);
    let q = ceil_tol((1.0 + epsilon / 2.0) * (n as f64).sqrt()).max(1);
    (s, q)
}

/// Exact move count `n + 2·s·q + d` of a root shuffle that does not abort.
pub fn root_bandwidth(n: usize, d: usize, epsilon: f64) -> u64 {
    let (s, q) = root_params(n, epsilon);
    (n + 2 * s * q + d) as u64
}

/// Shuffles the real blocks among `input` into `ctx.dest` at the sorted
/// indices `dests`.
pub(crate) fn root_on(sess: &mut Session, ctx: &mut Ctx<'_>, input: &[SlotRef], dests: &[u32], depth: usize) -> Result<()> {
    let n = input.len();
    if n == 0 {
        if dests.is_empty() {
            return Ok(());
        }
        return Err(Error::violation("root shuffle with destinations but no input"));
    }
    let (s, q) = root_params(n, ctx.cfg.epsilon);
    let (assign, parts) = partition(sess, dests, q);
    let groups: Vec<_> = balanced_ranges(n, s).collect();
    let (temps, queues) = spray(sess, ctx, input, &groups, dests, &assign, q, &format!("root{depth}"))?;
    for ((temp, queue), part) in temps.into_iter().zip(queues).zip(&parts) {
        recalibrate(sess, ctx, temp, queue, part)?;
        sess.store.free(temp)?;
    }
    ctx.trace.push(CallTrace { kind: CallKind::Root, depth, n, d: dests.len(), rounds: s, caches: q });
    Ok(())
}

/// Oblivious shuffle of `source` (laid out under π) into a fresh `Dest`
/// array laid out under σ, with `O(√N)` client memory.
pub fn cache_shuffle_root(
    sess: &mut Session,
    source: ArrayId,
    sigma: &PermutationMap,
    cfg: &ShuffleConfig,
) -> Result<Outcome> {
    cfg.validate()?;
    let n = sess.store.len(source)?;
    if sigma.len() != n || sigma.real_count() != n {
        return Err(Error::invalid(format!("σ has {} slots, source has {n}", sigma.len())));
    }
    let dest = sess.store.alloc("dest", n)?;
    let mut ctx = Ctx { sigma, dest, cfg, trace: Vec::new() };
    let input: Vec<SlotRef> = SlotRef::range(source, n).collect();
    let dests: Vec<u32> = (0..n as u32).collect();
    root_on(sess, &mut ctx, &input, &dests, 0)?;
    Ok(Outcome { dest, metrics: sess.store.metrics(), trace: ctx.trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, random_permutation, CipherKind};
    use crate::session::{sample_blocks, SessionConfig};
    use crate::storage::TranscriptMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(n: usize, eps: f64, seed: u64, mode: TranscriptMode) -> (Session, Outcome, PermutationMap) {
        let cfg = SessionConfig { transcript: mode, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let pi = random_permutation(n, n, &mut rng).unwrap();
        let sigma = random_permutation(n, n, &mut rng).unwrap();
        let mut sess = Session::new(keygen(seed), &cfg, n, seed);
        let blocks = sample_blocks(n, cfg.block_size);
        let src = sess.setup_source("source", &blocks, &pi).unwrap();
        let out = cache_shuffle_root(&mut sess, src, &sigma, &ShuffleConfig::new(eps)).unwrap();
        sess.verify_dest(out.dest, &sigma, &blocks).unwrap();
        (sess, out, sigma)
    }

    #[test]
    fn params_match_closed_form() {
        assert_eq!(root_params(10_000, 1.0), (100, 150));
        assert_eq!(root_bandwidth(10_000, 10_000, 1.0), 50_000);
        assert_eq!(root_params(1024, 0.5), (32, 40));
        assert_eq!(root_params(1, 1.0), (1, 2));
    }

    #[test]
    fn single_block() {
        let (_, out, _) = run(1, 1.0, 0, TranscriptMode::Off);
        assert_eq!(out.metrics.bandwidth, 1 + 2 * 2 + 1);
    }

    #[test]
    fn four_blocks_round_shape() {
        // s = 2 rounds, q = ⌈1.25·2⌉ = 3 caches at ε = 0.5.
        let (sess, out, _) = run(4, 0.5, 3, TranscriptMode::Full);
        let ev = sess.store.transcript().events();
        let first_round: Vec<bool> = ev[..5].iter().map(|e| e.is_download()).collect();
        assert_eq!(first_round, vec![true, true, false, false, false]);
        assert_eq!(out.metrics.bandwidth, 4 + 2 * 2 * 3 + 4);
    }

    #[test]
    fn exact_bandwidth_small_sizes() {
        for n in [2usize, 3, 5, 10, 16, 17, 63, 64, 100] {
            for eps in [0.25, 0.5, 1.0] {
                let (_, out, _) = run(n, eps, n as u64, TranscriptMode::Off);
                assert_eq!(out.metrics.bandwidth, root_bandwidth(n, n, eps), "n={n} eps={eps}");
                let (s, q) = root_params(n, eps);
                let delta = crate::util::default_delta(eps);
                assert!(out.metrics.client_high_water as f64 <= delta * q as f64 + s as f64);
            }
        }
    }

    #[test]
    fn transcript_is_sigma_independent_for_fixed_seed() {
        let n = 50;
        let cfg = SessionConfig { transcript: TranscriptMode::Full, cipher: CipherKind::Plain, ..Default::default() };
        let blocks = sample_blocks(n, cfg.block_size);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pi = random_permutation(n, n, &mut rng).unwrap();
        let mut events = Vec::new();
        for _ in 0..2 {
            let sigma = random_permutation(n, n, &mut rng).unwrap();
            let mut sess = Session::new(keygen(1), &cfg, n, 99);
            let src = sess.setup_source("source", &blocks, &pi).unwrap();
            cache_shuffle_root(&mut sess, src, &sigma, &ShuffleConfig::new(1.0)).unwrap();
            events.push(sess.store.transcript().events().to_vec());
        }
        assert_eq!(events[0], events[1]);
    }

    #[test]
    fn rejects_mismatched_sigma() {
        let mut sess = Session::new(keygen(0), &SessionConfig::default(), 4, 0);
        let blocks = sample_blocks(4, 16);
        let src = sess.setup_source("source", &blocks, &PermutationMap::identity(4)).unwrap();
        let r = cache_shuffle_root(&mut sess, src, &PermutationMap::identity(3), &ShuffleConfig::new(1.0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let r = cache_shuffle_root(&mut sess, src, &PermutationMap::identity(4), &ShuffleConfig::new(0.0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
