//! KCacheShuffleDummy: a K-oblivious shuffle for sources holding `N` real and
//! `D` dummy blocks. Each random partition of the destination indices is
//! written by one server-side polynomial evaluation whose coefficient count is
//! fixed, so only real blocks cost an upload-equivalent.

use serde::{Deserialize, Serialize};

use crate::crypto::{Block, Permutation, PermutationMap};
use crate::error::{AbortReason, Error, Result};
use crate::field::{ct_to_lanes, lane_count, Fp};
use crate::kshuffle::TouchedSet;
use crate::poly::lagrange_interpolate;
use crate::session::Session;
use crate::spray::{partition, Gate, Outcome, ShuffleConfig};
use crate::storage::ArrayId;
use crate::util::{ceil_tol, SampleSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DummyShuffleConfig {
    /// Target partition size `L`.
    pub l: usize,
    pub epsilon: f64,
    pub gate: Gate,
}

impl DummyShuffleConfig {
    pub fn new(l: usize, epsilon: f64) -> Self {
        DummyShuffleConfig { l, epsilon, gate: Gate::Warn }
    }

    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = gate;
        self
    }

    pub fn num_partitions(&self, m: usize) -> usize {
        m.div_ceil(self.l).max(1)
    }

    /// Interpolation points per partition, `⌈(1+ε)ρL⌉` with `ρ = n/m`.
    pub fn points(&self, n: usize, m: usize) -> usize {
        ceil_tol((1.0 + self.epsilon) * n as f64 / m as f64 * self.l as f64).max(1)
    }

    /// Exact bandwidth of a run that does not abort.
    pub fn bandwidth(&self, n: usize, m: usize) -> u64 {
        (m + self.num_partitions(m) * self.points(n, m)) as u64
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.l == 0 {
            return Err(Error::invalid("partition size L must be positive"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        ShuffleConfig::new(self.epsilon).with_gate(self.gate).check_gate("L", self.l, n)
    }
}

#[derive(Clone, Debug)]
pub struct DummyOutcome {
    pub outcome: Outcome,
    pub partitions: usize,
    pub points: usize,
}

/// Shuffles the `N + D` slots of `source` (laid out under π) into a fresh
/// `Dest` of the same length so that real block `l` lands at `σ(l)`.
/// Dummy slots of `Dest` hold arbitrary field values.
pub fn k_cache_shuffle_dummy(
    sess: &mut Session,
    source: ArrayId,
    pi: &PermutationMap,
    sigma: &PermutationMap,
    touched: &TouchedSet,
    cfg: &DummyShuffleConfig,
) -> Result<DummyOutcome> {
    let m = sess.store.len(source)?;
    let n = pi.real_count();
    if pi.len() != m || sigma.len() != m || sigma.real_count() != n || n == 0 {
        return Err(Error::invalid(format!(
            "π ({}/{}) and σ ({}/{}) must map the {m} source slots onto the same nonzero number of real blocks",
            pi.real_count(),
            pi.len(),
            sigma.real_count(),
            sigma.len()
        )));
    }
    touched.validate(pi)?;
    cfg.validate(n)?;
    let parts_n = cfg.num_partitions(m);
    let pts = cfg.points(n, m);
    let size_cap = (1.0 + cfg.epsilon) * cfg.l as f64;
    let lanes = lane_count(sess.cipher().ciphertext_len());
    let dest = sess.store.alloc("dest", m)?;

    let mut held: Vec<Option<Block>> = vec![None; n];
    let mut tb_down = SampleSet::full(m);
    for pos in touched.positions(pi) {
        tb_down.remove(pos as u32);
        let b = sess.fetch(source, pos)?;
        match pi.block_at(pos) {
            Some(id) => held[id as usize - 1] = Some(b),
            None => sess.discard(1),
        }
    }

    let all: Vec<u32> = (0..m as u32).collect();
    let (_, parts) = partition(sess, &all, parts_n);
    for (i, part) in parts.iter().enumerate() {
        if part.len() as f64 > size_cap + 1e-9 {
            return Err(sess.abort(AbortReason::PartitionTooLarge { partition: i, size: part.len(), cap: size_cap as usize }));
        }
        let real = part.iter().filter(|&&d| sigma.block_at(d as usize).is_some()).count();
        if real > pts {
            return Err(sess.abort(AbortReason::TooManyReal { partition: i, real, cap: pts }));
        }
        for &d in part {
            let needed = sigma.block_at(d as usize).filter(|&who| held[who as usize - 1].is_none());
            let pos = match needed {
                Some(who) => {
                    let pos = pi.position(who);
                    if !tb_down.remove(pos as u32) {
                        return Err(Error::violation(format!("block {who} neither held nor downloadable")));
                    }
                    Some(pos)
                }
                None => tb_down.take_random(sess.coins()).map(|p| p as usize),
            };
            if let Some(pos) = pos {
                let b = sess.fetch(source, pos)?;
                match pi.block_at(pos) {
                    Some(id) => held[id as usize - 1] = Some(b),
                    None => sess.discard(1),
                }
            }
        }
        let mut points: Vec<(Fp, Vec<Fp>)> = Vec::with_capacity(pts);
        for &d in part {
            if let Some(who) = sigma.block_at(d as usize) {
                let b = held[who as usize - 1]
                    .take()
                    .ok_or_else(|| Error::violation(format!("block {who} missing for Dest[{d}]")))?;
                let ct = sess.seal(&b)?;
                sess.discard(1);
                points.push((Fp::new(d as u64), ct_to_lanes(&ct)));
            }
        }
        let pads = part.iter().filter(|&&d| sigma.block_at(d as usize).is_none()).map(|&d| d as u64);
        let outside = (m as u64..).take(pts);
        for x in pads.chain(outside).take(pts - points.len()) {
            let y = (0..lanes).map(|_| Fp::random(sess.coins())).collect();
            points.push((Fp::new(x), y));
        }
        let poly = lagrange_interpolate(&points)?;
        let idx: Vec<usize> = part.iter().map(|&d| d as usize).collect();
        sess.store.server_eval(dest, &idx, &poly)?;
    }
    Ok(DummyOutcome {
        outcome: Outcome { dest, metrics: sess.store.metrics(), trace: Vec::new() },
        partitions: parts_n,
        points: pts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, random_permutation, CipherKind};
    use crate::session::{sample_blocks, SessionConfig};
    use crate::storage::{Event, TranscriptMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(n: usize, d: usize, k: usize, l: usize, eps: f64, seed: u64) -> (Result<DummyOutcome>, Session) {
        let m = n + d;
        let scfg = SessionConfig { cipher: CipherKind::Plain, transcript: TranscriptMode::Full, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        let pi = random_permutation(m, n, &mut rng).unwrap();
        let sigma = random_permutation(m, n, &mut rng).unwrap();
        let touched = TouchedSet::random(n, k, &mut rng).unwrap();
        let mut sess = Session::new(keygen(seed), &scfg, m, seed);
        let blocks = sample_blocks(n, 16);
        let src = sess.setup_source("source", &blocks, &pi).unwrap();
        let cfg = DummyShuffleConfig::new(l, eps).with_gate(Gate::Off);
        let out = k_cache_shuffle_dummy(&mut sess, src, &pi, &sigma, &touched, &cfg);
        if let Ok(o) = &out {
            sess.verify_dest(o.outcome.dest, &sigma, &blocks).unwrap();
        }
        (out, sess)
    }

    #[test]
    fn bandwidth_identity_and_correctness() {
        for (n, d, k, l) in [(512usize, 512usize, 8usize, 64usize), (300, 100, 0, 50), (64, 0, 4, 16), (100, 900, 10, 128)] {
            let mut ok = 0;
            for seed in 0..5 {
                let (out, _) = run(n, d, k, l, 0.25, seed);
                match out {
                    Ok(o) => {
                        ok += 1;
                        let cfg = DummyShuffleConfig::new(l, 0.25);
                        assert_eq!(o.outcome.metrics.bandwidth, cfg.bandwidth(n, n + d));
                        assert_eq!(o.outcome.metrics.downloads, (n + d) as u64);
                        assert_eq!(o.outcome.metrics.uploads, 0);
                    }
                    Err(e) => assert!(e.is_abort(), "{e}"),
                }
            }
            assert!(ok > 0, "n={n} d={d}");
        }
    }

    #[test]
    fn touched_dummy_slots_are_downloaded_first() {
        let (n, m) = (64, 128);
        let scfg = SessionConfig { cipher: CipherKind::Plain, transcript: TranscriptMode::Full, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pi = random_permutation(m, n, &mut rng).unwrap();
        let sigma = random_permutation(m, n, &mut rng).unwrap();
        let dummies: Vec<usize> = (0..m).filter(|&s| pi.block_at(s).is_none()).take(3).collect();
        let touched = TouchedSet::new(vec![1, 2]).unwrap().with_dummy_slots(dummies.clone());
        let mut sess = Session::new(keygen(5), &scfg, m, 5);
        let blocks = sample_blocks(n, 16);
        let src = sess.setup_source("source", &blocks, &pi).unwrap();
        let cfg = DummyShuffleConfig::new(64, 1.0).with_gate(Gate::Off);
        let out = k_cache_shuffle_dummy(&mut sess, src, &pi, &sigma, &touched, &cfg).unwrap();
        sess.verify_dest(out.outcome.dest, &sigma, &blocks).unwrap();
        let first: Vec<u64> = sess.store.transcript().events()[..5]
            .iter()
            .map(|e| match e {
                Event::Download { index, .. } => *index,
                _ => panic!("expected download"),
            })
            .collect();
        let mut want: Vec<u64> = touched.positions(&pi).into_iter().map(|p| p as u64).collect();
        want.truncate(5);
        assert_eq!(first, want);
    }

    #[test]
    fn one_eval_per_partition_even_when_empty() {
        // L = 1: three partitions, and some are usually empty.
        let (out, sess) = run(2, 1, 0, 1, 3.0, 2);
        let out = out.unwrap();
        let evals = sess.store.transcript().events().iter().filter(|e| matches!(e, Event::Eval { .. })).count();
        assert_eq!(evals, out.partitions);
    }

    #[test]
    fn too_many_real_aborts() {
        // L = 4, ε tiny: a partition with more than ⌈(1+ε)·½·4⌉ = 3 reals aborts.
        let mut aborted = 0;
        for seed in 0..20 {
            let (out, _) = run(32, 32, 0, 4, 0.01, seed);
            if let Err(e) = out {
                assert!(e.is_abort());
                aborted += 1;
            }
        }
        assert!(aborted > 0);
    }

    #[test]
    fn rejects_bad_config() {
        let (out, _) = run(16, 16, 0, 0, 0.25, 0);
        assert!(matches!(out, Err(Error::InvalidArgument(_))));
    }
}
