//! Square-Root ORAM over the block store, rebuilt after every `⌈√N⌉` queries
//! with the basic K-oblivious shuffle.
//!
//! Reads only; a write would replace the stash copy and is left out.

use crate::crypto::{random_permutation, Block, BlockId, Key, Permutation, PermutationMap};
use crate::error::{Error, Result};
use crate::kshuffle::{basic_phase2, BasicOptions};
use crate::session::{Session, SessionConfig};
use crate::storage::{ArrayId, Metrics};
use crate::util::{ceil_sqrt, SampleSet};

pub struct Oram {
    sess: Session,
    n: usize,
    epoch_len: usize,
    source: ArrayId,
    generation: usize,
    pos_map: PermutationMap,
    /// `stash[id-1]` holds the blocks fetched during the current epoch.
    stash: Vec<Option<Block>>,
    untouched: SampleSet,
    query_count: usize,
    rebuilds: usize,
    last_rebuild: Option<Metrics>,
}

impl Oram {
    /// Lays out `blocks` (ids `1..=N`) under a fresh random permutation.
    /// Setup moves are not counted.
    pub fn init(blocks: &[Block], key: Key, seed: u64, cfg: &SessionConfig) -> Result<Self> {
        let n = blocks.len();
        if n == 0 {
            return Err(Error::invalid("ORAM needs at least one block"));
        }
        let mut sess = Session::new(key, cfg, 2 * n, seed);
        let pos_map = random_permutation(n, n, sess.coins())?;
        let source = sess.setup_source("source0", blocks, &pos_map)?;
        Ok(Oram {
            sess,
            n,
            epoch_len: ceil_sqrt(n),
            source,
            generation: 0,
            pos_map,
            stash: vec![None; n],
            untouched: SampleSet::full(n),
            query_count: 0,
            rebuilds: 0,
            last_rebuild: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Queries per epoch, `⌈√N⌉`.
    pub fn epoch_len(&self) -> usize {
        self.epoch_len
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn stash_len(&self) -> usize {
        self.stash.iter().filter(|b| b.is_some()).count()
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    /// Moves of the most recent rebuild.
    pub fn last_rebuild(&self) -> Option<&Metrics> {
        self.last_rebuild.as_ref()
    }

    /// Cumulative metrics since setup.
    pub fn metrics(&self) -> Metrics {
        self.sess.store.metrics()
    }

    pub fn session(&self) -> &Session {
        &self.sess
    }

    pub fn source(&self) -> ArrayId {
        self.source
    }

    pub fn position_map(&self) -> &PermutationMap {
        &self.pos_map
    }

    /// Returns block `q`, downloading exactly one block; rebuilds when the
    /// epoch is full.
    pub fn query(&mut self, q: BlockId) -> Result<Block> {
        if q == 0 || q as usize > self.n {
            return Err(Error::invalid(format!("block id {q} outside 1..={}", self.n)));
        }
        let pos = if self.stash[q as usize - 1].is_some() {
            self.untouched
                .take_random(self.sess.coins())
                .ok_or_else(|| Error::InvalidState("no untouched position left in the epoch".into()))?
                as usize
        } else {
            let pos = self.pos_map.position(q);
            self.untouched.remove(pos as u32);
            pos
        };
        let b = self.sess.fetch(self.source, pos)?;
        let id = b.id as usize;
        self.stash[id - 1] = Some(b);
        self.query_count += 1;
        let out = self.stash[q as usize - 1].clone().expect("queried block is stashed");
        if self.query_count == self.epoch_len {
            self.rebuild()?;
        }
        Ok(out)
    }

    /// Reshuffles into a fresh array under a new permutation; the stash stands
    /// in for the touched-block downloads, so this costs `2N − ⌈√N⌉`.
    pub fn rebuild(&mut self) -> Result<()> {
        if self.query_count != self.epoch_len {
            return Err(Error::InvalidState(format!(
                "rebuild after {} of {} queries",
                self.query_count, self.epoch_len
            )));
        }
        let before = self.sess.store.metrics();
        let sigma = random_permutation(self.n, self.n, self.sess.coins())?;
        let dest = self.sess.store.alloc(format!("source{}", self.generation + 1), self.n)?;
        basic_phase2(
            &mut self.sess,
            self.source,
            &self.pos_map,
            &sigma,
            dest,
            &mut self.stash,
            &mut self.untouched,
            BasicOptions::default(),
        )?;
        self.sess.store.free(self.source)?;
        self.source = dest;
        self.generation += 1;
        self.pos_map = sigma;
        self.untouched = SampleSet::full(self.n);
        self.query_count = 0;
        self.rebuilds += 1;
        self.last_rebuild = Some(self.sess.store.metrics().since(&before));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use crate::session::sample_blocks;
    use crate::storage::{Event, TranscriptMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oram(n: usize, seed: u64, mode: TranscriptMode) -> (Oram, Vec<Block>) {
        let blocks = sample_blocks(n, 16);
        let cfg = SessionConfig { transcript: mode, ..Default::default() };
        (Oram::init(&blocks, keygen(seed), seed, &cfg).unwrap(), blocks)
    }

    #[test]
    fn single_block() {
        let (mut o, blocks) = oram(1, 0, TranscriptMode::Off);
        assert_eq!(o.position_map().table(), &[1]);
        for _ in 0..3 {
            assert_eq!(o.query(1).unwrap(), blocks[0]);
        }
        assert_eq!(o.rebuilds(), 3);
    }

    #[test]
    fn setup_is_free_and_scan_decrypts() {
        let (o, blocks) = oram(50, 1, TranscriptMode::Off);
        assert_eq!(o.metrics().bandwidth, 0);
        for b in &blocks {
            assert_eq!(&o.session().peek(o.source(), o.position_map().position(b.id)).unwrap(), b);
        }
    }

    #[test]
    fn sixteen_blocks_epoch_accounting() {
        let (mut o, blocks) = oram(16, 2, TranscriptMode::Off);
        for (i, q) in [3u32, 3, 9, 1].into_iter().enumerate() {
            let before = o.metrics();
            assert_eq!(o.query(q).unwrap(), blocks[q as usize - 1]);
            let cost = o.metrics().since(&before).bandwidth;
            if i < 3 {
                assert_eq!(cost, 1);
            } else {
                assert_eq!(cost, 1 + 28);
            }
        }
        assert_eq!(o.last_rebuild().unwrap().bandwidth, 28);
        assert_eq!(o.metrics().bandwidth, 32);
        assert_eq!(o.session().store.ledger().held(), 0);
    }

    #[test]
    fn random_queries_stay_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [2usize, 10, 100, 1024] {
            let (mut o, blocks) = oram(n, n as u64, TranscriptMode::Off);
            for _ in 0..10 * ceil_sqrt(n) {
                let q = rng.gen_range(1..=n as BlockId);
                assert_eq!(o.query(q).unwrap(), blocks[q as usize - 1]);
            }
            assert_eq!(o.metrics().bandwidth, (o.rebuilds() * 2 * n + o.query_count()) as u64);
        }
    }

    #[test]
    fn epoch_positions_are_distinct() {
        let (mut o, _) = oram(64, 4, TranscriptMode::Full);
        for q in [5u32, 5, 5, 7, 5, 7, 1, 1] {
            o.query(q).unwrap();
        }
        let src = o.source();
        let ev = o.session().store.transcript().events();
        // The rebuild's reads come first and the new epoch starts empty.
        assert!(ev.iter().all(|e| e.array() != src || !e.is_download()));
        let downs: Vec<u64> = ev[..8]
            .iter()
            .map(|e| match e {
                Event::Download { index, .. } => *index,
                _ => panic!("queries only download"),
            })
            .collect();
        let mut sorted = downs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), downs.len());
    }

    #[test]
    fn early_rebuild_is_rejected() {
        let (mut o, _) = oram(16, 5, TranscriptMode::Off);
        o.query(1).unwrap();
        assert!(matches!(o.rebuild(), Err(Error::InvalidState(_))));
        assert!(matches!(o.query(17), Err(Error::InvalidArgument(_))));
    }
}
