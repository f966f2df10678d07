//! One shuffle execution: a server store, a cipher and two random streams.
//!
//! The algorithm's coins and the encryption nonces come from separate
//! ChaCha streams of the same seed, so the coins (and hence the move
//! transcript) do not depend on which cipher backend is used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{Block, BlockId, Cipher, CipherKind, Ciphertext, Key, Permutation, PermutationMap, DEFAULT_BLOCK_SIZE};
use crate::error::{Abort, AbortReason, Error, Result};
use crate::storage::{ArrayId, ServerStore, Slot, TranscriptMode};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub block_size: usize,
    pub cipher: CipherKind,
    pub transcript: TranscriptMode,
    /// Server capacity as a multiple of the number of source slots.
    pub capacity_factor: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            block_size: DEFAULT_BLOCK_SIZE,
            cipher: CipherKind::Aead,
            transcript: TranscriptMode::Off,
            capacity_factor: 8,
        }
    }
}

/// Slack added to the capacity so tiny inputs still fit their temp arrays.
const CAPACITY_SLACK: usize = 64;

pub struct Session {
    pub store: ServerStore,
    cipher: Cipher,
    coins: ChaCha8Rng,
    nonces: ChaCha8Rng,
    dummy: Block,
}

impl Session {
    /// Session sized for a source array of `slots` slots.
    pub fn new(key: Key, cfg: &SessionConfig, slots: usize, seed: u64) -> Self {
        let coins = ChaCha8Rng::seed_from_u64(seed);
        let mut nonces = ChaCha8Rng::seed_from_u64(seed);
        nonces.set_stream(1);
        Session {
            store: ServerStore::new(cfg.capacity_factor * slots + CAPACITY_SLACK, cfg.transcript),
            cipher: Cipher::with_kind(key, cfg.block_size, cfg.cipher),
            coins,
            nonces,
            dummy: Block::dummy(cfg.block_size),
        }
    }

    pub fn cipher(&self) -> &Cipher {
        &self.cipher
    }

    pub fn block_size(&self) -> usize {
        self.cipher.block_size()
    }

    /// The algorithm's random coins.
    pub fn coins(&mut self) -> &mut ChaCha8Rng {
        &mut self.coins
    }

    pub fn seal(&mut self, block: &Block) -> Result<Ciphertext> {
        self.cipher.encrypt(block, &mut self.nonces)
    }

    /// Downloads and decrypts one slot; the block is now client-resident.
    pub fn fetch(&mut self, array: ArrayId, idx: usize) -> Result<Block> {
        let ct = self.store.download(array, idx)?;
        self.cipher.decrypt(&ct)
    }

    /// Re-encrypts a client-resident block and uploads it, releasing it.
    pub fn put(&mut self, array: ArrayId, idx: usize, block: &Block) -> Result<()> {
        let ct = self.cipher.encrypt(block, &mut self.nonces)?;
        self.store.upload(array, idx, ct)?;
        self.store.ledger_mut().release(1);
        Ok(())
    }

    /// Uploads a fresh encryption of the all-zero dummy.
    pub fn put_dummy(&mut self, array: ArrayId, idx: usize) -> Result<()> {
        let ct = self.cipher.encrypt(&self.dummy, &mut self.nonces)?;
        self.store.upload(array, idx, ct)
    }

    /// Drops `n` client-resident blocks without uploading them.
    pub fn discard(&mut self, n: usize) {
        self.store.ledger_mut().release(n);
    }

    /// Marks the run aborted and wraps the reason with the current metrics.
    pub fn abort(&mut self, reason: AbortReason) -> Error {
        self.store.mark_aborted();
        log::debug!("abort: {reason}");
        Error::Aborted(Box::new(Abort { reason, metrics: self.store.metrics() }))
    }

    /// Lays out `Source[π(l)] = Enc(B_l)` without counting any moves; ⊥ slots
    /// of `pi` receive dummies.
    pub fn setup_source(&mut self, name: &str, blocks: &[Block], pi: &PermutationMap) -> Result<ArrayId> {
        if blocks.len() != pi.real_count() {
            return Err(Error::invalid(format!(
                "{} blocks for a permutation of {} real slots",
                blocks.len(),
                pi.real_count()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.id as usize != i + 1 {
                return Err(Error::invalid(format!("block at index {i} has id {}", b.id)));
            }
        }
        let array = self.store.alloc(name, pi.len())?;
        for slot in 0..pi.len() {
            let ct = match pi.block_at(slot) {
                Some(id) => self.cipher.encrypt(&blocks[id as usize - 1], &mut self.nonces)?,
                None => self.cipher.encrypt(&self.dummy, &mut self.nonces)?,
            };
            self.store.install(array, slot, ct)?;
        }
        Ok(array)
    }

    /// Uncounted decryption of a slot, for test oracles and result readout.
    pub fn peek(&self, array: ArrayId, idx: usize) -> Result<Block> {
        match self.store.inspect(array, idx)? {
            Slot::Ct(ct) => self.cipher.decrypt(ct),
            Slot::Lanes(lanes) => {
                let ct = crate::field::lanes_to_ct(lanes, self.cipher.ciphertext_len())
                    .map_err(|_| Error::CorruptCiphertext)?;
                self.cipher.decrypt(&ct)
            }
            Slot::Empty => Err(Error::violation(format!("peek of empty slot {idx}"))),
        }
    }

    /// Checks `decrypt(Dest[σ(l)]).id == l` for every real block.
    pub fn verify_dest(&self, dest: ArrayId, sigma: &PermutationMap, blocks: &[Block]) -> Result<()> {
        for l in 1..=sigma.real_count() as BlockId {
            let got = self.peek(dest, sigma.position(l))?;
            if got != blocks[l as usize - 1] {
                return Err(Error::InvalidState(format!(
                    "Dest[{}] holds block {} instead of {l}",
                    sigma.position(l),
                    got.id
                )));
            }
        }
        Ok(())
    }
}

/// Blocks `1..=n` with payloads derived from the id.
pub fn sample_blocks(n: usize, block_size: usize) -> Vec<Block> {
    (1..=n as BlockId)
        .map(|id| {
            let bytes = id.to_le_bytes();
            Block::new(id, (0..block_size).map(|i| bytes[i % 4] ^ (i as u8).wrapping_mul(31)).collect::<Vec<u8>>())
        })
        .collect()
}
