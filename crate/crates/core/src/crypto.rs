//! Block encryption and permutation maps.
//!
//! Every ciphertext has the same length `C = NONCE_LEN + ID_LEN + B + TAG_LEN`
//! for a fixed payload size `B`; the block id (with `0` reserved for dummies)
//! travels inside the encrypted body, so a dummy is only recognisable after
//! decryption.

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce, Tag};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// 1-based block identifier; [`DUMMY`] marks a dummy block.
pub type BlockId = u32;

pub const DUMMY: BlockId = 0;

pub const NONCE_LEN: usize = 12;
pub const ID_LEN: usize = 4;
pub const TAG_LEN: usize = 16;
pub const DEFAULT_KEY_BITS: usize = 128;
pub const DEFAULT_BLOCK_SIZE: usize = 16;

/// Length of every ciphertext for payload size `block_size`.
pub const fn ciphertext_len(block_size: usize) -> usize {
    NONCE_LEN + ID_LEN + block_size + TAG_LEN
}

#[derive(Clone, PartialEq, Eq)]
pub struct Key {
    bytes: Vec<u8>,
}

impl Key {
    pub fn bits(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl std::fmt::Debug for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Key({} bits)", self.bits())
    }
}

/// Deterministic 128-bit key derived from `seed`.
pub fn keygen(seed: u64) -> Key {
    keygen_with_bits(seed, DEFAULT_KEY_BITS)
}

pub fn keygen_with_bits(seed: u64, bits: usize) -> Key {
    assert!(bits > 0 && bits % 8 == 0, "key size must be a positive multiple of 8");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut bytes = vec![0u8; bits / 8];
    rng.fill_bytes(&mut bytes);
    Key { bytes }
}

/// Block payload; sizes up to 32 bytes stay inline.
pub type Payload = SmallVec<[u8; 32]>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub payload: Payload,
}

impl Block {
    pub fn new(id: BlockId, payload: impl AsRef<[u8]>) -> Self {
        Block { id, payload: SmallVec::from_slice(payload.as_ref()) }
    }

    /// All-zero dummy of payload size `block_size`.
    pub fn dummy(block_size: usize) -> Self {
        Block { id: DUMMY, payload: SmallVec::from_elem(0, block_size) }
    }

    pub fn is_dummy(&self) -> bool {
        self.id == DUMMY
    }
}

/// Fixed-length encrypted block: `nonce || E(id || payload) || tag`.
#[derive(PartialEq, Eq, Hash)]
pub struct Ciphertext(SmallVec<[u8; 48]>);

impl Clone for Ciphertext {
    // SmallVec's derived clone copies byte by byte.
    fn clone(&self) -> Self {
        Ciphertext(SmallVec::from_slice(&self.0))
    }
}

impl Ciphertext {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Ciphertext(SmallVec::from_slice(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn nonce(&self) -> &[u8] {
        &self.0[..NONCE_LEN.min(self.0.len())]
    }
}

impl std::fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Ciphertext(")?;
        for b in self.0.iter().take(8) {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..; {} bytes)", self.0.len())
    }
}

/// How blocks are sealed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherKind {
    /// ChaCha20-Poly1305 with a random 96-bit nonce per encryption.
    #[default]
    Aead,
    /// Same layout, random nonce and key check tag, but the body is stored in
    /// the clear. Only for large statistical runs where the move pattern is the
    /// object of study; the shuffle's coins are identical under both kinds.
    Plain,
}

enum Engine {
    Aead(Box<ChaCha20Poly1305>),
    Plain([u8; TAG_LEN]),
}

fn plain_tag(check: &[u8; TAG_LEN], nonce: &[u8]) -> [u8; TAG_LEN] {
    let mut t = *check;
    for (i, b) in t.iter_mut().enumerate() {
        *b ^= nonce[i % NONCE_LEN];
    }
    t
}

/// A key bound to a payload size and a sealing engine.
pub struct Cipher {
    key: Key,
    block_size: usize,
    kind: CipherKind,
    engine: Engine,
}

impl Cipher {
    pub fn new(key: Key, block_size: usize) -> Self {
        Self::with_kind(key, block_size, CipherKind::Aead)
    }

    pub fn with_kind(key: Key, block_size: usize, kind: CipherKind) -> Self {
        let engine = match kind {
            CipherKind::Aead => {
                let mut h = Sha256::new();
                h.update(b"cacheshuffle/aead-key");
                h.update(key.as_bytes());
                let derived = h.finalize();
                Engine::Aead(Box::new(ChaCha20Poly1305::new(&derived)))
            }
            CipherKind::Plain => {
                let mut h = Sha256::new();
                h.update(b"cacheshuffle/plain-check");
                h.update(key.as_bytes());
                let mut check = [0u8; TAG_LEN];
                check.copy_from_slice(&h.finalize()[..TAG_LEN]);
                Engine::Plain(check)
            }
        };
        Cipher { key, block_size, kind, engine }
    }

    pub fn key(&self) -> &Key {
        &self.key
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn kind(&self) -> CipherKind {
        self.kind
    }

    pub fn ciphertext_len(&self) -> usize {
        ciphertext_len(self.block_size)
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, block: &Block, rng: &mut R) -> Result<Ciphertext> {
        if block.payload.len() != self.block_size {
            return Err(Error::InvalidBlock { expected: self.block_size, actual: block.payload.len() });
        }
        let mut out: SmallVec<[u8; 48]> = SmallVec::from_elem(0, self.ciphertext_len());
        let (nonce, rest) = out.split_at_mut(NONCE_LEN);
        nonce[..8].copy_from_slice(&rng.next_u64().to_le_bytes());
        nonce[8..].copy_from_slice(&rng.next_u32().to_le_bytes());
        let (body, tag) = rest.split_at_mut(ID_LEN + self.block_size);
        body[..ID_LEN].copy_from_slice(&block.id.to_le_bytes());
        body[ID_LEN..].copy_from_slice(&block.payload);
        match &self.engine {
            Engine::Aead(aead) => {
                let t = aead
                    .encrypt_in_place_detached(Nonce::from_slice(nonce), b"", body)
                    .map_err(|_| Error::CorruptCiphertext)?;
                tag.copy_from_slice(&t);
            }
            Engine::Plain(check) => {
                tag.copy_from_slice(&plain_tag(check, nonce));
            }
        }
        Ok(Ciphertext(out))
    }

    pub fn decrypt(&self, ct: &Ciphertext) -> Result<Block> {
        if ct.len() != self.ciphertext_len() {
            return Err(Error::CorruptCiphertext);
        }
        let bytes = ct.as_bytes();
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
        let block_from = |plain: &[u8]| {
            let id = u32::from_le_bytes(plain[..ID_LEN].try_into().expect("id bytes"));
            Block { id, payload: SmallVec::from_slice(&plain[ID_LEN..]) }
        };
        match &self.engine {
            Engine::Aead(aead) => {
                let mut plain: SmallVec<[u8; 48]> = SmallVec::from_slice(body);
                aead.decrypt_in_place_detached(Nonce::from_slice(nonce), b"", &mut plain, Tag::from_slice(tag))
                    .map_err(|_| Error::CorruptCiphertext)?;
                Ok(block_from(&plain))
            }
            Engine::Plain(check) => {
                if tag != plain_tag(check, nonce) {
                    return Err(Error::CorruptCiphertext);
                }
                Ok(block_from(body))
            }
        }
    }
}

/// Read access to a slot allocation `[M] -> [N] ∪ {⊥}` and its inverse.
///
/// Explicit tables back this today; a small-domain PRP can implement the same
/// trait without touching the shuffles.
pub trait Permutation {
    /// Number of slots `M`.
    fn len(&self) -> usize;
    /// Number of real blocks `N`.
    fn real_count(&self) -> usize;
    /// Slot holding block `id` (1-based).
    fn position(&self, id: BlockId) -> usize;
    /// Block stored in `slot`, or `None` for a dummy slot.
    fn block_at(&self, slot: usize) -> Option<BlockId>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationMap {
    /// slot -> block id, `DUMMY` for ⊥
    table: Vec<BlockId>,
    /// block id - 1 -> slot
    positions: Vec<u32>,
}

impl PermutationMap {
    /// Builds a map from its slot table. Every id in `1..=n` must appear once,
    /// every other entry must be `DUMMY`.
    pub fn from_table(table: Vec<BlockId>) -> Result<Self> {
        let n = table.iter().filter(|&&id| id != DUMMY).count();
        let mut positions = vec![u32::MAX; n];
        for (slot, &id) in table.iter().enumerate() {
            if id == DUMMY {
                continue;
            }
            let i = id as usize;
            if i > n {
                return Err(Error::invalid(format!("block id {id} out of range 1..={n}")));
            }
            if positions[i - 1] != u32::MAX {
                return Err(Error::invalid(format!("block id {id} appears twice")));
            }
            positions[i - 1] = slot as u32;
        }
        Ok(PermutationMap { table, positions })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_table((1..=n as BlockId).collect()).unwrap()
    }

    pub fn table(&self) -> &[BlockId] {
        &self.table
    }

    pub fn dummy_count(&self) -> usize {
        self.table.len() - self.positions.len()
    }
}

impl Permutation for PermutationMap {
    fn len(&self) -> usize {
        self.table.len()
    }

    fn real_count(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    fn position(&self, id: BlockId) -> usize {
        self.positions[id as usize - 1] as usize
    }

    #[inline]
    fn block_at(&self, slot: usize) -> Option<BlockId> {
        match self.table[slot] {
            DUMMY => None,
            id => Some(id),
        }
    }
}

/// Uniform allocation of blocks `1..=n` into `m` slots, the remaining `m - n`
/// slots left dummy (Fisher–Yates over the slot table).
pub fn random_permutation<R: RngCore + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<PermutationMap> {
    if n > m {
        return Err(Error::invalid(format!("{n} blocks do not fit in {m} slots")));
    }
    let mut table: Vec<BlockId> = (1..=n as BlockId).collect();
    table.resize(m, DUMMY);
    table.shuffle(rng);
    PermutationMap::from_table(table)
}

/// Completes a partial allocation uniformly at random.
///
/// `partial` fixes `(block id, slot)` pairs; the remaining ids and the dummies
/// are spread uniformly over the remaining slots.
pub fn complete_permutation<R: RngCore + ?Sized>(
    partial: &[(BlockId, usize)],
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<PermutationMap> {
    if n > m {
        return Err(Error::invalid(format!("{n} blocks do not fit in {m} slots")));
    }
    let mut table = vec![DUMMY; m];
    let mut fixed = vec![false; n];
    let mut taken = vec![false; m];
    for &(id, slot) in partial {
        if id == DUMMY || id as usize > n {
            return Err(Error::invalid(format!("block id {id} out of range 1..={n}")));
        }
        if slot >= m {
            return Err(Error::invalid(format!("slot {slot} out of range 0..{m}")));
        }
        if fixed[id as usize - 1] || taken[slot] {
            return Err(Error::invalid(format!("conflicting assignment of block {id} to slot {slot}")));
        }
        fixed[id as usize - 1] = true;
        taken[slot] = true;
        table[slot] = id;
    }
    let mut rest: Vec<BlockId> = (1..=n as BlockId).filter(|id| !fixed[*id as usize - 1]).collect();
    let free: Vec<usize> = (0..m).filter(|&s| !taken[s]).collect();
    rest.resize(free.len(), DUMMY);
    rest.shuffle(rng);
    for (slot, id) in free.into_iter().zip(rest) {
        table[slot] = id;
    }
    PermutationMap::from_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn block(id: BlockId) -> Block {
        Block::new(id, vec![id as u8; DEFAULT_BLOCK_SIZE])
    }

    #[test]
    fn keygen_is_deterministic_and_injective() {
        assert_eq!(keygen(0), keygen(0));
        assert_ne!(keygen(0), keygen(1));
        assert_eq!(keygen(7).bits(), 128);
    }

    #[test]
    fn round_trip_real_and_dummy() {
        for kind in [CipherKind::Aead, CipherKind::Plain] {
            let c = Cipher::with_kind(keygen(3), DEFAULT_BLOCK_SIZE, kind);
            let mut r = rng(1);
            let b = block(5);
            assert_eq!(c.decrypt(&c.encrypt(&b, &mut r).unwrap()).unwrap(), b);
            let d = Block::dummy(DEFAULT_BLOCK_SIZE);
            let back = c.decrypt(&c.encrypt(&d, &mut r).unwrap()).unwrap();
            assert!(back.is_dummy());
        }
    }

    #[test]
    fn encryptions_are_fresh() {
        let c = Cipher::new(keygen(3), DEFAULT_BLOCK_SIZE);
        let mut r = rng(2);
        let b = block(9);
        let x = c.encrypt(&b, &mut r).unwrap();
        let y = c.encrypt(&b, &mut r).unwrap();
        assert_ne!(x, y);
        assert_eq!(c.decrypt(&x).unwrap(), c.decrypt(&y).unwrap());
    }

    #[test]
    fn nonces_distinct_over_ten_thousand() {
        let c = Cipher::new(keygen(3), DEFAULT_BLOCK_SIZE);
        let mut r = rng(4);
        let b = block(1);
        let nonces: HashSet<Vec<u8>> =
            (0..10_000).map(|_| c.encrypt(&b, &mut r).unwrap().nonce().to_vec()).collect();
        assert_eq!(nonces.len(), 10_000);
    }

    #[test]
    fn wrong_key_is_rejected() {
        for kind in [CipherKind::Aead, CipherKind::Plain] {
            let a = Cipher::with_kind(keygen(1), DEFAULT_BLOCK_SIZE, kind);
            let b = Cipher::with_kind(keygen(2), DEFAULT_BLOCK_SIZE, kind);
            let ct = a.encrypt(&block(1), &mut rng(0)).unwrap();
            assert!(matches!(b.decrypt(&ct), Err(Error::CorruptCiphertext)));
        }
    }

    #[test]
    fn wrong_payload_length_is_rejected() {
        let c = Cipher::new(keygen(1), DEFAULT_BLOCK_SIZE);
        let bad = Block::new(1, vec![0; 3]);
        assert!(matches!(c.encrypt(&bad, &mut rng(0)), Err(Error::InvalidBlock { expected: 16, actual: 3 })));
    }

    #[test]
    fn ciphertext_length_is_constant() {
        let c = Cipher::new(keygen(1), 24);
        let mut r = rng(0);
        let lens: HashSet<usize> = (0..50)
            .map(|i| c.encrypt(&Block::new(i, vec![i as u8; 24]), &mut r).unwrap().len())
            .collect();
        assert_eq!(lens.into_iter().collect::<Vec<_>>(), vec![ciphertext_len(24)]);
    }

    #[test]
    fn permutation_contracts() {
        let p = random_permutation(1, 1, &mut rng(0)).unwrap();
        assert_eq!(p.table(), &[1]);
        let p = random_permutation(4, 2, &mut rng(0)).unwrap();
        assert_eq!(p.table().iter().filter(|&&x| x == DUMMY).count(), 2);
        for id in 1..=2 {
            assert_eq!(p.block_at(p.position(id)), Some(id));
        }
        assert!(random_permutation(2, 3, &mut rng(0)).is_err());
    }

    fn chi_square_uniform(counts: &HashMap<Vec<BlockId>, usize>, cells: usize, total: usize) -> f64 {
        let expected = total as f64 / cells as f64;
        let mut stat = 0.0;
        for c in counts.values() {
            stat += (*c as f64 - expected).powi(2) / expected;
        }
        stat += (cells - counts.len()) as f64 * expected;
        stat
    }

    #[test]
    fn random_permutation_is_uniform_on_three() {
        let mut r = rng(11);
        let mut counts: HashMap<Vec<BlockId>, usize> = HashMap::new();
        for _ in 0..60_000 {
            *counts.entry(random_permutation(3, 3, &mut r).unwrap().table().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        // chi-square(5) critical value at alpha = 1e-3 is 20.515
        assert!(chi_square_uniform(&counts, 6, 60_000) < 20.515);
    }

    #[test]
    fn empty_partial_matches_random_permutation() {
        // Exact support check plus uniformity at m = 4, n = 2: 4!/2! = 12 tables.
        let mut r = rng(12);
        let mut counts: HashMap<Vec<BlockId>, usize> = HashMap::new();
        for _ in 0..60_000 {
            *counts.entry(complete_permutation(&[], 4, 2, &mut r).unwrap().table().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 12);
        // chi-square(11) critical value at alpha = 1e-3 is 31.264
        assert!(chi_square_uniform(&counts, 12, 60_000) < 31.264);
    }

    #[test]
    fn completion_respects_partial() {
        let p = complete_permutation(&[(1, 1)], 2, 2, &mut rng(0)).unwrap();
        assert_eq!(p.table(), &[2, 1]);
        let p = complete_permutation(&[(1, 2), (2, 0), (3, 1)], 3, 3, &mut rng(0)).unwrap();
        assert_eq!(p.table(), &[2, 3, 1]);
        assert!(complete_permutation(&[(1, 0), (2, 0)], 3, 3, &mut rng(0)).is_err());
        assert!(complete_permutation(&[(1, 0), (1, 1)], 3, 3, &mut rng(0)).is_err());
    }
}
