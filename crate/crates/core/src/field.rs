//! Arithmetic in `F_p` for `p = 2^61 - 1` and the lane encoding of ciphertexts.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::Ciphertext;
use crate::error::{Error, Result};

pub const P: u64 = (1 << 61) - 1;
pub const LANE_BITS: usize = 60;
const LANE_MASK: u64 = (1 << LANE_BITS) - 1;

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fp(u64);

impl Fp {
    pub const ZERO: Fp = Fp(0);
    pub const ONE: Fp = Fp(1);

    pub fn new(v: u64) -> Self {
        let r = (v & P) + (v >> 61);
        Fp(if r >= P { r - P } else { r })
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v = rng.gen::<u64>() & P;
            if v < P {
                return Fp(v);
            }
        }
    }

    pub fn pow(self, mut e: u64) -> Self {
        let mut base = self;
        let mut acc = Fp::ONE;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inv(self) -> Option<Self> {
        (self.0 != 0).then(|| self.pow(P - 2))
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Debug for Fp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for Fp {
    fn from(v: u64) -> Self {
        Fp::new(v)
    }
}

impl Add for Fp {
    type Output = Fp;
    #[inline]
    fn add(self, o: Fp) -> Fp {
        let r = self.0 + o.0;
        Fp(if r >= P { r - P } else { r })
    }
}

impl Sub for Fp {
    type Output = Fp;
    #[inline]
    fn sub(self, o: Fp) -> Fp {
        if self.0 >= o.0 {
            Fp(self.0 - o.0)
        } else {
            Fp(self.0 + P - o.0)
        }
    }
}

impl Neg for Fp {
    type Output = Fp;
    fn neg(self) -> Fp {
        Fp::ZERO - self
    }
}

impl Mul for Fp {
    type Output = Fp;
    #[inline]
    fn mul(self, o: Fp) -> Fp {
        let x = self.0 as u128 * o.0 as u128;
        let r = (x as u64 & P) + (x >> 61) as u64;
        Fp(if r >= P { r - P } else { r })
    }
}

/// Inverts every element with one exponentiation (Montgomery's trick).
/// All inputs must be nonzero.
pub fn batch_inverse(xs: &[Fp]) -> Vec<Fp> {
    let mut prefix = Vec::with_capacity(xs.len());
    let mut acc = Fp::ONE;
    for &x in xs {
        prefix.push(acc);
        acc = acc * x;
    }
    let mut inv = acc.inv().expect("batch_inverse of zero");
    let mut out = vec![Fp::ZERO; xs.len()];
    for i in (0..xs.len()).rev() {
        out[i] = inv * prefix[i];
        inv = inv * xs[i];
    }
    out
}

/// Number of 60-bit lanes needed for `len` bytes.
pub const fn lane_count(len: usize) -> usize {
    (8 * len).div_ceil(LANE_BITS)
}

/// Splits the bytes into little-endian 60-bit lanes.
pub fn bytes_to_lanes(bytes: &[u8]) -> Vec<Fp> {
    let mut lanes = vec![0u64; lane_count(bytes.len())];
    for (i, &b) in bytes.iter().enumerate() {
        let bit = 8 * i;
        let (lane, off) = (bit / LANE_BITS, bit % LANE_BITS);
        lanes[lane] |= (b as u64) << off;
        if off + 8 > LANE_BITS {
            lanes[lane + 1] |= (b as u64) >> (LANE_BITS - off);
        }
    }
    lanes.into_iter().map(|v| Fp(v & LANE_MASK)).collect()
}

/// Packs lanes back into `len` bytes, ignoring bits above 60 and past the end.
pub fn lanes_to_bytes_lossy(lanes: &[Fp], len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    for (i, byte) in out.iter_mut().enumerate() {
        let bit = 8 * i;
        let (lane, off) = (bit / LANE_BITS, bit % LANE_BITS);
        let mut v = lanes.get(lane).map_or(0, |l| (l.0 & LANE_MASK) >> off);
        if off + 8 > LANE_BITS {
            v |= lanes.get(lane + 1).map_or(0, |l| l.0 << (LANE_BITS - off));
        }
        *byte = v as u8;
    }
    out
}

pub fn ct_to_lanes(ct: &Ciphertext) -> Vec<Fp> {
    bytes_to_lanes(ct.as_bytes())
}

/// Exact inverse of [`ct_to_lanes`]; rejects lane vectors it cannot have produced.
pub fn lanes_to_ct(lanes: &[Fp], len: usize) -> Result<Ciphertext> {
    if lanes.len() != lane_count(len) {
        return Err(Error::invalid(format!("expected {} lanes, got {}", lane_count(len), lanes.len())));
    }
    if lanes.iter().any(|l| l.0 > LANE_MASK) {
        return Err(Error::invalid("lane value exceeds 60 bits"));
    }
    let bytes = lanes_to_bytes_lossy(lanes, len);
    if bytes_to_lanes(&bytes) != lanes {
        return Err(Error::invalid("nonzero padding bits in final lane"));
    }
    Ok(Ciphertext::from_bytes(&bytes))
}
