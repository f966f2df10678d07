//! Block file format: magic `OBSH`, version `u32` LE = 1, `N` as `u64` LE,
//! block size `B` as `u32` LE, then `N` payloads of `B` bytes. Block `i`
//! (1-based) is the `i`-th payload.

use std::io::{self, Read, Write};

use crate::crypto::{Block, BlockId};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OBSH";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockFile {
    pub block_size: usize,
    pub blocks: Vec<Block>,
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Reads exactly `buf.len()` bytes, reporting truncation at `offset + read`.
fn fill<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(format_err(offset + got as u64, format!("truncated {what}"))),
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_blocks<R: Read>(mut r: R) -> Result<BlockFile> {
    let mut header = [0u8; HEADER_LEN as usize];
    fill(&mut r, &mut header[..4], 0, "magic")?;
    if &header[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected \"OBSH\"", &header[..4])));
    }
    fill(&mut r, &mut header[4..], 4, "header")?;
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    if n == 0 {
        return Err(format_err(8, "N must be at least 1"));
    }
    if n > u32::MAX as u64 {
        return Err(format_err(8, format!("N = {n} exceeds the block id range")));
    }
    let b = u32::from_le_bytes(header[16..20].try_into().expect("4 bytes")) as usize;
    if b == 0 {
        return Err(format_err(16, "block size must be positive"));
    }
    let mut blocks = Vec::with_capacity(n.min(1 << 20) as usize);
    let mut offset = HEADER_LEN;
    for id in 1..=n {
        let mut payload = vec![0u8; b];
        fill(&mut r, &mut payload, offset, &format!("payload of block {id}"))?;
        blocks.push(Block::new(id as BlockId, payload));
        offset += b as u64;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(format_err(offset, "trailing bytes after the last payload"));
    }
    Ok(BlockFile { block_size: b, blocks })
}

/// Writes blocks in id order; ids must be `1..=N` and payloads equal-sized.
pub fn write_blocks<W: Write>(mut w: W, blocks: &[Block]) -> Result<()> {
    let b = blocks.first().map(|b| b.payload.len()).ok_or_else(|| Error::invalid("no blocks to write"))?;
    if b == 0 || b > u32::MAX as usize {
        return Err(Error::invalid(format!("block size {b} out of range")));
    }
    for (i, blk) in blocks.iter().enumerate() {
        if blk.id as usize != i + 1 {
            return Err(Error::invalid(format!("block at index {i} has id {}", blk.id)));
        }
        if blk.payload.len() != b {
            return Err(Error::InvalidBlock { expected: b, actual: blk.payload.len() });
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(blocks.len() as u64).to_le_bytes())?;
    w.write_all(&(b as u32).to_le_bytes())?;
    for blk in blocks {
        w.write_all(&blk.payload)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::sample_blocks;
    use proptest::prelude::*;

    fn encode(blocks: &[Block]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_blocks(&mut buf, blocks).unwrap();
        buf
    }

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn header_layout() {
        let buf = encode(&sample_blocks(2, 3));
        assert_eq!(&buf[..4], b"OBSH");
        assert_eq!(buf[4..8], [1, 0, 0, 0]);
        assert_eq!(buf[8..16], [2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(buf[16..20], [3, 0, 0, 0]);
        assert_eq!(buf.len(), 20 + 6);
    }

    #[test]
    fn rejects_bad_headers() {
        let good = encode(&sample_blocks(2, 4));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(read_blocks(&bad[..]).unwrap_err()), 0);
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset_of(read_blocks(&bad[..]).unwrap_err()), 4);
        let mut zero = good[..20].to_vec();
        zero[8..16].fill(0);
        assert_eq!(offset_of(read_blocks(&zero[..]).unwrap_err()), 8);
        assert_eq!(offset_of(read_blocks(&good[..2]).unwrap_err()), 2);
    }

    #[test]
    fn truncation_reports_offset() {
        let good = encode(&sample_blocks(3, 4));
        assert_eq!(offset_of(read_blocks(&good[..25]).unwrap_err()), 25);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(offset_of(read_blocks(&long[..]).unwrap_err()), 32);
    }

    proptest! {
        #[test]
        fn round_trip(n in 1usize..40, b in 1usize..64) {
            let blocks = sample_blocks(n, b);
            let back = read_blocks(&encode(&blocks)[..]).unwrap();
            prop_assert_eq!(back.block_size, b);
            prop_assert_eq!(back.blocks, blocks);
        }
    }
}
