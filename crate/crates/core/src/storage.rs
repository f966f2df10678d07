//! Simulated server memory, the move transcript and bandwidth accounting.
//!
//! Every algorithm talks to the server only through [`ServerStore::download`],
//! [`ServerStore::upload`] and [`ServerStore::server_eval`]. Setup writes go
//! through [`ServerStore::install`] and are not counted.

use std::fmt;
use std::io::{self, BufWriter, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::Ciphertext;
use crate::error::{Error, Result};
use crate::field::{lanes_to_bytes_lossy, Fp};
use crate::poly::LanePolynomial;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArrayId(pub u32);

impl fmt::Display for ArrayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Slot {
    #[default]
    Empty,
    Ct(Ciphertext),
    /// Raw lane values written by a server-side polynomial evaluation.
    Lanes(Vec<Fp>),
}

impl Slot {
    pub fn is_empty(&self) -> bool {
        matches!(self, Slot::Empty)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    Download { array: ArrayId, index: u64 },
    Upload { array: ArrayId, index: u64 },
    Eval { array: ArrayId, coefficient_blocks: u64, indices: Vec<u64> },
}

impl Event {
    pub fn array(&self) -> ArrayId {
        match self {
            Event::Download { array, .. } | Event::Upload { array, .. } | Event::Eval { array, .. } => *array,
        }
    }

    pub fn is_download(&self) -> bool {
        matches!(self, Event::Download { .. })
    }

    pub fn block_cost(&self) -> u64 {
        match self {
            Event::Eval { coefficient_blocks, .. } => *coefficient_blocks,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptMode {
    /// Count only.
    #[default]
    Off,
    /// Running SHA-256 over the event stream.
    Digest,
    /// Keep every event in memory (also maintains the digest).
    Full,
}

/// Ordered record of server-visible moves. Holds server locations only.
pub struct MoveTranscript {
    mode: TranscriptMode,
    events: Vec<Event>,
    hasher: Sha256,
    len: u64,
    sink: Option<BufWriter<Box<dyn Write + Send>>>,
    sink_error: Option<io::Error>,
}

impl fmt::Debug for MoveTranscript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MoveTranscript")
            .field("mode", &self.mode)
            .field("len", &self.len)
            .field("streaming", &self.sink.is_some())
            .finish()
    }
}

impl MoveTranscript {
    pub fn new(mode: TranscriptMode) -> Self {
        MoveTranscript { mode, events: Vec::new(), hasher: Sha256::new(), len: 0, sink: None, sink_error: None }
    }

    pub fn mode(&self) -> TranscriptMode {
        self.mode
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Recorded events; empty unless the mode is [`TranscriptMode::Full`].
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Digest of the events so far; all zeros when the mode is `Off`.
    pub fn digest(&self) -> [u8; 32] {
        if self.mode == TranscriptMode::Off {
            return [0; 32];
        }
        self.hasher.clone().finalize().into()
    }

    fn record(&mut self, ev: Event, name: &str) {
        self.len += 1;
        if self.mode != TranscriptMode::Off {
            match &ev {
                Event::Download { array, index } => {
                    self.hasher.update([b'D']);
                    self.hasher.update(array.0.to_le_bytes());
                    self.hasher.update(index.to_le_bytes());
                }
                Event::Upload { array, index } => {
                    self.hasher.update([b'U']);
                    self.hasher.update(array.0.to_le_bytes());
                    self.hasher.update(index.to_le_bytes());
                }
                Event::Eval { array, coefficient_blocks, indices } => {
                    self.hasher.update([b'E']);
                    self.hasher.update(array.0.to_le_bytes());
                    self.hasher.update(coefficient_blocks.to_le_bytes());
                    self.hasher.update((indices.len() as u64).to_le_bytes());
                    for i in indices {
                        self.hasher.update(i.to_le_bytes());
                    }
                }
            }
        }
        if let Some(sink) = self.sink.as_mut() {
            if self.sink_error.is_none() {
                if let Err(e) = write_event(sink, &ev, name) {
                    self.sink_error = Some(e);
                }
            }
        }
        if self.mode == TranscriptMode::Full {
            self.events.push(ev);
        }
    }
}

fn write_event<W: Write>(w: &mut W, ev: &Event, name: &str) -> io::Result<()> {
    match ev {
        Event::Download { index, .. } => writeln!(w, "D {name} {index}"),
        Event::Upload { index, .. } => writeln!(w, "U {name} {index}"),
        Event::Eval { coefficient_blocks, indices, .. } => {
            write!(w, "E {name} {coefficient_blocks}")?;
            for i in indices {
                write!(w, " {i}")?;
            }
            writeln!(w)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Downloads + uploads + coefficient blocks of server evaluations.
    pub bandwidth: u64,
    pub downloads: u64,
    pub uploads: u64,
    pub eval_blocks: u64,
    /// Most blocks simultaneously resident on the client.
    pub client_high_water: usize,
    /// Maximal runs of same-direction traffic.
    pub roundtrips: u64,
    pub aborted: bool,
    /// Largest number of live server slots.
    pub server_peak_slots: usize,
    /// Largest total client cache size recorded after a spray round.
    pub max_cache: usize,
    /// Mean of the recorded cache sizes.
    pub mean_cache: f64,
}

impl Metrics {
    /// Traffic between two snapshots of the same store.
    pub fn since(&self, earlier: &Metrics) -> Metrics {
        Metrics {
            bandwidth: self.bandwidth - earlier.bandwidth,
            downloads: self.downloads - earlier.downloads,
            uploads: self.uploads - earlier.uploads,
            eval_blocks: self.eval_blocks - earlier.eval_blocks,
            roundtrips: self.roundtrips - earlier.roundtrips,
            ..self.clone()
        }
    }
}

/// Count of client-resident blocks and its running maximum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClientLedger {
    held: usize,
    peak: usize,
}

impl ClientLedger {
    pub fn held(&self) -> usize {
        self.held
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn acquire(&mut self, n: usize) {
        self.held += n;
        self.peak = self.peak.max(self.held);
    }

    pub fn release(&mut self, n: usize) {
        debug_assert!(n <= self.held, "releasing {n} of {} held blocks", self.held);
        self.held = self.held.saturating_sub(n);
    }

    /// Restarts the watermark at the current occupancy.
    pub fn reset_peak(&mut self) {
        self.peak = self.held;
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Down,
    Up,
}

struct ServerArray {
    name: String,
    slots: Vec<Slot>,
}

pub struct ServerStore {
    arrays: Vec<Option<ServerArray>>,
    capacity: usize,
    live_slots: usize,
    peak_slots: usize,
    transcript: MoveTranscript,
    downloads: u64,
    uploads: u64,
    eval_blocks: u64,
    roundtrips: u64,
    last_direction: Option<Direction>,
    aborted: bool,
    ledger: ClientLedger,
    cache_max: usize,
    cache_sum: u64,
    cache_samples: u64,
}

impl fmt::Debug for ServerStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerStore")
            .field("capacity", &self.capacity)
            .field("live_slots", &self.live_slots)
            .field("transcript", &self.transcript)
            .finish_non_exhaustive()
    }
}

impl ServerStore {
    /// Store holding at most `capacity` slots across all arrays.
    pub fn new(capacity: usize, mode: TranscriptMode) -> Self {
        ServerStore {
            arrays: Vec::new(),
            capacity,
            live_slots: 0,
            peak_slots: 0,
            transcript: MoveTranscript::new(mode),
            downloads: 0,
            uploads: 0,
            eval_blocks: 0,
            roundtrips: 0,
            last_direction: None,
            aborted: false,
            ledger: ClientLedger::default(),
            cache_max: 0,
            cache_sum: 0,
            cache_samples: 0,
        }
    }

    /// Streams every subsequent event to `w` in the line format
    /// `D <array> <idx>` / `U <array> <idx>` / `E <array> <k> <idx...>`.
    pub fn stream_transcript(&mut self, w: Box<dyn Write + Send>) {
        self.transcript.sink = Some(BufWriter::new(w));
    }

    /// Flushes the transcript stream and reports the first write error.
    pub fn finish_transcript(&mut self) -> Result<()> {
        if let Some(e) = self.transcript.sink_error.take() {
            return Err(e.into());
        }
        if let Some(sink) = self.transcript.sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn live_slots(&self) -> usize {
        self.live_slots
    }

    pub fn transcript(&self) -> &MoveTranscript {
        &self.transcript
    }

    pub fn ledger(&self) -> &ClientLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut ClientLedger {
        &mut self.ledger
    }

    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> Result<ArrayId> {
        let available = self.capacity - self.live_slots;
        if len > available {
            return Err(Error::CapacityExceeded { requested: len, available });
        }
        self.live_slots += len;
        self.peak_slots = self.peak_slots.max(self.live_slots);
        let id = ArrayId(self.arrays.len() as u32);
        self.arrays.push(Some(ServerArray { name: name.into(), slots: vec![Slot::Empty; len] }));
        Ok(id)
    }

    pub fn free(&mut self, id: ArrayId) -> Result<()> {
        let arr = self
            .arrays
            .get_mut(id.0 as usize)
            .and_then(Option::take)
            .ok_or_else(|| Error::violation(format!("free of unknown array {id}")))?;
        self.live_slots -= arr.slots.len();
        Ok(())
    }

    fn array(&self, id: ArrayId) -> Result<&ServerArray> {
        self.arrays
            .get(id.0 as usize)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::violation(format!("unknown array {id}")))
    }

    fn array_mut(&mut self, id: ArrayId) -> Result<&mut ServerArray> {
        self.arrays
            .get_mut(id.0 as usize)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::violation(format!("unknown array {id}")))
    }

    pub fn name(&self, id: ArrayId) -> Result<&str> {
        Ok(&self.array(id)?.name)
    }

    pub fn len(&self, id: ArrayId) -> Result<usize> {
        Ok(self.array(id)?.slots.len())
    }

    /// Uncounted read for setup checks and test oracles.
    pub fn inspect(&self, id: ArrayId, idx: usize) -> Result<&Slot> {
        let arr = self.array(id)?;
        arr.slots.get(idx).ok_or_else(|| Error::violation(format!("index {idx} out of range in {}", arr.name)))
    }

    /// Uncounted write used to lay out the initial source array.
    pub fn install(&mut self, id: ArrayId, idx: usize, ct: Ciphertext) -> Result<()> {
        let arr = self.array_mut(id)?;
        let len = arr.slots.len();
        let slot = arr
            .slots
            .get_mut(idx)
            .ok_or_else(|| Error::violation(format!("install index {idx} out of range 0..{len}")))?;
        *slot = Slot::Ct(ct);
        Ok(())
    }

    fn log(&mut self, ev: Event) {
        let name = match self.transcript.sink {
            Some(_) => self.arrays[ev.array().0 as usize].as_ref().map_or("", |a| a.name.as_str()),
            None => "",
        };
        self.transcript.record(ev, name);
    }

    fn turn(&mut self, dir: Direction) {
        if self.last_direction != Some(dir) {
            self.roundtrips += 1;
            self.last_direction = Some(dir);
        }
    }

    /// Copies a ciphertext to the client. The slot keeps its content. The
    /// caller becomes responsible for one client-resident block.
    pub fn download(&mut self, id: ArrayId, idx: usize) -> Result<Ciphertext> {
        let arr = self.array(id)?;
        let ct = match arr.slots.get(idx) {
            Some(Slot::Ct(ct)) => ct.clone(),
            Some(Slot::Lanes(lanes)) => {
                let len = lanes_len_hint(lanes);
                Ciphertext::from_bytes(&lanes_to_bytes_lossy(lanes, len))
            }
            Some(Slot::Empty) => {
                return Err(Error::violation(format!("download of empty slot {idx} in {}", arr.name)));
            }
            None => {
                return Err(Error::violation(format!(
                    "download index {idx} out of range 0..{} in {}",
                    arr.slots.len(),
                    arr.name
                )));
            }
        };
        self.turn(Direction::Down);
        self.downloads += 1;
        self.ledger.acquire(1);
        let ev = Event::Download { array: id, index: idx as u64 };
        self.log(ev);
        Ok(ct)
    }

    /// Overwrites a slot. Client occupancy is managed by the caller, since an
    /// upload may carry a freshly made dummy rather than a held block.
    pub fn upload(&mut self, id: ArrayId, idx: usize, ct: Ciphertext) -> Result<()> {
        let arr = self.array_mut(id)?;
        let len = arr.slots.len();
        match arr.slots.get_mut(idx) {
            Some(slot) => *slot = Slot::Ct(ct),
            None => {
                return Err(Error::violation(format!("upload index {idx} out of range 0..{len} in {}", arr.name)));
            }
        }
        self.turn(Direction::Up);
        self.uploads += 1;
        let ev = Event::Upload { array: id, index: idx as u64 };
        self.log(ev);
        Ok(())
    }

    /// Ships the coefficients of `poly` and has the server write its value at
    /// every `x` in `indices` to the same slot of `id`.
    pub fn server_eval(&mut self, id: ArrayId, indices: &[usize], poly: &LanePolynomial) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(indices.len());
        if let Some(dup) = indices.iter().find(|&&i| !seen.insert(i)) {
            return Err(Error::violation(format!("duplicate evaluation index {dup}")));
        }
        let arr = self.array_mut(id)?;
        let len = arr.slots.len();
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::violation(format!("evaluation index {bad} out of range 0..{len}")));
        }
        for &i in indices {
            arr.slots[i] = Slot::Lanes(poly.eval(Fp::new(i as u64)));
        }
        let k = poly.coefficient_blocks() as u64;
        self.turn(Direction::Up);
        self.eval_blocks += k;
        let ev = Event::Eval { array: id, coefficient_blocks: k, indices: indices.iter().map(|&i| i as u64).collect() };
        self.log(ev);
        Ok(())
    }

    /// Records the total client cache size after a spray round.
    pub fn record_cache(&mut self, total: usize) {
        self.cache_max = self.cache_max.max(total);
        self.cache_sum += total as u64;
        self.cache_samples += 1;
    }

    pub fn mark_aborted(&mut self) {
        self.aborted = true;
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            bandwidth: self.downloads + self.uploads + self.eval_blocks,
            downloads: self.downloads,
            uploads: self.uploads,
            eval_blocks: self.eval_blocks,
            client_high_water: self.ledger.peak(),
            roundtrips: self.roundtrips,
            aborted: self.aborted,
            server_peak_slots: self.peak_slots,
            max_cache: self.cache_max,
            mean_cache: if self.cache_samples == 0 { 0.0 } else { self.cache_sum as f64 / self.cache_samples as f64 },
        }
    }
}

/// Byte length a lane vector can hold; downloads of evaluated slots only
/// happen in tests that decode with an explicit length.
fn lanes_len_hint(lanes: &[Fp]) -> usize {
    lanes.len() * crate::field::LANE_BITS / 8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::lagrange_interpolate;

    fn ct(b: u8) -> Ciphertext {
        Ciphertext::from_bytes(&[b; 48])
    }

    fn store() -> ServerStore {
        ServerStore::new(100, TranscriptMode::Full)
    }

    #[test]
    fn fresh_store_has_zero_metrics() {
        assert_eq!(store().metrics(), Metrics::default());
    }

    #[test]
    fn download_counts_and_records() {
        let mut s = store();
        let a = s.alloc("source", 4).unwrap();
        s.install(a, 2, ct(9)).unwrap();
        assert_eq!(s.metrics().bandwidth, 0);
        assert_eq!(s.download(a, 2).unwrap(), ct(9));
        assert_eq!(s.metrics().bandwidth, 1);
        assert_eq!(s.transcript().events().last(), Some(&Event::Download { array: a, index: 2 }));
        assert!(matches!(s.download(a, 1), Err(Error::ProtocolViolation(_))));
        assert!(matches!(s.download(a, 4), Err(Error::ProtocolViolation(_))));
        assert_eq!(s.metrics().bandwidth, 1);
    }

    #[test]
    fn upload_round_trips_and_adds() {
        let mut s = store();
        let a = s.alloc("dest", 3).unwrap();
        for i in 0..3 {
            s.upload(a, i, ct(i as u8)).unwrap();
        }
        assert_eq!(s.download(a, 1).unwrap(), ct(1));
        assert_eq!(s.metrics().bandwidth, 4);
        assert!(s.upload(a, 3, ct(0)).is_err());
        assert_eq!(s.metrics().roundtrips, 2);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut s = ServerStore::new(10, TranscriptMode::Off);
        let a = s.alloc("a", 6).unwrap();
        assert!(matches!(s.alloc("b", 5), Err(Error::CapacityExceeded { requested: 5, available: 4 })));
        s.free(a).unwrap();
        s.alloc("b", 10).unwrap();
        assert_eq!(s.metrics().server_peak_slots, 10);
    }

    #[test]
    fn constant_poly_eval_costs_one() {
        let mut s = store();
        let a = s.alloc("dest", 5).unwrap();
        let p = LanePolynomial::from_lanes(vec![vec![Fp::new(8)]]).unwrap();
        s.server_eval(a, &[0, 2, 4], &p).unwrap();
        assert_eq!(s.metrics().bandwidth, 1);
        assert_eq!(s.inspect(a, 0).unwrap(), s.inspect(a, 4).unwrap());
        assert_eq!(s.inspect(a, 2).unwrap(), &Slot::Lanes(vec![Fp::new(8)]));
        assert!(s.inspect(a, 1).unwrap().is_empty());
        assert!(matches!(s.server_eval(a, &[1, 1], &p), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn eval_reproduces_interpolated_ciphertexts() {
        use crate::field::{ct_to_lanes, lanes_to_ct};
        let mut s = store();
        let a = s.alloc("dest", 8).unwrap();
        let (c3, c6) = (ct(3), ct(6));
        let pts = vec![(Fp::new(3), ct_to_lanes(&c3)), (Fp::new(6), ct_to_lanes(&c6))];
        let p = lagrange_interpolate(&pts).unwrap();
        s.server_eval(a, &[3, 6], &p).unwrap();
        for (i, want) in [(3, &c3), (6, &c6)] {
            let Slot::Lanes(l) = s.inspect(a, i).unwrap() else { panic!("slot {i} not evaluated") };
            assert_eq!(&lanes_to_ct(l, 48).unwrap(), want);
        }
        assert_eq!(s.metrics().eval_blocks, 2);
    }

    #[test]
    fn transcript_has_no_dummy_flag() {
        // The same upload sequence with different payloads gives equal digests.
        let mut x = ServerStore::new(10, TranscriptMode::Digest);
        let mut y = ServerStore::new(10, TranscriptMode::Digest);
        let ax = x.alloc("t", 2).unwrap();
        let ay = y.alloc("t", 2).unwrap();
        x.upload(ax, 0, ct(0)).unwrap();
        y.upload(ay, 0, ct(1)).unwrap();
        assert_eq!(x.transcript().digest(), y.transcript().digest());
        x.upload(ax, 1, ct(0)).unwrap();
        assert_ne!(x.transcript().digest(), y.transcript().digest());
    }

    #[test]
    fn streaming_format() {
        let buf = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        struct Shared(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let mut s = ServerStore::new(10, TranscriptMode::Off);
        s.stream_transcript(Box::new(Shared(buf.clone())));
        let a = s.alloc("dest", 3).unwrap();
        s.upload(a, 1, ct(0)).unwrap();
        s.download(a, 1).unwrap();
        let p = LanePolynomial::from_lanes(vec![vec![Fp::ONE, Fp::ONE]]).unwrap();
        s.server_eval(a, &[0, 2], &p).unwrap();
        s.finish_transcript().unwrap();
        let text = String::from_utf8(buf.lock().unwrap().clone()).unwrap();
        assert_eq!(text, "U dest 1\nD dest 1\nE dest 2 0 2\n");
    }

    #[test]
    fn ledger_tracks_peak() {
        let mut l = ClientLedger::default();
        l.acquire(3);
        l.release(2);
        l.acquire(1);
        assert_eq!((l.held(), l.peak()), (2, 3));
    }
}
