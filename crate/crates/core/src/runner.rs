//! One seeded execution of any algorithm, from setup to a metrics row.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{keygen, random_permutation, Block, CipherKind, PermutationMap, DEFAULT_BLOCK_SIZE};
use crate::dummy::{k_cache_shuffle_dummy, DummyShuffleConfig};
use crate::error::{AbortReason, Error, Result};
use crate::kshuffle::{k_cache_shuffle, k_cache_shuffle_basic, k_cache_shuffle_root, BasicOptions, BasicVariant, KReport, TouchedSet};
use crate::recursive::cache_shuffle;
use crate::root::cache_shuffle_root;
use crate::session::{sample_blocks, Session, SessionConfig};
use crate::spray::{Gate, Outcome, ShuffleConfig};
use crate::storage::{ArrayId, Metrics, TranscriptMode};
use crate::util::ceil_tol;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Root,
    Recursive,
    Basic,
    K,
    Kroot,
    Dummy,
}

impl Algo {
    pub const ALL: [Algo; 6] = [Algo::Root, Algo::Recursive, Algo::Basic, Algo::K, Algo::Kroot, Algo::Dummy];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Root => "root",
            Algo::Recursive => "recursive",
            Algo::Basic => "basic",
            Algo::K => "k",
            Algo::Kroot => "kroot",
            Algo::Dummy => "dummy",
        }
    }

    /// Whether the algorithm takes a touched set.
    pub fn uses_touched(self) -> bool {
        matches!(self, Algo::Basic | Algo::K | Algo::Kroot | Algo::Dummy)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm {s:?}")))
    }
}

/// Parameters of one run. `n` counts real blocks; dummy runs add `d` dummies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub algo: Algo,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// Client budget `S`; 0 picks `⌈16·ln N⌉`.
    pub s: usize,
    /// Partition size for the dummy shuffle; 0 picks 256.
    pub l: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub batch: usize,
    pub variant: BasicVariant,
    pub cipher: CipherKind,
    pub block_size: usize,
    pub transcript: TranscriptMode,
    pub gate: Gate,
    /// Decrypt `Dest` afterwards and compare with the input blocks.
    pub verify: bool,
}

impl RunSpec {
    pub fn new(algo: Algo, n: usize) -> Self {
        RunSpec {
            algo,
            n,
            k: 0,
            d: 0,
            s: 0,
            l: 0,
            epsilon: 0.5,
            seed: 0,
            batch: 1,
            variant: BasicVariant::Faithful,
            cipher: CipherKind::Aead,
            block_size: DEFAULT_BLOCK_SIZE,
            transcript: TranscriptMode::Off,
            gate: Gate::Warn,
            verify: true,
        }
    }

    pub fn budget(&self) -> usize {
        if self.s > 0 {
            self.s
        } else {
            default_budget(self.n)
        }
    }

    pub fn partition_size(&self) -> usize {
        if self.l > 0 {
            self.l
        } else {
            256
        }
    }

    /// Source slots, `N + D` for dummy runs.
    pub fn slots(&self) -> usize {
        if self.algo == Algo::Dummy {
            self.n + self.d
        } else {
            self.n
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("N must be at least 1"));
        }
        if self.algo.uses_touched() && self.k > self.n {
            return Err(Error::invalid(format!("K = {} exceeds N = {}", self.k, self.n)));
        }
        if self.algo != Algo::Dummy && self.d > 0 {
            return Err(Error::invalid("dummy blocks (--d) are only supported by the dummy shuffle"));
        }
        Ok(())
    }
}

/// `max(2, ⌈16·ln N⌉)`.
pub fn default_budget(n: usize) -> usize {
    ceil_tol(16.0 * (n.max(2) as f64).ln()).max(2)
}

/// The permutations and touched set of one run, drawn from the seed on a
/// stream separate from the algorithm's coins.
#[derive(Clone, Debug)]
pub struct Setup {
    pub pi: PermutationMap,
    pub sigma: PermutationMap,
    pub touched: TouchedSet,
}

impl Setup {
    pub fn draw(spec: &RunSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2);
        let m = spec.slots();
        let pi = random_permutation(m, spec.n, &mut rng)?;
        let sigma = random_permutation(m, spec.n, &mut rng)?;
        let touched = if spec.algo.uses_touched() {
            TouchedSet::random(spec.n, spec.k, &mut rng)?
        } else {
            TouchedSet::default()
        };
        Ok(Setup { pi, sigma, touched })
    }
}

/// One CSV row; the header is fixed by the field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub algo: Algo,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub s: usize,
    pub l: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub bandwidth: u64,
    pub max_cache: usize,
    pub mean_cache: f64,
    pub roundtrips: u64,
    pub aborted: bool,
    pub runtime_ms: f64,
}

pub const CSV_HEADER: &str = "algo,n,k,d,s,l,epsilon,seed,bandwidth,max_cache,mean_cache,roundtrips,aborted,runtime_ms";

pub struct RunReport {
    pub row: Row,
    pub metrics: Metrics,
    pub abort: Option<AbortReason>,
    pub k_report: Option<KReport>,
    /// Hex SHA-256 of the transcript, when recorded.
    pub digest: Option<String>,
    /// Whether `Dest` was checked against the input blocks.
    pub verified: bool,
    pub session: Session,
}

/// Output of [`execute`]: the finished shuffle and any K-shuffle report.
pub struct Executed {
    pub outcome: Outcome,
    pub k_report: Option<KReport>,
}

/// Runs `spec.algo` on an already laid out source.
pub fn execute(sess: &mut Session, spec: &RunSpec, source: ArrayId, setup: &Setup) -> Result<Executed> {
    let cfg = ShuffleConfig::new(spec.epsilon).with_gate(spec.gate);
    let Setup { pi, sigma, touched } = setup;
    let plain = |outcome| Executed { outcome, k_report: None };
    Ok(match spec.algo {
        Algo::Root => plain(cache_shuffle_root(sess, source, sigma, &cfg)?),
        Algo::Recursive => plain(cache_shuffle(sess, source, sigma, spec.budget(), &cfg)?),
        Algo::Basic => {
            let opts = BasicOptions { batch: spec.batch, variant: spec.variant };
            plain(k_cache_shuffle_basic(sess, source, pi, sigma, touched, opts)?)
        }
        Algo::K => {
            let out = k_cache_shuffle(sess, source, pi, sigma, touched, spec.budget(), &cfg)?;
            Executed { outcome: out.outcome, k_report: out.report }
        }
        Algo::Kroot => {
            let out = k_cache_shuffle_root(sess, source, pi, sigma, touched, &cfg)?;
            Executed { outcome: out.outcome, k_report: out.report }
        }
        Algo::Dummy => {
            let dcfg = DummyShuffleConfig::new(spec.partition_size(), spec.epsilon).with_gate(spec.gate);
            plain(k_cache_shuffle_dummy(sess, source, pi, sigma, touched, &dcfg)?.outcome)
        }
    })
}

pub fn session_config(spec: &RunSpec) -> SessionConfig {
    SessionConfig { block_size: spec.block_size, cipher: spec.cipher, transcript: spec.transcript, ..Default::default() }
}

/// Sets up and runs one execution. Aborts are reported in the row, not as
/// errors. `blocks` defaults to generated sample blocks.
pub fn run(spec: &RunSpec, blocks: Option<&[Block]>, sink: Option<Box<dyn Write + Send>>) -> Result<RunReport> {
    spec.validate()?;
    let owned;
    let blocks = match blocks {
        Some(b) => {
            if b.len() != spec.n {
                return Err(Error::invalid(format!("{} input blocks but N = {}", b.len(), spec.n)));
            }
            b
        }
        None => {
            owned = sample_blocks(spec.n, spec.block_size);
            &owned
        }
    };
    let mut scfg = session_config(spec);
    if let Some(b) = blocks.first() {
        scfg.block_size = b.payload.len();
    }
    let setup = Setup::draw(spec)?;
    let mut sess = Session::new(keygen(spec.seed), &scfg, spec.slots(), spec.seed);
    if let Some(w) = sink {
        sess.store.stream_transcript(w);
    }
    let source = sess.setup_source("source", blocks, &setup.pi)?;
    let start = Instant::now();
    let result = execute(&mut sess, spec, source, &setup);
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    sess.store.finish_transcript()?;
    let (abort, k_report, dest) = match result {
        Ok(ex) => (None, ex.k_report, Some(ex.outcome.dest)),
        Err(Error::Aborted(a)) => (Some(a.reason), None, None),
        Err(e) => return Err(e),
    };
    let verified = match dest {
        Some(dest) if spec.verify => {
            sess.verify_dest(dest, &setup.sigma, blocks)?;
            true
        }
        _ => false,
    };
    let metrics = sess.store.metrics();
    let digest = (spec.transcript != TranscriptMode::Off).then(|| hex(&sess.store.transcript().digest()));
    let row = Row {
        algo: spec.algo,
        n: spec.n,
        k: if spec.algo.uses_touched() { spec.k } else { 0 },
        d: spec.d,
        s: match spec.algo {
            Algo::Recursive | Algo::K => spec.budget(),
            _ => 0,
        },
        l: if spec.algo == Algo::Dummy { spec.partition_size() } else { 0 },
        epsilon: spec.epsilon,
        seed: spec.seed,
        bandwidth: metrics.bandwidth,
        max_cache: metrics.max_cache,
        mean_cache: metrics.mean_cache,
        roundtrips: metrics.roundtrips,
        aborted: abort.is_some(),
        runtime_ms,
    };
    Ok(RunReport { row, metrics, abort, k_report, digest, verified, session: sess })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Caps rayon's global pool at `OBSH_THREADS` when set. Later calls are no-ops.
pub fn init_threads() {
    if let Some(n) = std::env::var("OBSH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
