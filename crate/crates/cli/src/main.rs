//! `obsh`: run shuffles, ORAM sessions, parameter sweeps and obliviousness
//! tests over the simulated block store.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 when a run aborted
//! (or a statistical test was inconclusive because too many trials aborted).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cacheshuffle::blockfile::{read_blocks, write_blocks};
use cacheshuffle::experiment::write_csv;
use cacheshuffle::obliv::{download_order_uniformity, homogeneity, same_seed};
use cacheshuffle::session::sample_blocks;
use cacheshuffle::util::ceil_sqrt;
use cacheshuffle::{
    experiment_suite, keygen, run, Algo, BasicVariant, Block, BlockId, CipherKind, ExperimentSpec, Gate, OblivReport,
    Oram, RunSpec, SessionConfig, TranscriptMode, Verdict,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_ABORT: u8 = 2;

#[derive(Parser)]
#[command(name = "obsh", version, about = "Cache-based oblivious shuffles over a simulated block store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one shuffle and report its metrics.
    Shuffle(ShuffleArgs),
    /// Answer random queries with a Square-Root ORAM.
    Oram(OramArgs),
    /// Sweep ε and seeds, writing one CSV row per run.
    Experiment(ExperimentArgs),
    /// Statistical obliviousness test of one algorithm.
    Oblivtest(OblivArgs),
    /// Validate a block file, or write a sample one.
    Ingest(IngestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CipherArg {
    Aead,
    Plain,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Faithful,
    /// Broken: never downloads a random block.
    NeededOnly,
    /// Broken: takes the lowest remaining position.
    Ascending,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Off,
    Warn,
    Strict,
}

#[derive(Args, Clone)]
struct Params {
    /// root | recursive | basic | k | kroot | dummy
    #[arg(long)]
    algo: Algo,
    /// Number of real blocks.
    #[arg(long)]
    n: usize,
    /// Touched blocks.
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Dummy blocks (dummy shuffle only).
    #[arg(long, default_value_t = 0)]
    d: usize,
    /// Client budget S; 0 picks ⌈16·ln N⌉.
    #[arg(long, default_value_t = 0)]
    s: usize,
    /// Partition size L for the dummy shuffle; 0 picks 256.
    #[arg(long, default_value_t = 0)]
    l: usize,
    /// Slack ε; a comma list for `experiment`.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination indices per exchange in the basic shuffle.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum, default_value = "faithful")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "aead")]
    cipher: CipherArg,
    /// Enforcement of the S ≥ 16·ln N guideline.
    #[arg(long, value_enum, default_value = "warn")]
    gate: GateArg,
}

impl Params {
    fn spec(&self, epsilon: f64) -> RunSpec {
        let mut s = RunSpec::new(self.algo, self.n);
        s.k = self.k;
        s.d = self.d;
        s.s = self.s;
        s.l = self.l;
        s.epsilon = epsilon;
        s.seed = self.seed;
        s.batch = self.batch;
        s.variant = match self.variant {
            VariantArg::Faithful => BasicVariant::Faithful,
            VariantArg::NeededOnly => BasicVariant::NeededOnly,
            VariantArg::Ascending => BasicVariant::Ascending,
        };
        s.cipher = match self.cipher {
            CipherArg::Aead => CipherKind::Aead,
            CipherArg::Plain => CipherKind::Plain,
        };
        s.gate = match self.gate {
            GateArg::Off => Gate::Off,
            GateArg::Warn => Gate::Warn,
            GateArg::Strict => Gate::Strict,
        };
        s
    }

    fn single_epsilon(&self) -> Result<f64, Failure> {
        match self.epsilon[..] {
            [e] => Ok(e),
            _ => Err(Failure::Usage("this subcommand takes a single --epsilon".into())),
        }
    }
}

#[derive(Args)]
struct ShuffleArgs {
    #[command(flatten)]
    params: Params,
    /// Block file to shuffle instead of generated blocks.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Write the move transcript, one event per line.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Also write the result (CSV row, or JSON with --json) to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    /// Skip decrypting Dest afterwards.
    #[arg(long)]
    no_verify: bool,
}

#[derive(Args)]
struct OramArgs {
    #[arg(long)]
    n: usize,
    /// Queries to answer; defaults to 10·⌈√N⌉.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "aead")]
    cipher: CipherArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    params: Params,
    /// Seeds per ε, starting at --seed.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Same coins under two σ must give identical transcripts.
    SameSeed,
    /// Transcript distributions under two adversarial σ must agree.
    Homogeneity,
    /// Basic shuffle only: phase-2 download order must be uniform.
    Uniformity,
}

#[derive(Args)]
struct OblivArgs {
    #[command(flatten)]
    params: Params,
    /// Trials per σ (seed pairs in same-seed mode).
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    /// Defaults to same-seed for oblivious shuffles, uniformity for the basic
    /// shuffle when (N−K)! is small, homogeneity otherwise.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Family-wise significance level.
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct IngestArgs {
    /// Block file to validate.
    #[arg(long, required_unless_present = "emit")]
    input: Option<PathBuf>,
    /// Write a sample file of --n blocks to --out instead.
    #[arg(long, requires_all = ["n", "out"])]
    emit: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = cacheshuffle::crypto::DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<cacheshuffle::Error> for Failure {
    fn from(e: cacheshuffle::Error) -> Self {
        match e {
            cacheshuffle::Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<u8, Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Vec<Block>, Failure> {
    let f = File::open(path).map_err(|e| Failure::Runtime(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_blocks(io::BufReader::new(f))?.blocks)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

#[derive(Serialize)]
struct ShuffleReport<'a> {
    spec: &'a RunSpec,
    metrics: &'a cacheshuffle::Metrics,
    abort: Option<String>,
    verified: bool,
    digest: Option<&'a str>,
    runtime_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase3_input: Option<usize>,
}

fn shuffle(a: ShuffleArgs) -> Outcome {
    let mut spec = a.params.spec(a.params.single_epsilon()?);
    spec.verify = !a.no_verify;
    spec.transcript = TranscriptMode::Digest;
    let blocks = a.input.as_deref().map(load).transpose()?;
    if let Some(b) = &blocks {
        spec.n = b.len();
    }
    let sink = match &a.transcript {
        Some(p) => Some(Box::new(create(p)?) as Box<dyn Write + Send>),
        None => None,
    };
    let r = run(&spec, blocks.as_deref(), sink)?;
    let report = ShuffleReport {
        spec: &spec,
        metrics: &r.metrics,
        abort: r.abort.as_ref().map(ToString::to_string),
        verified: r.verified,
        digest: r.digest.as_deref(),
        runtime_ms: r.row.runtime_ms,
        phase3_input: r.k_report.as_ref().map(|k| k.phase3_input),
    };
    if a.json {
        println!("{}", to_json(&report));
    } else {
        let m = &r.metrics;
        println!(
            "{} N={} bandwidth={} downloads={} uploads={} eval_blocks={} client_peak={} max_cache={} roundtrips={} verified={} {:.1} ms",
            spec.algo,
            spec.n,
            m.bandwidth,
            m.downloads,
            m.uploads,
            m.eval_blocks,
            m.client_high_water,
            m.max_cache,
            m.roundtrips,
            r.verified,
            r.row.runtime_ms
        );
        if let Some(why) = &report.abort {
            println!("aborted: {why}");
        }
    }
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        if a.json {
            writeln!(w, "{}", to_json(&report))?;
        } else {
            write_csv(std::slice::from_ref(&r.row), &mut w)?;
        }
        w.flush()?;
    }
    Ok(if r.row.aborted { EXIT_ABORT } else { 0 })
}

#[derive(Serialize)]
struct OramReport {
    n: usize,
    queries: usize,
    epoch_len: usize,
    rebuilds: usize,
    bandwidth: u64,
    per_query: f64,
    last_rebuild: Option<u64>,
    wrong: usize,
}

fn oram(a: OramArgs) -> Outcome {
    let blocks = match &a.input {
        Some(p) => load(p)?,
        None => {
            if a.n == 0 {
                return Err(Failure::Usage("N must be at least 1".into()));
            }
            sample_blocks(a.n, cacheshuffle::crypto::DEFAULT_BLOCK_SIZE)
        }
    };
    let n = blocks.len();
    let cfg = SessionConfig {
        block_size: blocks[0].payload.len(),
        cipher: match a.cipher {
            CipherArg::Aead => CipherKind::Aead,
            CipherArg::Plain => CipherKind::Plain,
        },
        ..Default::default()
    };
    let mut o = Oram::init(&blocks, keygen(a.seed), a.seed, &cfg)?;
    let queries = a.queries.unwrap_or(10 * ceil_sqrt(n));
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    rng.set_stream(3);
    let mut wrong = 0;
    for _ in 0..queries {
        let q = rng.gen_range(1..=n as BlockId);
        if o.query(q)? != blocks[q as usize - 1] {
            wrong += 1;
        }
    }
    let bandwidth = o.metrics().bandwidth;
    let report = OramReport {
        n,
        queries,
        epoch_len: o.epoch_len(),
        rebuilds: o.rebuilds(),
        bandwidth,
        per_query: if queries == 0 { 0.0 } else { bandwidth as f64 / queries as f64 },
        last_rebuild: o.last_rebuild().map(|m| m.bandwidth),
        wrong,
    };
    let text = if a.json {
        to_json(&report)
    } else {
        format!(
            "oram N={n} queries={queries} epoch={} rebuilds={} bandwidth={bandwidth} per_query={:.2} wrong={wrong}",
            report.epoch_len, report.rebuilds, report.per_query
        )
    };
    println!("{text}");
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        writeln!(w, "{text}")?;
        w.flush()?;
    }
    if wrong > 0 {
        return Err(Failure::Runtime(format!("{wrong} queries returned the wrong block")));
    }
    Ok(0)
}

fn experiment(a: ExperimentArgs) -> Outcome {
    let mut base = a.params.spec(a.params.epsilon[0]);
    base.verify = false;
    let spec = ExperimentSpec { base, epsilons: a.params.epsilon.clone(), seeds: a.seeds };
    let rows = experiment_suite(&spec)?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            write_csv(&rows, &mut w)?;
            w.flush()?;
        }
        None => write_csv(&rows, io::stdout().lock())?,
    }
    let aborted = rows.iter().filter(|r| r.aborted).count();
    if aborted > 0 {
        eprintln!("{aborted} of {} runs aborted", rows.len());
        return Ok(EXIT_ABORT);
    }
    Ok(0)
}

fn default_mode(spec: &RunSpec) -> ModeArg {
    match spec.algo {
        Algo::Root | Algo::Recursive => ModeArg::SameSeed,
        Algo::Basic if spec.n - spec.k.min(spec.n) <= 8 => ModeArg::Uniformity,
        _ => ModeArg::Homogeneity,
    }
}

fn oblivtest(a: OblivArgs) -> Outcome {
    let mut spec = a.params.spec(a.params.single_epsilon()?);
    spec.cipher = CipherKind::Plain;
    let mode = a.mode.unwrap_or_else(|| default_mode(&spec));
    if !matches!(mode, ModeArg::SameSeed) && a.trials < 10_000 {
        return Err(Failure::Usage(format!("statistical modes need at least 10000 trials, got {}", a.trials)));
    }
    let report: OblivReport = match mode {
        ModeArg::SameSeed => same_seed(&spec, a.trials)?,
        ModeArg::Homogeneity => homogeneity(&spec, a.trials, a.alpha)?,
        ModeArg::Uniformity => download_order_uniformity(&spec, a.trials, a.alpha)?,
    };
    let text = if a.json {
        to_json(&report)
    } else {
        format!(
            "{} {} N={} K={} trials={} aborted={} tests={} statistic={:.3} p={:.3e} threshold={:.3e} worst={} verdict={}",
            report.algorithm,
            report.mode,
            report.n,
            report.k,
            report.trials,
            report.aborted,
            report.tests,
            report.statistic,
            report.p_value,
            report.threshold,
            report.worst.as_deref().unwrap_or("-"),
            report.verdict
        )
    };
    println!("{text}");
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        writeln!(w, "{text}")?;
        w.flush()?;
    }
    Ok(if report.verdict == Verdict::Inconclusive { EXIT_ABORT } else { 0 })
}

#[derive(Serialize)]
struct IngestReport {
    n: usize,
    block_size: usize,
}

fn ingest(a: IngestArgs) -> Outcome {
    if a.emit {
        let (n, out) = (a.n.unwrap_or(0), a.out.as_deref().expect("clap requires --out"));
        if n == 0 || a.block_size == 0 {
            return Err(Failure::Usage("--n and --block-size must be positive".into()));
        }
        let mut w = create(out)?;
        write_blocks(&mut w, &sample_blocks(n, a.block_size))?;
        w.flush()?;
        println!("wrote {n} blocks of {} bytes to {}", a.block_size, out.display());
        return Ok(0);
    }
    let path = a.input.as_deref().expect("clap requires --input");
    let f = File::open(path).map_err(|e| Failure::Runtime(format!("cannot open {}: {e}", path.display())))?;
    let file = read_blocks(io::BufReader::new(f))?;
    let report = IngestReport { n: file.blocks.len(), block_size: file.block_size };
    if a.json {
        println!("{}", to_json(&report));
    } else {
        println!("{}: {} blocks of {} bytes", path.display(), report.n, report.block_size);
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Shuffle(a) => shuffle(a),
        Command::Oram(a) => oram(a),
        Command::Experiment(a) => experiment(a),
        Command::Oblivtest(a) => oblivtest(a),
        Command::Ingest(a) => ingest(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
