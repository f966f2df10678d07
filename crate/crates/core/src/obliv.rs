//! Empirical obliviousness checks at desk scale.
//!
//! Three modes:
//! * same-seed: with the coins fixed, the transcript must not change when σ
//!   does (holds exactly for the non-K shuffles);
//! * homogeneity: run many trials under σ0 and under σ1 with fresh coins and
//!   fresh completions of π around the known touched positions, then compare
//!   the two event distributions position by position (and as whole
//!   transcripts) with chi-square tests;
//! * uniformity: for the basic K-shuffle, the order of the phase-2 downloads
//!   must be uniform over all orderings of the untouched positions.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::crypto::{complete_permutation, keygen, random_permutation, BlockId, CipherKind, Permutation, PermutationMap, DUMMY};
use crate::error::{Error, Result};
use crate::kshuffle::TouchedSet;
use crate::runner::{execute, init_threads, session_config, Algo, RunSpec, Setup};
use crate::session::{sample_blocks, Session};
use crate::storage::{Event, TranscriptMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OblivReport {
    pub algorithm: Algo,
    pub mode: String,
    pub n: usize,
    pub k: usize,
    /// Trials per σ (or seed pairs in same-seed mode).
    pub trials: usize,
    pub aborted: usize,
    /// Number of hypothesis tests that were run.
    pub tests: usize,
    /// Largest chi-square statistic among the tests (0 in same-seed mode).
    pub statistic: f64,
    /// Smallest p-value among the tests (1 when no test ran).
    pub p_value: f64,
    /// Per-test rejection threshold after Bonferroni correction.
    pub threshold: f64,
    /// Where the smallest p-value (or first mismatch) was found.
    pub worst: Option<String>,
    pub verdict: Verdict,
}

/// Upper-tail probability of a chi-square statistic.
pub fn chi_square_sf(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    ChiSquared::new(df as f64).map(|d| d.sf(stat)).unwrap_or(f64::NAN)
}

/// Goodness of fit of `observed` counts against equal expected counts.
pub fn uniform_gof(observed: &[u64]) -> (f64, usize, f64) {
    let total: u64 = observed.iter().sum();
    let e = total as f64 / observed.len() as f64;
    let stat: f64 = observed.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    let df = observed.len().saturating_sub(1);
    (stat, df, chi_square_sf(stat, df))
}

/// Chi-square test of homogeneity between two samples of categories.
/// Categories with expected count below 5 in either sample are pooled.
/// Returns `None` when fewer than two categories remain.
pub fn homogeneity_test<K: Eq + Hash>(a: &HashMap<K, u64>, b: &HashMap<K, u64>) -> Option<(f64, usize, f64)> {
    let na: u64 = a.values().sum();
    let nb: u64 = b.values().sum();
    if na == 0 || nb == 0 {
        return None;
    }
    let total = (na + nb) as f64;
    let small = na.min(nb) as f64;
    let mut cols: Vec<(u64, u64)> = Vec::new();
    let mut pool = (0u64, 0u64);
    let keys = a.keys().chain(b.keys().filter(|k| !a.contains_key(*k)));
    for key in keys {
        let (ca, cb) = (a.get(key).copied().unwrap_or(0), b.get(key).copied().unwrap_or(0));
        if (ca + cb) as f64 * small / total < 5.0 {
            pool.0 += ca;
            pool.1 += cb;
        } else {
            cols.push((ca, cb));
        }
    }
    if pool.0 + pool.1 > 0 {
        if (pool.0 + pool.1) as f64 * small / total < 5.0 && !cols.is_empty() {
            let (i, _) = cols.iter().enumerate().min_by_key(|(_, c)| c.0 + c.1).expect("nonempty");
            cols[i].0 += pool.0;
            cols[i].1 += pool.1;
        } else {
            cols.push(pool);
        }
    }
    if cols.len() < 2 {
        return None;
    }
    let mut stat = 0.0;
    for &(ca, cb) in &cols {
        let col = (ca + cb) as f64;
        let ea = col * na as f64 / total;
        let eb = col * nb as f64 / total;
        stat += (ca as f64 - ea).powi(2) / ea + (cb as f64 - eb).powi(2) / eb;
    }
    let df = cols.len() - 1;
    Some((stat, df, chi_square_sf(stat, df)))
}

/// The adversary's two target permutations: σ0 lays the real blocks out in
/// id order from the front, σ1 in reverse order from the back.
pub fn adversarial_sigmas(m: usize, n: usize) -> (PermutationMap, PermutationMap) {
    let mut t0 = vec![DUMMY; m];
    let mut t1 = vec![DUMMY; m];
    for id in 1..=n {
        t0[id - 1] = id as BlockId;
        t1[m - id] = id as BlockId;
    }
    (
        PermutationMap::from_table(t0).expect("valid layout"),
        PermutationMap::from_table(t1).expect("valid layout"),
    )
}

/// The fixed part of the game: touched ids `1..=K` at positions drawn once
/// from the seed.
fn fixed_touched(spec: &RunSpec) -> Result<(TouchedSet, Vec<(BlockId, usize)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(5);
    let k = if spec.algo.uses_touched() { spec.k } else { 0 };
    let pi0 = random_permutation(spec.slots(), spec.n, &mut rng)?;
    let ids: Vec<BlockId> = (1..=k as BlockId).collect();
    let partial = ids.iter().map(|&id| (id, pi0.position(id))).collect();
    Ok((TouchedSet::new(ids)?, partial))
}

fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(6);
    (0..trials).map(|_| rng.gen()).collect()
}

/// One trial with fresh coins and a fresh completion of π; `None` on abort.
fn trial(
    spec: &RunSpec,
    sigma: &PermutationMap,
    touched: &TouchedSet,
    partial: &[(BlockId, usize)],
    seed: u64,
) -> Result<Option<Vec<Event>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let pi = complete_permutation(partial, spec.slots(), spec.n, &mut rng)?;
    let mut cfg = session_config(spec);
    cfg.transcript = TranscriptMode::Full;
    let mut sess = Session::new(keygen(seed), &cfg, spec.slots(), seed);
    let blocks = sample_blocks(spec.n, cfg.block_size);
    let source = sess.setup_source("source", &blocks, &pi)?;
    let setup = Setup { pi, sigma: sigma.clone(), touched: touched.clone() };
    match execute(&mut sess, spec, source, &setup) {
        Ok(_) => Ok(Some(sess.store.transcript().events().to_vec())),
        Err(e) if e.is_abort() => Ok(None),
        Err(e) => Err(e),
    }
}

fn collect(
    spec: &RunSpec,
    sigma: &PermutationMap,
    touched: &TouchedSet,
    partial: &[(BlockId, usize)],
    seeds: &[u64],
) -> Result<Vec<Option<Vec<Event>>>> {
    seeds.par_iter().map(|&s| trial(spec, sigma, touched, partial, s)).collect()
}

fn empty_report(spec: &RunSpec, mode: &str, trials: usize) -> OblivReport {
    OblivReport {
        algorithm: spec.algo,
        mode: mode.into(),
        n: spec.n,
        k: if spec.algo.uses_touched() { spec.k } else { 0 },
        trials,
        aborted: 0,
        tests: 0,
        statistic: 0.0,
        p_value: 1.0,
        threshold: 0.0,
        worst: None,
        verdict: Verdict::Pass,
    }
}

fn inconclusive(aborted: usize, runs: usize) -> bool {
    aborted as f64 > 0.01 * runs as f64
}

/// Same coins, two different σ: the transcript digests must agree. Uses the
/// plain cipher backend; the coins are the same under either backend.
pub fn same_seed(spec: &RunSpec, pairs: usize) -> Result<OblivReport> {
    spec.validate()?;
    init_threads();
    let mut report = empty_report(spec, "same-seed", pairs);
    let outcomes: Vec<Result<Option<bool>>> = (0..pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.clone();
            s.seed = spec.seed.wrapping_add(i);
            s.cipher = CipherKind::Plain;
            s.transcript = TranscriptMode::Digest;
            let setup = Setup::draw(&s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            rng.set_stream(7);
            let mut sigma1 = random_permutation(s.slots(), s.n, &mut rng)?;
            while s.n > 1 && sigma1 == setup.sigma {
                sigma1 = random_permutation(s.slots(), s.n, &mut rng)?;
            }
            let mut digests = Vec::new();
            for sigma in [&setup.sigma, &sigma1] {
                let mut sess = Session::new(keygen(s.seed), &session_config(&s), s.slots(), s.seed);
                let blocks = sample_blocks(s.n, s.block_size);
                let source = sess.setup_source("source", &blocks, &setup.pi)?;
                let one = Setup { sigma: sigma.clone(), ..setup.clone() };
                match execute(&mut sess, &s, source, &one) {
                    Ok(_) => digests.push(sess.store.transcript().digest()),
                    Err(e) if e.is_abort() => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            Ok(Some(digests[0] == digests[1]))
        })
        .collect();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o? {
            None => report.aborted += 1,
            Some(true) => report.tests += 1,
            Some(false) => {
                report.tests += 1;
                if report.worst.is_none() {
                    report.worst = Some(format!("seed {} digest mismatch", spec.seed.wrapping_add(i as u64)));
                }
                report.verdict = Verdict::Fail;
            }
        }
    }
    if report.verdict == Verdict::Pass && inconclusive(report.aborted, pairs) {
        report.verdict = Verdict::Inconclusive;
    }
    Ok(report)
}

fn at_position<'a>(ts: &[&'a Vec<Event>], p: usize) -> HashMap<Option<&'a Event>, u64> {
    let mut m = HashMap::new();
    for t in ts {
        *m.entry(t.get(p)).or_default() += 1;
    }
    m
}

fn whole<'a>(ts: &[&'a Vec<Event>]) -> HashMap<&'a Vec<Event>, u64> {
    let mut m = HashMap::new();
    for t in ts {
        *m.entry(*t).or_default() += 1;
    }
    m
}

/// Compares the transcript distributions under the two adversarial σ with
/// `trials` runs each, at family-wise level `alpha`.
pub fn homogeneity(spec: &RunSpec, trials: usize, alpha: f64) -> Result<OblivReport> {
    spec.validate()?;
    init_threads();
    let (touched, partial) = fixed_touched(spec)?;
    let (s0, s1) = adversarial_sigmas(spec.slots(), spec.n);
    let seeds = trial_seeds(spec.seed, 2 * trials);
    let runs0 = collect(spec, &s0, &touched, &partial, &seeds[..trials])?;
    let runs1 = collect(spec, &s1, &touched, &partial, &seeds[trials..])?;
    let mut report = empty_report(spec, "homogeneity", trials);
    report.aborted = runs0.iter().chain(&runs1).filter(|r| r.is_none()).count();
    let t0: Vec<&Vec<Event>> = runs0.iter().flatten().collect();
    let t1: Vec<&Vec<Event>> = runs1.iter().flatten().collect();

    let mut results: Vec<(String, f64, f64)> = Vec::new();
    let len = t0.iter().chain(&t1).map(|t| t.len()).max().unwrap_or(0);
    for p in 0..len {
        if let Some((stat, _, pv)) = homogeneity_test(&at_position(&t0, p), &at_position(&t1, p)) {
            results.push((format!("event {p}"), stat, pv));
        }
    }
    if let Some((stat, _, pv)) = homogeneity_test(&whole(&t0), &whole(&t1)) {
        results.push(("whole transcript".into(), stat, pv));
    }

    report.tests = results.len();
    report.threshold = if results.is_empty() { alpha } else { alpha / results.len() as f64 };
    report.statistic = results.iter().map(|r| r.1).fold(0.0, f64::max);
    if let Some(w) = results.iter().min_by(|a, b| a.2.total_cmp(&b.2)) {
        report.p_value = w.2;
        report.worst = Some(w.0.clone());
    }
    report.verdict = if inconclusive(report.aborted, 2 * trials) {
        Verdict::Inconclusive
    } else if report.p_value < report.threshold {
        Verdict::Fail
    } else {
        Verdict::Pass
    };
    Ok(report)
}

/// Orderings of `k` items, or `None` above 10! of them.
fn factorial(k: usize) -> Option<usize> {
    (1..=k).try_fold(1usize, |acc, i| acc.checked_mul(i).filter(|&v| v <= 3_628_800))
}

/// Rank of `perm` (a permutation of `0..len`) in lexicographic order.
fn lehmer_rank(perm: &[usize]) -> usize {
    let mut rank = 0;
    for i in 0..perm.len() {
        let smaller = perm[i + 1..].iter().filter(|&&x| x < perm[i]).count();
        rank = rank * (perm.len() - i) + smaller;
    }
    rank
}

/// The basic K-shuffle's phase-2 download sequence, taken over fresh π
/// completions and fresh coins, must be uniform over the `(N−K)!` orderings
/// of the untouched positions.
pub fn download_order_uniformity(spec: &RunSpec, trials: usize, alpha: f64) -> Result<OblivReport> {
    spec.validate()?;
    if spec.algo != Algo::Basic {
        return Err(Error::invalid("download-order uniformity applies to the basic K-shuffle"));
    }
    init_threads();
    let (n, k) = (spec.n, spec.k);
    let cells = factorial(n - k).ok_or_else(|| Error::invalid(format!("(N−K)! is too large for N = {n}, K = {k}")))?;
    let (touched, partial) = fixed_touched(spec)?;
    let fixed: Vec<usize> = partial.iter().map(|p| p.1).collect();
    let untouched: Vec<usize> = (0..n).filter(|p| !fixed.contains(p)).collect();
    let (sigma, _) = adversarial_sigmas(n, n);
    let runs = collect(spec, &sigma, &touched, &partial, &trial_seeds(spec.seed, trials))?;
    let mut report = empty_report(spec, "uniformity", trials);
    let mut counts = vec![0u64; cells];
    for (i, run) in runs.iter().enumerate() {
        let Some(events) = run else {
            report.aborted += 1;
            continue;
        };
        let order: Vec<usize> = events
            .iter()
            .filter_map(|e| match e {
                Event::Download { index, .. } => Some(*index as usize),
                _ => None,
            })
            .skip(k)
            .map(|pos| untouched.iter().position(|&u| u == pos).unwrap_or(usize::MAX))
            .collect();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..untouched.len()).collect::<Vec<_>>() {
            report.verdict = Verdict::Fail;
            report.worst = Some(format!("trial {i} downloaded {order:?}, not an ordering of the untouched positions"));
            return Ok(report);
        }
        counts[lehmer_rank(&order)] += 1;
    }
    let (stat, _, pv) = uniform_gof(&counts);
    report.tests = 1;
    report.threshold = alpha;
    report.statistic = stat;
    report.p_value = pv;
    report.worst = Some(format!("{cells} orderings"));
    report.verdict = if inconclusive(report.aborted, trials) {
        Verdict::Inconclusive
    } else if pv < alpha {
        Verdict::Fail
    } else {
        Verdict::Pass
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kshuffle::BasicVariant;
    use crate::spray::Gate;

    fn spec(algo: Algo, n: usize, k: usize) -> RunSpec {
        let mut s = RunSpec::new(algo, n);
        s.k = k;
        s.cipher = CipherKind::Plain;
        s.gate = Gate::Off;
        s.seed = 3;
        s
    }

    #[test]
    fn chi_square_tail_reference_values() {
        // Critical values from standard tables.
        assert!((chi_square_sf(3.841, 1) - 0.05).abs() < 1e-3);
        assert!((chi_square_sf(20.515, 5) - 0.001).abs() < 1e-4);
        assert_eq!(chi_square_sf(1.0, 0), 1.0);
    }

    #[test]
    fn homogeneity_detects_shift_and_pools() {
        let a: HashMap<u8, u64> = [(0, 500), (1, 500), (2, 1)].into();
        let b: HashMap<u8, u64> = [(0, 500), (1, 500), (3, 2)].into();
        let (_, df, p) = homogeneity_test(&a, &b).unwrap();
        assert_eq!(df, 1);
        assert!(p > 0.5);
        let c: HashMap<u8, u64> = [(0, 800), (1, 200)].into();
        assert!(homogeneity_test(&a, &c).unwrap().2 < 1e-10);
        let one: HashMap<u8, u64> = [(0, 10)].into();
        assert!(homogeneity_test(&one, &one).is_none());
    }

    #[test]
    fn lehmer_ranks_are_a_bijection() {
        let mut seen = vec![false; 24];
        let mut perm = [0usize, 1, 2, 3];
        // Heap's algorithm over all 24 orderings.
        let mut c = [0usize; 4];
        seen[lehmer_rank(&perm)] = true;
        let mut i = 0;
        while i < 4 {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                seen[lehmer_rank(&perm)] = true;
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn root_same_seed_passes() {
        let r = same_seed(&spec(Algo::Root, 40, 0), 10).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert_eq!(r.tests, 10);
    }

    #[test]
    fn basic_uniformity_passes_small() {
        let r = download_order_uniformity(&spec(Algo::Basic, 5, 2), 6000, 1e-3).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn basic_homogeneity_passes_and_mutant_fails() {
        let r = homogeneity(&spec(Algo::Basic, 5, 2), 4000, 1e-3).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
        let mut m = spec(Algo::Basic, 5, 2);
        m.variant = BasicVariant::NeededOnly;
        let r = homogeneity(&m, 4000, 1e-3).unwrap();
        assert_eq!(r.verdict, Verdict::Fail, "{r:?}");
    }

    #[test]
    fn ascending_mutant_fails_uniformity() {
        let mut m = spec(Algo::Basic, 5, 2);
        m.variant = BasicVariant::Ascending;
        let r = download_order_uniformity(&m, 600, 1e-3).unwrap();
        assert_eq!(r.verdict, Verdict::Fail, "{r:?}");
    }

    #[test]
    fn uniformity_rejects_other_algorithms() {
        assert!(download_order_uniformity(&spec(Algo::Root, 5, 0), 10, 1e-3).is_err());
    }
}
