//! Timing harness for certification, packing, batch verification and
//! end-to-end presentation throughput. Results go to CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, ManualClock, Timestamp};
use crate::credential::{select_disclosure, Attribute, Credential, Nonce, Presentation, SessionId, UnsignedPresentation};
use crate::crypto::{batch_verify, keygen, pack, AttributeBinding, CryptoError, KeyPair, Signature};
use crate::idp::{issue_signatures, IdentityProvider, NonceSignRequest};
use crate::inference::Predicate;
use crate::sp::{Challenge, ServicePolicy, ServiceProvider};
use crate::wire::RawAttribute;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Certify,
    Pack,
    Verify,
    Requests,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::Certify, Experiment::Pack, Experiment::Verify, Experiment::Requests];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Certify => "certify",
            Experiment::Pack => "pack",
            Experiment::Verify => "verify",
            Experiment::Requests => "requests",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

/// One CSV row. Column order is field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub experiment: Experiment,
    pub key_bits: usize,
    pub attribute_count: usize,
    /// Zero outside the requests experiment.
    pub request_count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    /// Operations (or requests) per second.
    pub throughput_per_s: f64,
    pub host_descriptor: String,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
    pub attr_counts: Vec<usize>,
    pub request_counts: Vec<usize>,
    pub attrs_per_request: usize,
    pub parallel: usize,
    /// Distinct presentations generated for the requests experiment; larger
    /// counts cycle through them with re-armed challenges.
    pub presentation_pool: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 30,
            iterations: 100,
            attr_counts: vec![1, 5, 10, 20, 30, 40, 50],
            request_counts: vec![2000, 5000, 10000, 20000],
            attrs_per_request: 20,
            parallel: 1,
            presentation_pool: 2000,
        }
    }
}

impl BenchConfig {
    /// Small sizes for smoke tests.
    pub fn quick() -> Self {
        BenchConfig {
            warmup: 3,
            iterations: 10,
            attr_counts: vec![1, 10, 20],
            request_counts: vec![50, 100, 200],
            attrs_per_request: 5,
            parallel: 1,
            presentation_pool: 50,
        }
    }
}

/// OS, architecture, CPU count and model of the current machine.
pub fn host_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string()))
        .unwrap_or_else(|| "unknown-cpu".into());
    format!("{}-{} cpus={} {}", std::env::consts::OS, std::env::consts::ARCH, cpus, model)
}

/// Reference values from the original measurements, in the unit each experiment reports.
pub fn reference_value(experiment: Experiment, key_bits: usize) -> Option<(f64, &'static str)> {
    match (experiment, key_bits) {
        (Experiment::Certify, 1024) => Some((2.64, "ms/attr")),
        (Experiment::Certify, 2048) => Some((18.92, "ms/attr")),
        (Experiment::Pack, 1024) => Some((0.19, "ms@50")),
        (Experiment::Pack, 2048) => Some((0.62, "ms@50")),
        (Experiment::Verify, 1024) => Some((0.67, "ms@50")),
        (Experiment::Verify, 2048) => Some((1.53, "ms@50")),
        (Experiment::Requests, 1024) => Some((3332.0, "req/s")),
        (Experiment::Requests, 2048) => Some((1426.0, "req/s")),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(LinearFit { slope, intercept, r_squared })
}

struct Stats {
    mean_ms: f64,
    p50_ms: f64,
    p99_ms: f64,
}

fn stats(mut samples_ms: Vec<f64>) -> Stats {
    samples_ms.sort_by(f64::total_cmp);
    let n = samples_ms.len();
    let rank = |q: f64| samples_ms[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
    Stats { mean_ms: samples_ms.iter().sum::<f64>() / n as f64, p50_ms: rank(0.50), p99_ms: rank(0.99) }
}

/// Times `op(n)` for every `n` in `counts`. Samples are taken round-robin
/// across the counts so drift in machine load spreads over the whole series,
/// and fast operations are batched so each sample spans at least ~2 ms.
fn measure_series(cfg: &BenchConfig, counts: &[usize], mut op: impl FnMut(usize)) -> Vec<Stats> {
    let reps: Vec<usize> = counts
        .iter()
        .map(|&n| {
            let t = Instant::now();
            op(n);
            let once = t.elapsed();
            if once >= Duration::from_millis(2) {
                1
            } else {
                (2_000_000 / once.as_nanos().max(1)) as usize + 1
            }
        })
        .collect();
    let mut sample = |i: usize| {
        let t = Instant::now();
        for _ in 0..reps[i] {
            op(counts[i]);
        }
        t.elapsed().as_secs_f64() * 1e3 / reps[i] as f64
    };
    for _ in 0..cfg.warmup {
        for i in 0..counts.len() {
            sample(i);
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.iterations); counts.len()];
    for round in 0..cfg.iterations {
        for k in 0..counts.len() {
            let i = (round + k) % counts.len();
            samples[i].push(sample(i));
        }
    }
    samples.into_iter().map(stats).collect()
}

fn row(experiment: Experiment, key_bits: usize, attribute_count: usize, s: Stats, host: &str) -> BenchResult {
    BenchResult {
        experiment,
        key_bits,
        attribute_count,
        request_count: 0,
        throughput_per_s: 1e3 / s.mean_ms,
        mean_ms: s.mean_ms,
        p50_ms: s.p50_ms,
        p99_ms: s.p99_ms,
        host_descriptor: host.to_string(),
    }
}

fn bench_attributes(n: usize) -> Vec<Attribute> {
    (0..n).map(|i| Attribute::new(format!("attr_{i:02}"), format!("value-{i:04}-{}", "x".repeat(12))).unwrap()).collect()
}

/// Key material for one modulus size: an IdP key and a user key.
pub struct BenchKeys {
    pub bits: usize,
    pub idp: KeyPair,
    pub user: KeyPair,
}

impl BenchKeys {
    pub fn generate(bits: usize) -> Result<Self, CryptoError> {
        Ok(BenchKeys { bits, idp: keygen(bits)?, user: keygen(bits)? })
    }
}

fn t_exp() -> Timestamp {
    Timestamp::from_ymd_hms(2030, 1, 1, 0, 0, 0).unwrap()
}

/// Time to sign `n` attributes, as done at registration.
pub fn bench_certify(keys: &BenchKeys, cfg: &BenchConfig) -> Vec<BenchResult> {
    let host = host_descriptor();
    let max = cfg.attr_counts.iter().copied().max().unwrap_or(0);
    let attrs = bench_attributes(max);
    let stats = measure_series(cfg, &cfg.attr_counts, |n| {
        std::hint::black_box(issue_signatures(keys.idp.signing_key(), &attrs[..n], keys.user.verification_key(), t_exp()));
    });
    cfg.attr_counts.iter().zip(stats).map(|(&n, s)| row(Experiment::Certify, keys.bits, n, s, &host)).collect()
}

fn signed_attributes(keys: &BenchKeys, n: usize) -> (Vec<Attribute>, Vec<Signature>) {
    let attrs = bench_attributes(n);
    let sigs = issue_signatures(keys.idp.signing_key(), &attrs, keys.user.verification_key(), t_exp());
    (attrs, sigs)
}

pub fn bench_pack(keys: &BenchKeys, cfg: &BenchConfig) -> Vec<BenchResult> {
    let host = host_descriptor();
    let modulus = keys.idp.verification_key().modulus();
    let max = cfg.attr_counts.iter().copied().max().unwrap_or(0);
    let (_, sigs) = signed_attributes(keys, max);
    let stats = measure_series(cfg, &cfg.attr_counts, |n| {
        std::hint::black_box(pack(&sigs[..n], modulus).unwrap());
    });
    cfg.attr_counts.iter().zip(stats).map(|(&n, s)| row(Experiment::Pack, keys.bits, n, s, &host)).collect()
}

pub fn bench_verify(keys: &BenchKeys, cfg: &BenchConfig) -> Vec<BenchResult> {
    let host = host_descriptor();
    let idp_vk = keys.idp.verification_key();
    let user_vk = keys.user.verification_key();
    let max = cfg.attr_counts.iter().copied().max().unwrap_or(0);
    let (attrs, sigs) = signed_attributes(keys, max);
    let cases = cfg
        .attr_counts
        .iter()
        .map(|&n| {
            let packed = pack(&sigs[..n], idp_vk.modulus()).unwrap();
            let bindings: Vec<_> =
                attrs[..n].iter().map(|a| AttributeBinding { attribute: a, user_vk, t_exp: t_exp() }).collect();
            assert!(batch_verify(idp_vk, &bindings, &packed).unwrap());
            (n, (bindings, packed))
        })
        .collect::<BTreeMap<_, _>>();
    let stats = measure_series(cfg, &cfg.attr_counts, |n| {
        let (bindings, packed) = &cases[&n];
        std::hint::black_box(batch_verify(idp_vk, bindings, packed).unwrap());
    });
    cfg.attr_counts.iter().zip(stats).map(|(&n, s)| row(Experiment::Verify, keys.bits, n, s, &host)).collect()
}

struct RequestFixture {
    policy: ServicePolicy,
    clock: ManualClock,
    items: Vec<(Challenge, Presentation)>,
}

fn request_fixture(keys: &BenchKeys, cfg: &BenchConfig, pool: usize) -> RequestFixture {
    let clock = ManualClock::new(Timestamp::from_ymd_hms(2024, 1, 1, 0, 0, 0).unwrap());
    let idp = IdentityProvider::new(keys.idp.clone(), Arc::new(clock.clone()));
    let user = &keys.user;
    let raw: Vec<RawAttribute> = bench_attributes(cfg.attrs_per_request)
        .iter()
        .map(|a| RawAttribute { key: a.key().into(), value: a.value().into() })
        .collect();
    let credential: Credential =
        idp.register(&raw, user.verification_key(), Duration::from_secs(365 * 86400)).expect("fresh registry");
    let required: Vec<Predicate> = raw.iter().map(|a| Predicate::reveal(a.key.clone()).unwrap()).collect();
    let keys_wanted: BTreeSet<String> = raw.iter().map(|a| a.key.clone()).collect();
    let policy = ServicePolicy::new("bench", required.clone(), idp.verification_key().clone()).unwrap();
    let (disclosed, packed) = select_disclosure(&credential, &keys_wanted, idp.verification_key().modulus()).unwrap();

    let items = (0..pool)
        .map(|_| {
            let challenge = Challenge {
                nonce: Nonce::random(),
                session_id: SessionId::random(),
                required: required.clone(),
                issued_at: clock.now(),
                ttl: policy.challenge_ttl,
            };
            let signed_nonce = idp
                .sign_nonce(&NonceSignRequest { user_vk: user.verification_key().clone(), nonce: challenge.nonce })
                .unwrap();
            let p = UnsignedPresentation {
                disclosed: disclosed.clone(),
                packed: packed.clone(),
                user_vk: user.verification_key().clone(),
                expires_at: credential.expires_at(),
                timestamp: clock.now(),
                session_id: challenge.session_id,
                signed_nonce,
            }
            .sign(user.signing_key(), challenge.nonce.as_bytes());
            (challenge, p)
        })
        .collect();
    RequestFixture { policy, clock, items }
}

/// Runs `count` full presentation verifications and returns the wall time
/// plus each request's latency.
fn drive_requests(fx: &RequestFixture, user: &KeyPair, count: usize, parallel: usize) -> (Duration, Vec<f64>) {
    let mut wall = Duration::ZERO;
    let mut latencies = Vec::with_capacity(count);
    let mut done = 0;
    while done < count {
        let batch = (count - done).min(fx.items.len());
        let sp = Arc::new(ServiceProvider::new(fx.policy.clone(), Arc::new(fx.clock.clone())).unwrap());
        for (c, _) in &fx.items[..batch] {
            sp.import_challenge(c.clone(), user.verification_key());
        }
        let next = AtomicUsize::new(0);
        let items = &fx.items[..batch];
        let t = Instant::now();
        let per_thread: Vec<Vec<f64>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..parallel.max(1))
                .map(|_| {
                    let sp = sp.clone();
                    let next = &next;
                    s.spawn(move || {
                        let mut out = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some((c, p)) = items.get(i) else { break };
                            let t = Instant::now();
                            sp.verify_presentation(p, &c.nonce).expect("pre-generated presentation verifies");
                            out.push(t.elapsed().as_secs_f64() * 1e3);
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        wall += t.elapsed();
        latencies.extend(per_thread.into_iter().flatten());
        done += batch;
    }
    (wall, latencies)
}

pub fn bench_requests(keys: &BenchKeys, cfg: &BenchConfig) -> Vec<BenchResult> {
    let host = host_descriptor();
    let max = cfg.request_counts.iter().copied().max().unwrap_or(0);
    let fx = request_fixture(keys, cfg, cfg.presentation_pool.min(max).max(1));
    drive_requests(&fx, &keys.user, fx.items.len().min(cfg.warmup.max(1) * 10), cfg.parallel);
    cfg.request_counts
        .iter()
        .map(|&n| {
            let (wall, latencies) = drive_requests(&fx, &keys.user, n, cfg.parallel);
            let s = stats(latencies);
            BenchResult {
                experiment: Experiment::Requests,
                key_bits: keys.bits,
                attribute_count: cfg.attrs_per_request,
                request_count: n,
                mean_ms: s.mean_ms,
                p50_ms: s.p50_ms,
                p99_ms: s.p99_ms,
                throughput_per_s: n as f64 / wall.as_secs_f64(),
                host_descriptor: host.clone(),
            }
        })
        .collect()
}

pub fn run(keys: &BenchKeys, experiment: Experiment, cfg: &BenchConfig) -> Vec<BenchResult> {
    match experiment {
        Experiment::Certify => bench_certify(keys, cfg),
        Experiment::Pack => bench_pack(keys, cfg),
        Experiment::Verify => bench_verify(keys, cfg),
        Experiment::Requests => bench_requests(keys, cfg),
    }
}

pub fn write_csv<W: io::Write>(results: &[BenchResult], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<BenchResult>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
}

pub const MIN_R_SQUARED: f64 = 0.98;

impl BenchReport {
    fn rows(&self, e: Experiment, bits: usize) -> Vec<&BenchResult> {
        self.results.iter().filter(|r| r.experiment == e && r.key_bits == bits).collect()
    }

    fn key_sizes(&self) -> BTreeSet<usize> {
        self.results.iter().map(|r| r.key_bits).collect()
    }

    /// Points fitted for the linearity check: median time against attribute
    /// count, or total elapsed time against request count.
    pub fn series(&self, e: Experiment, bits: usize) -> Vec<(f64, f64)> {
        self.rows(e, bits)
            .into_iter()
            .map(|r| match e {
                Experiment::Requests => (r.request_count as f64, r.request_count as f64 / r.throughput_per_s),
                _ => (r.attribute_count as f64, r.p50_ms),
            })
            .collect()
    }

    pub fn linearity_checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        for bits in self.key_sizes() {
            for e in Experiment::ALL {
                let points = self.series(e, bits);
                if points.len() < 3 {
                    continue;
                }
                let (passed, detail) = match linear_fit(&points) {
                    Some(f) => (f.r_squared >= MIN_R_SQUARED, format!("R²={:.4} slope={:.5}", f.r_squared, f.slope)),
                    None => (false, "degenerate series".into()),
                };
                out.push(Check { name: format!("{} {bits}-bit linear", e.as_str()), passed, detail });
            }
        }
        out
    }

    /// Smaller keys must be faster over each experiment's whole series:
    /// summed median time for the per-attribute experiments, total elapsed
    /// time for requests. Points where the order flips are listed.
    pub fn ordering_checks(&self) -> Vec<Check> {
        let sizes: Vec<usize> = self.key_sizes().into_iter().collect();
        let cost = |e: Experiment, r: &BenchResult| match e {
            Experiment::Requests => r.request_count as f64 / r.throughput_per_s,
            _ => r.p50_ms,
        };
        let mut out = Vec::new();
        for pair in sizes.windows(2) {
            let (small, large) = (pair[0], pair[1]);
            for e in Experiment::ALL {
                let (mut total_small, mut total_large) = (0.0, 0.0);
                let mut flips = Vec::new();
                for ra in self.rows(e, small) {
                    let Some(rb) = self.rows(e, large).into_iter().find(|rb| {
                        rb.attribute_count == ra.attribute_count && rb.request_count == ra.request_count
                    }) else {
                        continue;
                    };
                    let (ca, cb) = (cost(e, ra), cost(e, rb));
                    total_small += ca;
                    total_large += cb;
                    if ca >= cb {
                        flips.push(format!("n={}", ra.attribute_count.max(ra.request_count)));
                    }
                }
                if total_large > 0.0 {
                    let mut detail = format!("{:.2}x", total_large / total_small);
                    if !flips.is_empty() {
                        detail.push_str(&format!(", not faster at {}", flips.join(",")));
                    }
                    out.push(Check {
                        name: format!("{} {small} faster than {large}", e.as_str()),
                        passed: total_small < total_large,
                        detail,
                    });
                }
            }
        }
        out
    }

    /// Measured values next to the reference values.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "host: {}", host_descriptor());
        let _ = writeln!(s, "{:<10} {:>5} {:>14} {:>14}", "experiment", "bits", "measured", "reference");
        for bits in self.key_sizes() {
            for e in Experiment::ALL {
                let rows = self.rows(e, bits);
                if rows.is_empty() {
                    continue;
                }
                let measured = match e {
                    Experiment::Certify => {
                        let r = rows.iter().max_by_key(|r| r.attribute_count).unwrap();
                        r.mean_ms / r.attribute_count as f64
                    }
                    Experiment::Pack | Experiment::Verify => {
                        rows.iter().max_by_key(|r| r.attribute_count).unwrap().mean_ms
                    }
                    Experiment::Requests => rows.iter().max_by_key(|r| r.request_count).unwrap().throughput_per_s,
                };
                let (reference, unit) = reference_value(e, bits).map(|(v, u)| (format!("{v}"), u)).unwrap_or(("-".into(), ""));
                let _ = writeln!(s, "{:<10} {:>5} {:>14.3} {:>14} {unit}", e.as_str(), bits, measured, reference);
            }
        }
        for c in self.linearity_checks().into_iter().chain(self.ordering_checks()) {
            let _ = writeln!(s, "[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}
