use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use prima_core::agent::{self, Consent, LoginOptions, Wallet, WalletFile};
use prima_core::bench::{self, BenchConfig, BenchKeys, BenchReport, Experiment};
use prima_core::clock::{Clock, SystemClock};
use prima_core::config::{write_json, IdpConfig, SpConfig};
use prima_core::crypto::{KeyId, DEFAULT_MODULUS_BITS};
use prima_core::idp::{IdentityProvider, RateLimiter};
use prima_core::inference::Predicate;
use prima_core::scenarios::{builtin, builtins, run_scenario, ScenarioScript, TransportKind};
use prima_core::sp::ServiceProvider;
use prima_core::wire::{HttpClient, HttpServer, RawAttribute};

#[derive(Parser)]
#[command(name = "prima", version, about = "Federated login with packed attribute credentials")]
struct Cli {
    /// Wallet file used by the user-side commands.
    #[arg(long, global = true, env = "PRIMA_WALLET", default_value = "prima-wallet.bin")]
    wallet: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or inspect the local wallet.
    #[command(subcommand)]
    Wallet(WalletCmd),
    /// Register attributes with an IdP and store the credential.
    Enroll(EnrollArgs),
    /// Log in to a service provider.
    Login(LoginArgs),
    /// Run the micro-benchmarks.
    Bench(BenchArgs),
    /// Run the scripted end-to-end scenarios.
    #[command(subcommand)]
    Scenarios(ScenarioCmd),
    /// Identity provider daemon.
    #[command(subcommand)]
    Idp(IdpCmd),
    /// Service provider daemon.
    #[command(subcommand)]
    Sp(SpCmd),
}

#[derive(Subcommand)]
enum WalletCmd {
    Init {
        #[arg(long, default_value_t = DEFAULT_MODULUS_BITS)]
        bits: usize,
    },
    Show,
}

#[derive(Args)]
struct EnrollArgs {
    /// IdP base URL.
    #[arg(long)]
    idp: String,
    /// Attribute as key=value; repeatable.
    #[arg(long = "attr", value_parser = parse_attr, required = true)]
    attrs: Vec<RawAttribute>,
    #[arg(long, default_value_t = 365)]
    days: u64,
    /// Overwrite a credential already held from this IdP.
    #[arg(long)]
    replace: bool,
}

#[derive(Args)]
struct LoginArgs {
    /// SP base URL.
    #[arg(long)]
    sp: String,
    /// Attribute keys the user agrees to reveal, comma-separated.
    #[arg(long, value_delimiter = ',')]
    disclose: Vec<String>,
    /// Predicate the user agrees to prove, such as age_over:16; repeatable.
    #[arg(long = "consent-proof", value_parser = parse_predicate)]
    consent_proof: Vec<Predicate>,
    /// Ask the IdP again even if a cached statement is still valid.
    #[arg(long)]
    fresh: bool,
    /// Key id of the IdP whose credential to use.
    #[arg(long)]
    idp_key_id: Option<KeyId>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchTarget {
    Certify,
    Pack,
    Verify,
    Requests,
    All,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    experiment: BenchTarget,
    /// Modulus sizes; repeatable.
    #[arg(long = "bits", default_values_t = [1024, 2048])]
    bits: Vec<usize>,
    /// CSV output; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Small sizes for a smoke run.
    #[arg(long)]
    quick: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Loopback,
    Http,
    Both,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    List,
    Run {
        /// Built-in script names.
        names: Vec<String>,
        #[arg(long)]
        all: bool,
        /// Script files to run in addition to named built-ins.
        #[arg(long = "file")]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "loopback")]
        transport: TransportArg,
    },
}

#[derive(Subcommand)]
enum IdpCmd {
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the IdP verification key for SP configuration.
    ExportKey {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SpCmd {
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct CliError {
    code: String,
    detail: String,
}

impl CliError {
    fn new(code: impl Into<String>, detail: impl fmt::Display) -> Self {
        CliError { code: code.into(), detail: detail.to_string() }
    }
}

impl From<agent::AgentError> for CliError {
    fn from(e: agent::AgentError) -> Self {
        CliError::new(e.code(), &e)
    }
}

impl From<agent::WalletError> for CliError {
    fn from(e: agent::WalletError) -> Self {
        CliError::new("wallet", e)
    }
}

impl From<prima_core::config::ConfigError> for CliError {
    fn from(e: prima_core::config::ConfigError) -> Self {
        CliError::new("config", e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("io", e)
    }
}

type CliResult = Result<(), CliError>;

fn parse_attr(s: &str) -> Result<RawAttribute, String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok(RawAttribute { key: k.to_string(), value: v.to_string() })
}

fn parse_predicate(s: &str) -> Result<Predicate, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn http(url: &str) -> Result<HttpClient, CliError> {
    HttpClient::new(url).map_err(|e| CliError::new("network", e))
}

fn wallet_cmd(path: &Path, cmd: WalletCmd) -> CliResult {
    match cmd {
        WalletCmd::Init { bits } => {
            let w = WalletFile::create(path, Wallet::generate(bits)?)?;
            print_json(&json!({
                "wallet": w.path().display().to_string(),
                "user_key_id": w.wallet.user_vk().key_id(),
                "modulus_bits": bits,
            }));
        }
        WalletCmd::Show => {
            let w = WalletFile::open(path)?;
            let entries: Vec<_> = w
                .wallet
                .entries()
                .map(|e| {
                    json!({
                        "idp_key_id": e.idp_vk.key_id(),
                        "idp_endpoint": e.idp_endpoint,
                        "issued_at": e.credential.issued_at(),
                        "expires_at": e.credential.expires_at(),
                        "attributes": e.credential.attributes().iter().map(|a| (a.key(), a.value())).collect::<std::collections::BTreeMap<_, _>>(),
                        "derived": e.derived.iter().map(|d| d.attribute.key()).collect::<Vec<_>>(),
                    })
                })
                .collect();
            print_json(&json!({ "user_key_id": w.wallet.user_vk().key_id(), "credentials": entries }));
        }
    }
    Ok(())
}

fn enroll(path: &Path, args: EnrollArgs) -> CliResult {
    let mut w = WalletFile::open(path)?;
    let idp = http(&args.idp)?;
    let validity = Duration::from_secs(args.days.saturating_mul(86_400));
    let credential = agent::enroll(&mut w.wallet, &idp, &args.idp, args.attrs, validity, args.replace, &SystemClock)?;
    w.save()?;
    print_json(&json!({
        "idp_key_id": w.wallet.entries().find(|e| e.idp_endpoint == args.idp).map(|e| e.idp_vk.key_id()),
        "attributes": credential.attributes().iter().map(|a| a.key()).collect::<Vec<_>>(),
        "expires_at": credential.expires_at(),
    }));
    Ok(())
}

/// Shows the request on stderr and reads a yes/no answer from stdin.
fn prompt_consent(required: &[Predicate]) -> Consent {
    let mut err = io::stderr().lock();
    let _ = writeln!(err, "The service asks for:");
    for p in required {
        let _ = writeln!(err, "  {}", p.statement_key());
    }
    let _ = write!(err, "Approve? [y/N] ");
    let _ = err.flush();
    let mut line = String::new();
    let _ = io::stdin().lock().read_line(&mut line);
    if !io::stdin().is_terminal() {
        let _ = writeln!(io::stderr());
    }
    if matches!(line.trim(), "y" | "Y" | "yes") {
        Consent::new(required)
    } else {
        Consent::default()
    }
}

fn login(path: &Path, args: LoginArgs) -> CliResult {
    let mut w = WalletFile::open(path)?;
    let idp_id = match args.idp_key_id {
        Some(id) => id,
        None => {
            let ids: Vec<KeyId> = w.wallet.entries().map(|e| e.idp_vk.key_id()).collect();
            match ids.as_slice() {
                [one] => *one,
                [] => return Err(CliError::new("no-credential", "wallet holds no credential; run enroll first")),
                _ => return Err(CliError::new("no-credential", "several IdPs in wallet; pass --idp-key-id")),
            }
        }
    };
    let endpoint = w.wallet.entry(&idp_id).map(|e| e.idp_endpoint.clone()).unwrap_or_default();
    let idp = http(&endpoint)?;
    let sp = http(&args.sp)?;
    let interactive = args.disclose.is_empty() && args.consent_proof.is_empty();
    let mut approved: Vec<Predicate> = args.consent_proof;
    for k in &args.disclose {
        approved.push(Predicate::reveal(k.trim()).map_err(|e| CliError::new("usage", e))?);
    }
    let consent = |required: &[Predicate]| if interactive { prompt_consent(required) } else { Consent::new(&approved) };
    let options = LoginOptions { fresh: args.fresh, idp: Some(idp_id), ..LoginOptions::default() };
    let outcome = agent::login(&mut w.wallet, &idp, &sp, consent, &options, &SystemClock);
    w.save()?;
    let outcome = outcome?;
    print_json(&json!({
        "token": outcome.token,
        "disclosed": outcome.disclosed,
        "inferred": outcome.inferred,
    }));
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> CliResult {
    let experiments: Vec<Experiment> = match args.experiment {
        BenchTarget::Certify => vec![Experiment::Certify],
        BenchTarget::Pack => vec![Experiment::Pack],
        BenchTarget::Verify => vec![Experiment::Verify],
        BenchTarget::Requests => vec![Experiment::Requests],
        BenchTarget::All => Experiment::ALL.to_vec(),
    };
    let mut cfg = if args.quick { BenchConfig::quick() } else { BenchConfig::default() };
    cfg.parallel = args.parallel.max(1);
    let sizes: BTreeSet<usize> = args.bits.into_iter().collect();
    let mut results = Vec::new();
    for bits in sizes {
        let keys = BenchKeys::generate(bits).map_err(|e| CliError::new("usage", e))?;
        for &e in &experiments {
            log::info!("running {} at {bits} bits", e.as_str());
            results.extend(bench::run(&keys, e, &cfg));
        }
    }
    let csv_err = |e: csv::Error| CliError::new("io", e);
    match &args.out {
        Some(path) => bench::write_csv(&results, File::create(path)?).map_err(csv_err)?,
        None => bench::write_csv(&results, io::stdout().lock()).map_err(csv_err)?,
    }
    eprint!("{}", BenchReport { results }.render());
    Ok(())
}

fn scenarios_cmd(cmd: ScenarioCmd) -> CliResult {
    match cmd {
        ScenarioCmd::List => {
            for s in builtins() {
                println!("{:<22} {}", s.name, s.description);
            }
            Ok(())
        }
        ScenarioCmd::Run { names, all, files, transport } => {
            let mut scripts: Vec<ScenarioScript> = if all { builtins() } else { Vec::new() };
            for n in &names {
                scripts.push(builtin(n).ok_or_else(|| CliError::new("usage", format!("no built-in script {n:?}")))?);
            }
            for f in &files {
                let text = std::fs::read_to_string(f)?;
                scripts.push(serde_json::from_str(&text).map_err(|e| CliError::new("script", format!("{}: {e}", f.display())))?);
            }
            if scripts.is_empty() {
                return Err(CliError::new("usage", "name a script, pass --file, or use --all"));
            }
            let kinds: &[TransportKind] = match transport {
                TransportArg::Loopback => &[TransportKind::Loopback],
                TransportArg::Http => &[TransportKind::Http],
                TransportArg::Both => &TransportKind::ALL,
            };
            let mut failed = 0;
            for &kind in kinds {
                for s in &scripts {
                    match run_scenario(s, kind) {
                        Ok(r) => {
                            println!("{r}");
                            failed += usize::from(!r.passed());
                        }
                        Err(e) => {
                            println!("[FAIL] {} ({kind}): {e}", s.name);
                            failed += 1;
                        }
                    }
                }
            }
            if failed > 0 {
                return Err(CliError::new("scenario-failed", format!("{failed} scenario run(s) failed")));
            }
            Ok(())
        }
    }
}

fn idp_cmd(cmd: IdpCmd) -> CliResult {
    match cmd {
        IdpCmd::Serve { config } => {
            let cfg = IdpConfig::load(config.as_deref())?;
            let key = cfg.load_or_create_key()?;
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            let mut idp = IdentityProvider::new(key, clock);
            if let Some(j) = &cfg.journal {
                idp = idp.with_journal(j)?;
            }
            if let Some(r) = cfg.rate_limit {
                idp = idp.with_rate_limit(RateLimiter::new(r.capacity, r.refill_per_sec));
            }
            log::info!("IdP key id {}, {} accounts", idp.verification_key().key_id(), idp.account_count());
            HttpServer::run_forever(Arc::new(idp), cfg.listen)?;
            Ok(())
        }
        IdpCmd::ExportKey { config, out } => {
            let cfg = IdpConfig::load(config.as_deref())?;
            let key = cfg.load_or_create_key()?;
            match out {
                Some(path) => write_json(&path, key.verification_key(), false)?,
                None => print_json(&serde_json::to_value(key.verification_key()).expect("key serializes")),
            }
            Ok(())
        }
    }
}

fn sp_cmd(cmd: SpCmd) -> CliResult {
    match cmd {
        SpCmd::Serve { config } => {
            let cfg = SpConfig::load(config.as_deref())?;
            let sp = ServiceProvider::new(cfg.policy()?, Arc::new(SystemClock)).map_err(|e| CliError::new("config", e))?;
            log::info!("SP {} requires {}", cfg.service_name, cfg.required.join(", "));
            HttpServer::run_forever(Arc::new(sp), cfg.listen)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Wallet(c) => wallet_cmd(&cli.wallet, c),
        Command::Enroll(a) => enroll(&cli.wallet, a),
        Command::Login(a) => login(&cli.wallet, a),
        Command::Bench(a) => bench_cmd(a),
        Command::Scenarios(c) => scenarios_cmd(c),
        Command::Idp(c) => idp_cmd(c),
        Command::Sp(c) => sp_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.code, "detail": e.detail }));
            ExitCode::FAILURE
        }
    }
}
