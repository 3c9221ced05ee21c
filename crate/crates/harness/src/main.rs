use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use udss_core::clock::{Clock, SystemClock};
use udss_core::envelope::open;
use udss_core::keys::{AppKeyPair, PublicSignerKey, SignerKey};
use udss_core::ledger::export_ndjson;
use udss_core::manifest::{provision_manifest, ManifestEntry};
use udss_core::pim::{Pim, UserProfile};
use udss_core::storage::{write_private, SecureStore};
use udss_core::wire::{
    default_socket_path, secret_path_for, AppClient, ConsentMode, DecisionValue, Message,
    OperatorClient, Service,
};
use udss_core::{AccessTier, ApproveAll, Gateway, PiiField, RequestContext, ScopeSet, StorePaths};
use udss_harness::bench::bench_overhead;
use udss_harness::scenario::BUILTIN;
use udss_harness::{builtin, run_scenario, ScenarioReport, ScenarioScript, Target};

#[derive(Parser)]
#[command(
    name = "udss",
    version,
    about = "Consent-mediated identity sharing gateway and test harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SocketArg {
    /// Gateway socket; defaults to $UDSS_SOCKET, then udss.sock in the temp dir.
    #[arg(long)]
    socket: Option<PathBuf>,
}

impl SocketArg {
    fn path(&self) -> PathBuf {
        self.socket.clone().unwrap_or_else(default_socket_path)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a root key, app key pairs and a signed manifest.
    Provision {
        /// Output directory for manifest.json, root.pub, root.key and keys/.
        #[arg(long)]
        out: PathBuf,
        /// APP_ID:TIER, repeatable.
        #[arg(long = "app", required = true, value_parser = parse_app)]
        apps: Vec<(String, AccessTier)>,
        #[arg(long, default_value_t = 1)]
        manifest_version: u64,
        /// Re-sign with an existing root.key instead of generating one.
        #[arg(long)]
        root_key: Option<PathBuf>,
    },
    /// Run the gateway service until SIGINT or SIGTERM.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root_pub: PathBuf,
        /// Directory for the secure store and vault; omitted means in-memory.
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        socket: SocketArg,
        /// JSON object of field name to value, loaded into the vault.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Approve every prompt without an operator. For testing only.
        #[arg(long)]
        auto_approve: bool,
    },
    /// Send one identity request as an app and print what arrives.
    Request {
        #[arg(long)]
        app: String,
        #[arg(long, default_value = "SIGN_IN")]
        context: RequestContext,
        /// Comma-separated field names.
        #[arg(long, value_delimiter = ',', required = true)]
        scopes: Vec<String>,
        /// The app's private key file, to open the envelope.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, default_value = "cli-1")]
        transaction_id: String,
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Run a scripted scenario against UDSS, the baseline, or both.
    Simulate {
        /// Built-in name or path to a JSON script.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Overrides the script's trial count.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum, default_value_t = TargetArg::Both)]
        target: TargetArg,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Inspect the audit ledger.
    Ledger {
        #[command(subcommand)]
        action: LedgerAction,
    },
    /// Revoke an app's authorization.
    Revoke {
        #[arg(long)]
        app: String,
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Lift a revocation.
    ReConsent {
        #[arg(long)]
        app: String,
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Erase every stored value.
    Purge {
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Retire the current signing epoch and start a new one.
    RotateKeys {
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Measure enforcement, token, envelope and end-to-end overhead.
    Bench {
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Attach as the operator and answer consent prompts on this terminal.
    ConsentPrompt {
        #[command(flatten)]
        socket: SocketArg,
        /// Stop after this many prompts.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Subcommand)]
enum LedgerAction {
    /// Exit status 0 only if the hash chain is intact.
    Verify(LedgerSource),
    /// Print the ledger as NDJSON.
    Export(LedgerSource),
}

#[derive(Args)]
struct LedgerSource {
    /// Read the vault directly instead of asking the running service.
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(flatten)]
    socket: SocketArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Udss,
    Baseline,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

fn parse_app(s: &str) -> Result<(String, AccessTier), String> {
    let (id, tier) = s.split_once(':').ok_or("expected APP_ID:TIER")?;
    let tier = tier.parse::<AccessTier>().map_err(|e| e.to_string())?;
    Ok((id.to_owned(), tier))
}

fn read_trimmed(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .trim()
        .to_owned())
}

fn load_profile(path: &Path) -> Result<UserProfile> {
    let raw: BTreeMap<PiiField, String> = serde_json::from_str(&read_trimmed(path)?)
        .with_context(|| format!("parsing profile {}", path.display()))?;
    let mut profile = UserProfile::new();
    for (field, value) in raw {
        profile.set(field, value)?;
    }
    Ok(profile)
}

fn provision(
    out: &Path,
    apps: &[(String, AccessTier)],
    version: u64,
    root_key: Option<&Path>,
) -> Result<()> {
    let mut rng = OsRng;
    let root = match root_key {
        Some(p) => SignerKey::from_b64(&read_trimmed(p)?)?,
        None => SignerKey::generate(&mut rng),
    };
    let keys_dir = out.join("keys");
    fs::create_dir_all(&keys_dir)?;
    let mut entries = Vec::new();
    for (app_id, tier) in apps {
        let key_path = keys_dir.join(format!("{app_id}.key"));
        // re-provisioning keeps existing app keys so deployed apps still decrypt
        let key = if key_path.exists() {
            AppKeyPair::from_b64(&read_trimmed(&key_path)?)?
        } else {
            let k = AppKeyPair::generate(&mut rng);
            write_private(&key_path, k.secret_b64().as_bytes())?;
            k
        };
        entries.push(ManifestEntry::new(
            app_id,
            *tier,
            key.public(),
            app_id.as_bytes(),
        ));
    }
    let issued_at = SystemClock.now();
    let manifest = provision_manifest(entries, version, issued_at, &root, None)?;
    fs::write(out.join("manifest.json"), manifest.to_canonical_bytes())?;
    fs::write(out.join("root.pub"), root.public().to_b64())?;
    if root_key.is_none() {
        write_private(&out.join("root.key"), root.to_b64().as_bytes())?;
    }
    println!(
        "wrote {} (version {version}, {} apps)",
        out.join("manifest.json").display(),
        apps.len()
    );
    Ok(())
}

fn serve(
    manifest: &Path,
    root_pub: &Path,
    store: Option<&Path>,
    socket: &Path,
    profile: Option<&Path>,
    auto_approve: bool,
) -> Result<()> {
    let root = PublicSignerKey::from_b64(&read_trimmed(root_pub)?)?;
    let paths = match store {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(StorePaths::in_dir(dir))
        }
        None => None,
    };
    let rng = Box::new(ChaCha20Rng::from_rng(OsRng)?);
    let gateway = Gateway::boot(manifest, &root, paths.as_ref(), Arc::new(SystemClock), rng)?;
    if !gateway.trust().is_verified() {
        log::warn!("serving in degraded mode");
    }
    if let Some(p) = profile {
        gateway.set_profile(load_profile(p)?)?;
    }
    let mode = if auto_approve {
        ConsentMode::Scripted(Arc::new(ApproveAll))
    } else {
        ConsentMode::Operator
    };
    let handle = Service::new(Arc::new(gateway), mode).serve(socket)?;
    eprintln!(
        "listening on {} (operator secret in {})",
        handle.socket_path().display(),
        handle.secret_path().display()
    );
    // SIGINT and SIGTERM both shut down cleanly so the socket and secret are removed
    let (stop_tx, stop_rx) = std::sync::mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = stop_tx.send(());
    })?;
    let _ = stop_rx.recv();
    handle.shutdown();
    Ok(())
}

fn operator(socket: &Path) -> Result<OperatorClient> {
    let secret = read_trimmed(&secret_path_for(socket))?;
    Ok(OperatorClient::attach(socket, &secret)?)
}

fn request(
    socket: &Path,
    app: &str,
    context: RequestContext,
    scopes: &[String],
    key: Option<&Path>,
    txid: &str,
) -> Result<()> {
    let mut client = AppClient::connect(socket)
        .with_context(|| format!("connecting to {}", socket.display()))?;
    let epoch_key = client.gateway_key()?;
    let scopes: Vec<&str> = scopes.iter().map(String::as_str).collect();
    match client.request(app, context, &scopes, txid)? {
        Message::IdentityFulfillment { envelope: None, .. } => {
            println!("fulfilled with no stored values")
        }
        Message::IdentityFulfillment {
            envelope: Some(env),
            ..
        } => match key {
            Some(k) => {
                let app_key = AppKeyPair::from_b64(&read_trimmed(k)?)?;
                let payload = open(&env, &app_key, &epoch_key)?;
                for (field, value) in payload.iter() {
                    println!("{field}\t{value}");
                }
            }
            None => println!("{}", String::from_utf8_lossy(&env.to_bytes())),
        },
        Message::Error(e) => bail!("rejected with {} {}", e.code, e.name),
        other => bail!("unexpected reply {other:?}"),
    }
    Ok(())
}

fn load_script(name: &str) -> Result<ScenarioScript> {
    if let Some(s) = builtin(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!("no scenario `{name}`; built-ins are {}", BUILTIN.join(", "));
    }
    Ok(ScenarioScript::from_json(&fs::read_to_string(path)?)?)
}

fn render(reports: &[ScenarioReport], format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(reports).expect("reports serialize"),
        Format::Csv => {
            let mut out = String::new();
            for (i, r) in reports.iter().enumerate() {
                let csv = r.to_csv();
                // one header for the whole output
                let body = if i == 0 {
                    &csv[..]
                } else {
                    csv.split_once('\n').map_or("", |x| x.1)
                };
                out.push_str(body);
            }
            out
        }
        Format::Table => reports
            .iter()
            .map(|r| r.to_table())
            .collect::<Vec<_>>()
            .join("\n"),
    }
}

fn ledger(action: LedgerAction) -> Result<ExitCode> {
    let (verify, src) = match action {
        LedgerAction::Verify(s) => (true, s),
        LedgerAction::Export(s) => (false, s),
    };
    let (valid, length, ndjson) = match &src.store {
        Some(dir) => {
            let paths = StorePaths::in_dir(dir);
            if !paths.secure.exists() {
                bail!("no secure store at {}", paths.secure.display());
            }
            let secure = SecureStore::open_or_init(&paths.secure, &mut OsRng, 0)?;
            let pim = Pim::open(&paths.vault, secure.storage_key().clone())?;
            let entries = pim.ledger().entries();
            (pim.verify_ledger(), entries.len(), export_ndjson(entries))
        }
        None => {
            let mut op = operator(&src.socket.path())?;
            let (valid, length) = op.verify_ledger()?;
            let ndjson = if verify {
                String::new()
            } else {
                op.export_ledger()?
            };
            (valid, length, ndjson)
        }
    };
    if verify {
        println!(
            "{} entries, chain {}",
            length,
            if valid { "intact" } else { "BROKEN" }
        );
        return Ok(if valid {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        });
    }
    print!("{ndjson}");
    if !valid {
        eprintln!("warning: chain does not verify");
    }
    Ok(ExitCode::SUCCESS)
}

fn consent_prompt(socket: &Path, count: Option<usize>) -> Result<()> {
    let mut op = operator(socket)?;
    eprintln!("attached as operator; waiting for prompts");
    let stdin = io::stdin();
    let mut answered = 0;
    while count.is_none_or(|n| answered < n) {
        let Some(ev) = op.next_prompt(Duration::from_secs(3600))? else {
            continue;
        };
        print!(
            "{} ({}) wants {} [deadline {}]. Share? [y/N] ",
            ev.app_id, ev.request_context, ev.truncated_scopes, ev.deadline
        );
        io::stdout().flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let (value, scopes) = if line.trim().eq_ignore_ascii_case("y") {
            (DecisionValue::Approved, ev.truncated_scopes)
        } else {
            (DecisionValue::Denied, ScopeSet::empty())
        };
        op.decide(&ev.transaction_id, value, scopes)?;
        answered += 1;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Provision {
            out,
            apps,
            manifest_version,
            root_key,
        } => provision(&out, &apps, manifest_version, root_key.as_deref())?,
        Command::Serve {
            manifest,
            root_pub,
            store,
            socket,
            profile,
            auto_approve,
        } => serve(
            &manifest,
            &root_pub,
            store.as_deref(),
            &socket.path(),
            profile.as_deref(),
            auto_approve,
        )?,
        Command::Request {
            app,
            context,
            scopes,
            key,
            transaction_id,
            socket,
        } => request(
            &socket.path(),
            &app,
            context,
            &scopes,
            key.as_deref(),
            &transaction_id,
        )?,
        Command::Simulate {
            scenario,
            seed,
            trials,
            target,
            format,
        } => {
            let mut script = load_script(&scenario)?;
            if let Some(t) = trials {
                script = script.with_trials(t);
            }
            let targets: &[Target] = match target {
                TargetArg::Udss => &[Target::Udss],
                TargetArg::Baseline => &[Target::Baseline],
                TargetArg::Both => &[Target::Udss, Target::Baseline],
            };
            let reports = targets
                .iter()
                .map(|t| run_scenario(&script, *t, seed))
                .collect::<Result<Vec<_>, _>>()?;
            println!("{}", render(&reports, format));
        }
        Command::Ledger { action } => return ledger(action),
        Command::Revoke { app, socket } => {
            operator(&socket.path())?.revoke(&app)?;
            println!("revoked {app}");
        }
        Command::ReConsent { app, socket } => {
            operator(&socket.path())?.re_consent(&app)?;
            println!("re-consented {app}");
        }
        Command::Purge { socket } => {
            operator(&socket.path())?.purge()?;
            println!("vault purged");
        }
        Command::RotateKeys { socket } => {
            let k = operator(&socket.path())?.rotate_keys()?;
            println!("epoch {} {}", k.epoch, k.key.to_b64());
        }
        Command::Bench {
            trials,
            seed,
            format,
        } => {
            let r = bench_overhead(trials, seed)?;
            match format {
                Format::Table => print!("{}", r.to_table()),
                Format::Csv => print!("{}", r.to_csv()),
                Format::Json => println!("{}", r.to_json()),
            }
        }
        Command::ConsentPrompt { socket, count } => consent_prompt(&socket.path(), count)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
