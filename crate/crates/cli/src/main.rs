use std::io::{Read, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use localmt::bench::{run_bench, BenchOptions};
use localmt::pipeline::{CancelToken, EngineConfig, ModelSource, Pipeline};
use localmt::registry::demo::{demo_package, desk_config, tiny_config};
use localmt::registry::{
    default_data_dir, download_install, fetch_catalog, sha256_hex, HttpClient, Store, StoreModelSource,
};
use localmt_service::service::{self, AppState, ServiceConfig, CATALOG_URL_ENV, DEFAULT_CATALOG_URL, DEFAULT_PORT, PORT_ENV};
use localmt_service::{exit_code, Invalid, EXIT_OK, EXIT_VALIDATION};

const PID_FILE: &str = "service.pid";

#[derive(Parser)]
#[command(name = "localmt", version, about = "Private machine translation that runs on your own CPU")]
struct Cli {
    /// Where models are stored [env: APP_DATA_DIR]
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Log filter for stderr, e.g. `info` or `localmt=debug`
    #[arg(long, global = true)]
    log: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the local HTTP service
    Serve {
        #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        max_batch_tokens: Option<usize>,
        #[arg(long, env = CATALOG_URL_ENV, default_value = DEFAULT_CATALOG_URL)]
        catalog_url: String,
    },
    /// Translate a file or standard input
    Translate {
        #[arg(short, long)]
        model: String,
        #[arg(short, long, conflicts_with = "stdin")]
        input: Option<PathBuf>,
        /// Read from standard input (the default without --input)
        #[arg(long)]
        stdin: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Manage installed models
    Models {
        #[command(subcommand)]
        action: ModelsCommand,
    },
    /// Measure words per second on a corpus
    Bench {
        #[arg(short, long)]
        model: String,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// Input holds one sentence per line; skip sentence splitting
        #[arg(long)]
        pre_split: bool,
        /// Print only the JSON report
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum ModelsCommand {
    /// List installed models
    List,
    /// Download and install a model from the catalog
    Download {
        id: String,
        #[arg(long)]
        version: Option<String>,
        #[arg(long, env = CATALOG_URL_ENV, default_value = DEFAULT_CATALOG_URL)]
        catalog_url: String,
    },
    /// Install a package file from disk
    Import { path: PathBuf },
    /// Remove a model (`id` for all versions, `id@version` for one)
    Delete { id: String },
    /// Show the models available for download
    Catalog {
        #[arg(long, env = CATALOG_URL_ENV, default_value = DEFAULT_CATALOG_URL)]
        catalog_url: String,
    },
    /// Write a package with random weights, for testing
    MakeDemo {
        id: String,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "1.0.0")]
        version: String,
        #[arg(long, value_enum, default_value_t = DemoSize::Desk)]
        size: DemoSize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoSize {
    Desk,
    Tiny,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    let default_log = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    let filter = EnvFilter::try_new(cli.log.as_deref().unwrap_or(default_log)).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let data_dir = cli.data_dir.unwrap_or_else(default_data_dir);
    match cli.command {
        Command::Serve { port, bind, threads, max_batch_tokens, catalog_url } => {
            let config = ServiceConfig {
                bind,
                port,
                threads,
                max_batch_tokens,
                catalog_url,
                ..ServiceConfig::new(data_dir)
            };
            serve(config)
        }
        Command::Translate { model, input, stdin: _, threads } => translate(&data_dir, &model, input.as_deref(), threads),
        Command::Models { action } => models(&data_dir, action),
        Command::Bench { model, input, threads, pre_split, json } => {
            bench(&data_dir, &model, &input, threads, pre_split, json)
        }
    }
}

fn engine(threads: Option<usize>) -> Result<EngineConfig> {
    let config = EngineConfig::detect(&tiny_config()).with_overrides(threads, None);
    config.validate().map_err(|e| Invalid(e.to_string()))?;
    Ok(config)
}

fn open_store(data_dir: &Path) -> Result<Arc<Store>> {
    Ok(Arc::new(Store::open(data_dir).with_context(|| format!("opening store at {}", data_dir.display()))?))
}

fn serve(config: ServiceConfig) -> Result<()> {
    config.validate().map_err(Invalid)?;
    let addr = config.addr();
    let pid_path = config.data_dir.join(PID_FILE);
    let state = AppState::new(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        std::fs::write(&pid_path, format!("{} {}\n", std::process::id(), addr.port()))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let result = service::serve(state, listener, shutdown).await;
        let _ = std::fs::remove_file(&pid_path);
        Ok(result?)
    })
}

fn read_input(input: Option<&Path>) -> Result<String> {
    let bytes = match input {
        Some(path) => std::fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let mut buf = Vec::new();
            std::io::stdin().read_to_end(&mut buf).context("reading standard input")?;
            buf
        }
    };
    String::from_utf8(bytes).map_err(|_| Invalid("input is not valid UTF-8".into()).into())
}

fn translate(data_dir: &Path, model: &str, input: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let config = engine(threads)?;
    let text = read_input(input)?;
    let source = StoreModelSource::new(open_store(data_dir)?);
    let loaded = source.load(model)?;
    let out = Pipeline::new(config)?.translate_text(&loaded, &text, &CancelToken::new())?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(out.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

fn models(data_dir: &Path, action: ModelsCommand) -> Result<()> {
    match action {
        ModelsCommand::List => {
            for m in open_store(data_dir)?.list_local()? {
                let m = m.manifest;
                println!("{}@{}\t{}->{}\t{}", m.id, m.version, m.src_lang, m.trg_lang, m.name);
            }
        }
        ModelsCommand::Download { id, version, catalog_url } => {
            let store = open_store(data_dir)?;
            let client = HttpClient::new();
            let entries = fetch_catalog(&client, &catalog_url).context("fetching catalog")?;
            let entry = entries
                .iter()
                .filter(|e| e.id == id && version.as_ref().is_none_or(|v| *v == e.version))
                .max_by_key(|e| semver::Version::parse(&e.version).ok())
                .ok_or_else(|| Invalid(format!("{id} is not in the catalog")))?;
            let installed = download_install(&client, &store, entry)?;
            println!("installed {}@{}", installed.manifest.id, installed.manifest.version);
        }
        ModelsCommand::Import { path } => {
            let installed = open_store(data_dir)?.import_archive(&path)?;
            println!("installed {}@{}", installed.manifest.id, installed.manifest.version);
        }
        ModelsCommand::Delete { id } => {
            for m in open_store(data_dir)?.delete(&id)? {
                println!("deleted {}@{}", m.manifest.id, m.manifest.version);
            }
        }
        ModelsCommand::Catalog { catalog_url } => {
            let entries = fetch_catalog(&HttpClient::new(), &catalog_url).context("fetching catalog")?;
            for e in entries {
                println!("{}@{}\t{}->{}\t{}\t{}", e.id, e.version, e.src_lang, e.trg_lang, e.size_bytes, e.name);
            }
        }
        ModelsCommand::MakeDemo { id, output, version, size, seed } => {
            let config = match size {
                DemoSize::Desk => desk_config(),
                DemoSize::Tiny => tiny_config(),
            };
            let bytes = demo_package(&id, &version, config, seed)?;
            std::fs::write(&output, &bytes).with_context(|| format!("writing {}", output.display()))?;
            println!("{}  {}  {}", sha256_hex(&bytes), bytes.len(), output.display());
        }
    }
    Ok(())
}

/// Pid of a live service registered in `data_dir`, if any.
fn running_service(data_dir: &Path) -> Option<u32> {
    let text = std::fs::read_to_string(data_dir.join(PID_FILE)).ok()?;
    let pid: u32 = text.split_whitespace().next()?.parse().ok()?;
    (pid != std::process::id() && Path::new(&format!("/proc/{pid}")).exists()).then_some(pid)
}

fn bench(data_dir: &Path, model: &str, input: &Path, threads: Option<usize>, pre_split: bool, json: bool) -> Result<()> {
    if let Some(pid) = running_service(data_dir) {
        bail!(Invalid(format!("the service (pid {pid}) is running on this data directory; stop it before benchmarking")));
    }
    let config = engine(threads)?;
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let source = StoreModelSource::new(open_store(data_dir)?);
    // Fail fast on unknown models before the warm-up.
    source.load_uncached(model)?;
    let options = BenchOptions { threads: config.threads, max_batch_tokens: config.max_batch_tokens, pre_split };
    let run = run_bench(|| source.load_uncached(model), &text, options)?;
    if !json {
        print!("model      {model}\n{}", run.report.to_human());
    }
    println!("{}", run.report.to_json_line());
    Ok(())
}
