//! `ramseg`: runs the service, talks to a running service, and runs offline
//! evaluations.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ramseg_api::{AcceptRequest, ImagePayload, MaskPayload, RetrieveRequest, SegmentRequest};
use ramseg_client::RamsegClient;
use ramseg_core::data::{raster, synth};
use ramseg_core::eval::{
    benchmark_pipeline, benchmark_retrieval, run_ablation, run_episodes, write_ablation, write_report, EpisodeConfig,
    EvalConfig, ProtocolContext, ReportFormat, DEFAULT_WARMUP,
};
use ramseg_core::RetrievalStrategy;
use ramseg_server::{AppState, ServerConfig};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "ramseg", version, about = "Retrieval-augmented few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a seeded synthetic corpus and its manifest.
    Synth(SynthArgs),
    /// Score one configuration on a test split.
    Eval(EvalArgs),
    /// Score a strategy × k grid.
    Ablate(AblateArgs),
    /// Per-stage latency for several k.
    Bench(BenchArgs),
    /// 1-way 1-shot folds.
    Episodes(EpisodesArgs),
    /// (Re)build the server's index from a manifest on the server host.
    BuildIndex {
        #[command(flatten)]
        server: ServerArg,
        manifest: PathBuf,
    },
    /// Top-k exemplars for an image.
    Retrieve {
        #[command(flatten)]
        server: ServerArg,
        #[command(flatten)]
        image: ImageArg,
        #[arg(short, long)]
        k: Option<usize>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Segment an image; writes a label PNG and a JSON sidecar.
    Segment {
        #[command(flatten)]
        server: ServerArg,
        #[command(flatten)]
        image: ImageArg,
        #[arg(short, long)]
        k: Option<usize>,
        #[arg(long)]
        strategy: Option<String>,
        /// Class names, comma separated; all classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        /// Label PNG path; the sidecar goes next to it as `.json`.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Add a corrected annotation to the database.
    Accept {
        #[command(flatten)]
        server: ServerArg,
        #[command(flatten)]
        image: ImageArg,
        /// Label mask (PNG or .npy).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        slice_index: Option<u32>,
    },
    Stats {
        #[command(flatten)]
        server: ServerArg,
    },
    Health {
        #[command(flatten)]
        server: ServerArg,
    },
}

#[derive(Debug, Args)]
struct ServerArg {
    #[arg(long, env = "RAMSEG_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
}

impl ServerArg {
    fn client(&self) -> Result<RamsegClient> {
        Ok(RamsegClient::new(&self.server)?)
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ImageArg {
    /// Image file (PNG or .npy).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Id of a sample already in the database.
    #[arg(long)]
    sample: Option<String>,
}

impl ImageArg {
    fn payload(&self) -> Result<ImagePayload> {
        match (&self.image, &self.sample) {
            (Some(path), _) => Ok(ImagePayload::encoded(&read(path)?)),
            (None, Some(id)) => Ok(ImagePayload::SampleId { id: id.clone() }),
            (None, None) => bail!("pass --image or --sample"),
        }
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// JSON server config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Full bind address; overrides --host and --port.
    #[arg(long)]
    addr: Option<SocketAddr>,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, visible_alias = "samples")]
    samples_dir: Option<PathBuf>,
    /// Binary index file, loaded at startup and rewritten on rebuild.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Default k when a request omits it.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    /// Build the index from this manifest at startup.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long, default_value = "s")]
    prefix: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report path; format from the extension (.json, .csv, .md).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    strategy: Option<RetrievalStrategy>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "embedding,random:0")]
    strategies: Vec<RetrievalStrategy>,
    #[arg(short, long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    k: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(short, long, value_delimiter = ',', default_value = "1,4,16")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    /// Also time a bare top-k query over this many random vectors.
    #[arg(long)]
    retrieval_n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EpisodesArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn format_for(path: &Path) -> Result<ReportFormat> {
    ReportFormat::from_path(path).with_context(|| format!("{}: use .json, .csv or .md", path.display()))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new()?;
    match cli.command {
        Command::Serve(args) => runtime.block_on(serve(args)),
        Command::Synth(args) => {
            let path = synth::write_shapes_corpus(&args.out, &args.prefix, args.n, args.size, args.seed, args.subjects)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Bench(args) => bench(args),
        Command::Episodes(args) => {
            let reports = run_episodes(&EpisodeConfig::load(&args.config)?)?;
            match args.out {
                Some(path) => write_json(&path, &reports),
                None => print_json(&reports),
            }
        }
        other => runtime.block_on(remote(other)),
    }
}

async fn serve(args: ServeArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_slice::<ServerConfig>(&read(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => ServerConfig::default(),
    };
    if let Some(dir) = args.samples_dir {
        config.samples_dir = dir;
    }
    if let Some(engine) = args.engine {
        config.engine = engine;
    }
    if let Some(index) = args.index {
        config.index_path = Some(index);
    }
    if let Some(k) = args.k {
        config.default_k = k;
    }
    if let Some(backbone) = args.backbone {
        config.backbone = backbone;
    }
    let state = tokio::task::spawn_blocking(move || AppState::open(config)).await??;
    for d in &state.diagnostics {
        tracing::warn!("{d}");
    }
    if let Some(manifest) = args.manifest {
        let _writer = state.writer.lock().await;
        let s = state.clone();
        let (version, count, _) = tokio::task::spawn_blocking(move || s.rebuild(&manifest)).await??;
        tracing::info!(version, count, "index built");
    }
    let addr = args.addr.unwrap_or(SocketAddr::new(args.host, args.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    ramseg_server::serve(state, listener, async {
        tokio::signal::ctrl_c().await.ok();
    })
    .await?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut config = EvalConfig::load(&args.config)?;
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    let ctx = ProtocolContext::prepare(&config)?;
    let report = ctx.run(config.k, config.strategy)?;
    match args.out {
        Some(path) => Ok(write_report(&report, &path, format_for(&path)?)?),
        None => {
            let summary: Vec<Value> = report
                .per_class
                .iter()
                .map(|c| serde_json::json!({"class": c.class_name, "mean_dice": c.mean_dice, "n": c.n}))
                .collect();
            print_json(&summary)
        }
    }
}

fn ablate(args: AblateArgs) -> Result<()> {
    let config = EvalConfig::load(&args.config)?;
    let ctx = ProtocolContext::prepare(&config)?;
    let grid = run_ablation(&ctx, &args.strategies, &args.k)?;
    match args.out {
        Some(path) => Ok(write_ablation(&grid, &path, format_for(&path)?)?),
        None => {
            let rows: Vec<Value> = grid
                .cells
                .iter()
                .map(|c| {
                    let means: serde_json::Map<String, Value> = c
                        .report
                        .per_class
                        .iter()
                        .map(|p| (p.class_name.clone(), serde_json::json!(p.mean_dice)))
                        .collect();
                    serde_json::json!({"strategy": c.strategy.to_string(), "k": c.k, "mean_dice": means})
                })
                .collect();
            print_json(&rows)
        }
    }
}

fn bench(args: BenchArgs) -> Result<()> {
    let config = EvalConfig::load(&args.config)?;
    let ctx = ProtocolContext::prepare(&config)?;
    let queries: Vec<_> = ctx.tests().iter().map(|r| r.image.clone()).collect();
    let mut report = benchmark_pipeline(
        ctx.pipeline(),
        ctx.index(),
        ctx.store(),
        &queries,
        &args.k,
        args.reps,
        args.warmup,
    )?;
    if let Some(n) = args.retrieval_n {
        let dim = ctx.pipeline().backbone().dim();
        let k = args.k.iter().copied().max().unwrap_or(1);
        report.retrieval = Some(benchmark_retrieval(n, dim, k, args.reps.max(1), config.seed)?);
    }
    match args.out {
        Some(path) => write_json(&path, &report),
        None => print_json(&report),
    }
}

async fn remote(command: Command) -> Result<()> {
    match command {
        Command::BuildIndex { server, manifest } => {
            let manifest = std::path::absolute(&manifest)?;
            print_json(&server.client()?.build_index(manifest.display().to_string()).await?)
        }
        Command::Retrieve {
            server,
            image,
            k,
            strategy,
        } => {
            let req = RetrieveRequest {
                image: image.payload()?,
                k,
                strategy,
            };
            print_json(&server.client()?.retrieve(&req).await?)
        }
        Command::Segment {
            server,
            image,
            k,
            strategy,
            classes,
            out,
        } => {
            let req = SegmentRequest {
                image: image.payload()?,
                k,
                classes,
                strategy,
            };
            let resp = server.client()?.segment(&req).await?;
            let labels = ndarray::Array2::from_shape_vec(
                (resp.height as usize, resp.width as usize),
                resp.label_map.decode()?,
            )?;
            raster::write_mask(&out, &labels)?;
            let sidecar = out.with_extension("json");
            write_json(&sidecar, &resp)?;
            println!("{}\n{}", out.display(), sidecar.display());
            Ok(())
        }
        Command::Accept {
            server,
            image,
            mask,
            id,
            subject,
            slice_index,
        } => {
            let req = AcceptRequest {
                proposed_id: id,
                image: image.payload()?,
                mask: MaskPayload::Encoded {
                    data_base64: ramseg_api::encode_base64(&read(&mask)?),
                },
                subject_id: subject,
                slice_index,
                modality: None,
            };
            print_json(&server.client()?.accept(&req).await?)
        }
        Command::Stats { server } => print_json(&server.client()?.stats().await?),
        Command::Health { server } => print_json(&server.client()?.health().await?),
        Command::Serve(_) | Command::Synth(_) | Command::Eval(_) | Command::Ablate(_) | Command::Bench(_) | Command::Episodes(_) => {
            unreachable!("local commands are dispatched in main")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn list_flags_parse() {
        let cli = Cli::try_parse_from(["ramseg", "ablate", "--config", "c.json", "--strategies", "embedding,random:3", "-k", "1,4"])
            .unwrap();
        match cli.command {
            Command::Ablate(a) => {
                assert_eq!(a.strategies, vec![RetrievalStrategy::Embedding, RetrievalStrategy::Random { seed: 3 }]);
                assert_eq!(a.k, vec![1, 4]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn image_source_is_required_and_exclusive() {
        assert!(Cli::try_parse_from(["ramseg", "retrieve"]).is_err());
        assert!(Cli::try_parse_from(["ramseg", "retrieve", "--image", "a.png", "--sample", "x"]).is_err());
        assert!(Cli::try_parse_from(["ramseg", "retrieve", "--sample", "x"]).is_ok());
    }

    #[test]
    fn serve_flags_parse() {
        let cli = Cli::try_parse_from([
            "ramseg", "serve", "--index", "idx.bin", "--samples", "dir/", "--engine", "transfer", "--port", "9000", "--k", "8",
        ])
        .unwrap();
        match cli.command {
            Command::Serve(a) => {
                assert_eq!(a.index, Some(PathBuf::from("idx.bin")));
                assert_eq!(a.samples_dir, Some(PathBuf::from("dir/")));
                assert_eq!((a.port, a.k), (9000, Some(8)));
            }
            other => panic!("{other:?}"),
        }
    }
}
