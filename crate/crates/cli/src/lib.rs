//! `histoatlas` command-line driver.
//!
//! Every subcommand wraps one core module, writes its artifacts
//! deterministically, and drops the resolved config plus a timestamped
//! run record next to them. Machine-readable JSON goes to stdout, human
//! summaries to stderr. Exit codes: 0 success, 1 validation error, 2 I/O error.

pub mod config;
pub mod service;
pub mod synth;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use histoatlas_core::analytics::{cluster_report, write_cluster_report};
use histoatlas_core::annotation::{parse_annotations, LabelTable};
use histoatlas_core::atlas_index::{build_atlas, Atlas};
use histoatlas_core::embedding_io::{fetch_embeddings, import_csv, read_embeddings, write_embeddings, PatchImage};
use histoatlas_core::evaluation::{evaluate, write_report};
use histoatlas_core::patching::{
    extract_patches, open_raster, read_manifest, save_png, write_manifest, PatchSource, StainMatrix, TileDirectory,
};
use histoatlas_core::projection::{overlay, rows_f64, tsne, write_map, MapPoint};

pub use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<histoatlas_core::Error> for CliError {
    fn from(e: histoatlas_core::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "histoatlas", version, about = "Labeled patch-embedding atlas: build, search, evaluate, analyze")]
pub struct Cli {
    /// Pipeline config (TOML); command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract and score patches from annotated regions of one slide.
    Patch(PatchArgs),
    /// Embed retained patch images through the extractor service.
    Embed(EmbedArgs),
    /// Convert a CSV of embeddings into an EMB1 file.
    ImportCsv(ImportCsvArgs),
    /// Build an ATL1 atlas from an EMB1 file.
    Build(BuildArgs),
    /// k-NN search for one vector.
    Query(QueryArgs),
    /// Evaluate a held-out test set against an atlas.
    Eval(EvalArgs),
    /// Centroid, linkage and cluster-validity analysis.
    Analyze(AnalyzeArgs),
    /// t-SNE maps of an atlas, optionally with test patches overlaid.
    Project(ProjectArgs),
    /// Serve read-only HTTP search over an atlas.
    Serve(ServeArgs),
    /// Write a small synthetic fixture (embeddings, labels, slide, annotations).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    /// ASAP annotation XML.
    #[arg(long)]
    pub xml: PathBuf,
    /// Slide raster (PNG or TIFF).
    #[arg(long, conflicts_with = "tiles", required_unless_present = "tiles")]
    pub image: Option<PathBuf>,
    /// Directory of `tile_r{row}_c{col}.png` tiles.
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    #[arg(long, requires = "tiles")]
    pub tile_size: Option<u32>,
    /// Slide width in pixels (tile input).
    #[arg(long, requires = "tiles")]
    pub width: Option<u32>,
    /// Slide height in pixels (tile input).
    #[arg(long, requires = "tiles")]
    pub height: Option<u32>,
    /// Defaults to the image or tile directory name.
    #[arg(long)]
    pub slide_id: Option<String>,
    /// Label table JSON; the 35-class reference table when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub cellularity_threshold: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<u32>,
    /// Also write retained patches as `<out>/patches/<patch_id>.png`.
    #[arg(long)]
    pub save_patches: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<patch_id>.png` files.
    #[arg(long)]
    pub patches: PathBuf,
    /// Extractor base URL (overrides `[embedding] base_url`).
    #[arg(long)]
    pub url: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportCsvArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Label table JSON; the 35-class reference table when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Store unit-length vectors (overrides `[index] normalize`).
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    /// Comma-separated query vector.
    #[arg(long, conflicts_with_all = ["embeddings", "row"], required_unless_present = "embeddings")]
    pub vector: Option<String>,
    /// Take the query from this EMB1 file ...
    #[arg(long, requires = "row")]
    pub embeddings: Option<PathBuf>,
    /// ... at this row.
    #[arg(long)]
    pub row: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated n values (default 1,3,5,7).
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Atlas to analyze ...
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub atlas: Option<PathBuf>,
    /// ... or a plain EMB1 file.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Principal components for the reduced variant (default 50); 0 skips it.
    #[arg(long)]
    pub pca: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    /// Test embeddings to overlay on the atlas map.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Project the top-k PCA scores (fitted on the atlas) instead of full vectors.
    #[arg(long)]
    pub pca: Option<usize>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub classes: u32,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub test_per_class: usize,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_labels(path: Option<&Path>) -> Result<LabelTable, CliError> {
    Ok(match path {
        Some(p) => LabelTable::read_json(p)?,
        None => LabelTable::reference(),
    })
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).expect("json"));
}

fn cmd_patch(a: &PatchArgs, mut cfg: PipelineConfig, argv: &[String]) -> Result<(), CliError> {
    if let Some(t) = a.cellularity_threshold {
        cfg.patching.cellularity_threshold = t;
    }
    if let Some(s) = a.patch_size {
        cfg.patching.patch_size = s;
    }
    cfg.validate()?;
    let labels = load_labels(a.labels.as_deref())?;
    let xml = std::fs::read(&a.xml).map_err(|e| io_err(&a.xml, e))?;

    let source: Box<dyn PatchSource> = match (&a.image, &a.tiles) {
        (Some(img), _) => Box::new(open_raster(img)?),
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(io_err(dir, "tile directory not found"));
            }
            let (Some(tile_size), Some(width), Some(height)) = (a.tile_size, a.width, a.height) else {
                return Err(CliError::Validation("--tiles needs --tile-size, --width and --height".into()));
            };
            Box::new(TileDirectory {
                dir: dir.clone(),
                tile_size,
                width,
                height,
            })
        }
        (None, None) => unreachable!("clap requires --image or --tiles"),
    };
    let slide_id = a.slide_id.clone().unwrap_or_else(|| {
        a.image
            .as_ref()
            .or(a.tiles.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".into())
    });
    let parsed = parse_annotations(&xml, &labels, &slide_id)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.xml.display())))?;
    for r in &parsed.rejected {
        eprintln!("skipped annotation {:?} (line {}): {}", r.name, r.line, r.reason);
    }

    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let patch_dir = a.out.join("patches");
    if a.save_patches {
        std::fs::create_dir_all(&patch_dir).map_err(|e| io_err(&patch_dir, e))?;
    }
    let summary = extract_patches(
        source.as_ref(),
        &parsed.regions,
        &cfg.patching,
        &StainMatrix::default(),
        |rec, img| {
            if a.save_patches && rec.retained {
                save_png(&patch_dir.join(format!("{}.png", rec.patch_id)), img)?;
            }
            Ok(())
        },
    )?;
    write_manifest(&a.out.join("manifest.jsonl"), &summary.records)?;
    config::write_sidecars(&a.out, "patch", &cfg, argv)?;
    for f in &summary.failures {
        eprintln!("failed patch {}: {}", f.patch_id, f.error);
    }
    eprintln!("retained {} / candidates {}", summary.retained(), summary.candidates());
    print_json(&serde_json::json!({
        "regions": parsed.regions.len(),
        "rejected_regions": parsed.rejected.len(),
        "candidates": summary.candidates(),
        "retained": summary.retained(),
        "failures": summary.failures.len(),
    }));
    Ok(())
}

fn cmd_embed(a: &EmbedArgs, mut cfg: PipelineConfig, argv: &[String]) -> Result<(), CliError> {
    if let Some(url) = &a.url {
        cfg.embedding.base_url = url.clone();
    }
    cfg.validate()?;
    let images: Vec<PatchImage> = read_manifest(&a.manifest)?
        .into_iter()
        .filter(|r| r.retained)
        .map(|r| PatchImage {
            path: a.patches.join(format!("{}.png", r.patch_id)),
            record: r,
        })
        .collect();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    let set = runtime.block_on(fetch_embeddings(&images, &cfg.embedding))?;
    write_embeddings(&set, &a.out)?;
    config::write_sidecars(&parent_dir(&a.out), "embed", &cfg, argv)?;
    eprintln!("embedded {} patches (dim {})", set.count(), set.dim());
    print_json(&serde_json::json!({ "count": set.count(), "dim": set.dim() }));
    Ok(())
}

fn cmd_import_csv(a: &ImportCsvArgs, cfg: PipelineConfig, argv: &[String]) -> Result<(), CliError> {
    let set = import_csv(&a.csv, a.dim).map_err(|e| match e {
        e if e.is_io() => CliError::from(e),
        e => CliError::Validation(format!("{}: {e}", a.csv.display())),
    })?;
    write_embeddings(&set, &a.out)?;
    config::write_sidecars(&parent_dir(&a.out), "import-csv", &cfg, argv)?;
    print_json(&serde_json::json!({ "count": set.count(), "dim": set.dim() }));
    Ok(())
}

fn cmd_build(a: &BuildArgs, mut cfg: PipelineConfig, argv: &[String]) -> Result<(), CliError> {
    if a.normalize {
        cfg.index.normalize = true;
    }
    let set = read_embeddings(&a.embeddings)?;
    let labels = load_labels(a.labels.as_deref())?;
    let atlas = build_atlas(set, labels, cfg.index)?;
    atlas.save(&a.out)?;
    config::write_sidecars(&parent_dir(&a.out), "build", &cfg, argv)?;
    eprintln!("atlas: {} vectors, dim {}, checksum {}", atlas.count(), atlas.dim(), atlas.checksum_hex());
    print_json(&serde_json::json!({
        "count": atlas.count(),
        "dim": atlas.dim(),
        "checksum": atlas.checksum_hex(),
    }));
    Ok(())
}

fn cmd_query(a: &QueryArgs) -> Result<(), CliError> {
    let atlas = Atlas::load(&a.atlas)?;
    let vector: Vec<f32> = match (&a.vector, &a.embeddings, a.row) {
        (Some(text), _, _) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f32>()
                    .map_err(|e| CliError::Validation(format!("bad vector value {t:?}: {e}")))
            })
            .collect::<Result<_, _>>()?,
        (None, Some(path), Some(row)) => {
            let set = read_embeddings(path)?;
            if row >= set.count() {
                return Err(CliError::Validation(format!("row {row} out of range (count {})", set.count())));
            }
            set.row(row).to_vec()
        }
        _ => return Err(CliError::Validation("give --vector or --embeddings with --row".into())),
    };
    let req = service::SearchRequest {
        vector,
        k: a.k,
        majority_n: None,
    };
    let resp = service::search(&atlas, &req).map_err(|(_, m)| CliError::Validation(m))?;
    print_json(&resp);
    Ok(())
}

fn cmd_eval(a: &EvalArgs, mut cfg: PipelineConfig, argv: &[String]) -> Result<(), CliError> {
    if let Some(n) = &a.n {
        cfg.evaluation.n_values = n.clone();
    }
    cfg.validate()?;
    let atlas = Atlas::load(&a.atlas)?;
    let test = read_embeddings(&a.test)?;
    let report = evaluate(&atlas, &test, &cfg.evaluation.n_values)?;
    write_report(&a.out, &report)?;
    config::write_sidecars(&a.out, "eval", &cfg, argv)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for acc in &report.accuracy {
        eprintln!(
            "n={}: top-n accuracy {:.4}, majority-n accuracy {:.4}",
            acc.n, acc.top_n, acc.majority_n
        );
    }
    print_json(&serde_json::json!({
        "total": report.total,
        "overall_accuracy": report.overall_accuracy,
        "accuracy": report.accuracy,
    }));
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs, mut cfg: PipelineConfig, argv: &[String]) -> Result<(), CliError> {
    if let Some(k) = a.pca {
        cfg.analytics.pca_k = k;
    }
    let (set, labels) = match (&a.atlas, &a.embeddings) {
        (Some(p), _) => {
            let atlas = Atlas::load(p)?;
            (atlas.embeddings().clone(), Some(atlas.label_table().clone()))
        }
        (None, Some(p)) => (read_embeddings(p)?, None),
        (None, None) => unreachable!("clap requires --atlas or --embeddings"),
    };
    let pca_k = if cfg.analytics.pca_k > 0 {
        cfg.validate()?;
        let cap = set.dim().min(set.count().saturating_sub(1));
        if cfg.analytics.pca_k > cap {
            eprintln!("warning: pca k={} exceeds {cap} for this data; using {cap}", cfg.analytics.pca_k);
        }
        Some(cfg.analytics.pca_k.min(cap).max(1))
    } else {
        None
    };
    let report = cluster_report(&set, pca_k)?;
    write_cluster_report(&a.out, &report, labels.as_ref())?;
    config::write_sidecars(&a.out, "analyze", &cfg, argv)?;
    for (variant, v) in &report.validity {
        eprintln!(
            "{variant}: silhouette {:.4}, davies-bouldin {:.4}, calinski-harabasz {:.2}",
            v.silhouette, v.davies_bouldin, v.calinski_harabasz
        );
    }
    print_json(&serde_json::json!({ "validity": report.validity }));
    Ok(())
}

fn cmd_project(a: &ProjectArgs, mut cfg: PipelineConfig, argv: &[String]) -> Result<(), CliError> {
    if let Some(p) = a.perplexity {
        cfg.projection.perplexity = p;
    }
    if let Some(i) = a.iterations {
        cfg.projection.iterations = i;
    }
    if let Some(s) = a.seed {
        cfg.projection.seed = s;
    }
    cfg.validate()?;
    let atlas = Atlas::load(&a.atlas)?;
    let set = atlas.embeddings();
    let test = a.test.as_deref().map(read_embeddings).transpose()?;
    if let Some(t) = &test {
        if !t.is_empty() && t.dim() != set.dim() {
            return Err(CliError::Validation(format!("dim mismatch: got {}, atlas {}", t.dim(), set.dim())));
        }
    }
    let (variant, atlas_rows, test_rows) = match a.pca {
        Some(k) => {
            let model = histoatlas_core::analytics::pca_fit(set, k)?;
            let reduced = histoatlas_core::analytics::pca_transform(&model, set)?;
            let t = match &test {
                Some(t) => rows_f64(&histoatlas_core::analytics::pca_transform(&model, t)?),
                None => Vec::new(),
            };
            (format!("pca{k}"), rows_f64(&reduced), t)
        }
        None => ("full".to_string(), rows_f64(set), test.as_ref().map(rows_f64).unwrap_or_default()),
    };
    let result = tsne(&atlas_rows, &cfg.projection)?;
    let mut points: Vec<MapPoint> = set
        .records()
        .iter()
        .map(|r| MapPoint {
            patch_id: r.patch_id.clone(),
            label_id: r.label_id,
            is_test: false,
        })
        .collect();
    let labels = atlas.label_table();
    let stem = format!("tsne_{variant}");
    write_map(&a.out, &stem, &points, &result, Some(labels))?;
    eprintln!("{stem}: final KL {:.4}", result.final_kl());
    let mut outputs = vec![stem];
    if let Some(t) = &test {
        let o = overlay(&atlas_rows, &result, &test_rows)?;
        points.extend(t.records().iter().map(|r| MapPoint {
            patch_id: r.patch_id.clone(),
            label_id: r.label_id,
            is_test: true,
        }));
        let stem = format!("tsne_{variant}_overlay");
        write_map(&a.out, &stem, &points, &o.result, Some(labels))?;
        eprintln!("{stem}: final KL {:.4}", o.result.final_kl());
        outputs.push(stem);
    }
    config::write_sidecars(&a.out, "project", &cfg, argv)?;
    print_json(&serde_json::json!({ "maps": outputs, "final_kl": result.final_kl() }));
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    if !a.atlas.is_file() {
        return Err(io_err(&a.atlas, "atlas file not found"));
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    runtime.block_on(service::serve(a.atlas.clone(), SocketAddr::new(a.host, a.port)))
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.classes == 0 || a.per_class < 2 || a.test_per_class == 0 {
        return Err(CliError::Validation("need at least 1 class, 2 atlas and 1 test draw per class".into()));
    }
    let spec = synth::FixtureSpec {
        seed: a.seed,
        classes: a.classes,
        dim: a.dim,
        atlas_per_class: a.per_class,
        test_per_class: a.test_per_class,
    };
    synth::write_fixture(&a.out, &spec)?;
    eprintln!("fixture written to {}", a.out.display());
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Patch(a) => cmd_patch(a, cfg, argv),
        Command::Embed(a) => cmd_embed(a, cfg, argv),
        Command::ImportCsv(a) => cmd_import_csv(a, cfg, argv),
        Command::Build(a) => cmd_build(a, cfg, argv),
        Command::Query(a) => cmd_query(a),
        Command::Eval(a) => cmd_eval(a, cfg, argv),
        Command::Analyze(a) => cmd_analyze(a, cfg, argv),
        Command::Project(a) => cmd_project(a, cfg, argv),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, &argv[1..]) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
