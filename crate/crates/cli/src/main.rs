//! Command-line frontend wiring the pipeline together for batch use.
//!
//! Every subcommand writes a `run_meta.txt` into its output directory
//! capturing the effective parameters (radii, voxel size, aggregation
//! mode, percentile estimator, seeds), so any output is reproducible from
//! its inputs plus that file. Exit codes are stable per error class:
//! 0 success, 2 invalid flags or configuration, 3 I/O and file-format
//! errors, 4 data-contract violations (too few traversals, length
//! mismatches, empty coverage), 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use traverse_p2::align::{
    build_dataset_at_locations, build_route_dataset, predict_p2_map, save_mlp, train_head,
    AlignError, MlpSpec, TrainConfig,
};
use traverse_p2::geom::{Point3, PointCloud, Traversal};
use traverse_p2::ingest::{
    accumulate_dense, load_manifest, load_point_cloud, load_traversals, locations_for_route,
    write_point_cloud, AccumulationConfig, IngestError,
};
use traverse_p2::labels::{
    filter_pseudo_labels, load_labels, save_labels, FilterConfig, LabelsError,
};
use traverse_p2::p2::{
    compute_p2_at_locations, compute_p2_over_route, load_scores, save_scores, P2Config, P2Error,
};
use traverse_p2::sim::{derive_seed, generate_scene, write_scene, SceneSpec, SimError};
use traverse_p2::spatial::{build_index, count_brute};
use traverse_p2::squash::{
    aggregate, featurize_traversals, save_store, AggregationMode, HandcraftedFeaturizer,
    SquashError, VoxelGridSpec,
};

#[derive(Parser)]
#[command(
    name = "traverse-p2",
    version,
    about = "Persistence statistics from repeated LiDAR traversals"
)]
struct Cli {
    /// Worker threads (0 = all cores). Falls back to TRAVERSE_P2_THREADS.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic repeated-traversal dataset with ground truth
    Simulate(SimulateArgs),
    /// Write per-location dense clouds for every traversal in a manifest
    Accumulate(AccumulateArgs),
    /// Score a scan traversal's points against the remaining traversals
    P2(P2Args),
    /// Build and aggregate the voxel feature store at one route location
    Featurize(FeaturizeArgs),
    /// Train the score-regression head on a scan and its history
    TrainHead(TrainHeadArgs),
    /// Filter pseudo-label boxes by the score percentile of their points
    Filter(FilterArgs),
    /// Benchmark indexed radius counting against the brute-force scan
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 16.0)]
    route_length: f64,
    #[arg(long, default_value_t = 2.0)]
    frame_spacing: f64,
    /// Historical traversal count; one query scan is generated in addition
    #[arg(long, default_value_t = 5)]
    traversals: usize,
    #[arg(long, default_value_t = 12.0)]
    ground_width: f64,
    /// Surface sampling density, points per square meter
    #[arg(long, default_value_t = 50.0)]
    density: f64,
    #[arg(long, default_value_t = 4)]
    persistent: usize,
    #[arg(long, default_value_t = 3)]
    cars: usize,
    #[arg(long, default_value_t = 2)]
    pedestrians: usize,
    /// Historical traversals each ephemeral object appears in
    #[arg(long, default_value_t = 1)]
    ephemeral_presence: usize,
    /// Stdev of per-traversal ephemeral displacement (m)
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    /// Per-point measurement noise stdev (m)
    #[arg(long, default_value_t = 0.02)]
    sensor_noise: f64,
    /// Recorded-pose translation noise stdev (m)
    #[arg(long, default_value_t = 0.0)]
    loc_noise: f64,
    /// Recorded-pose yaw noise stdev (rad)
    #[arg(long, default_value_t = 0.0)]
    loc_noise_yaw: f64,
}

#[derive(Args)]
struct AccumulateArgs {
    /// Dataset manifest (TOML)
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Location spacing along the route (m)
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    /// Accumulation half-window around each location (m)
    #[arg(long, default_value_t = 20.0)]
    window: f64,
}

#[derive(Args)]
struct P2Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Traversal id to score; the rest become history (default: highest id)
    #[arg(long)]
    scan_traversal: Option<u64>,
    /// Neighbor-count radius (m)
    #[arg(long, default_value_t = 0.3)]
    radius: f64,
    #[arg(long, default_value_t = 2)]
    min_traversals: usize,
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    #[arg(long, default_value_t = 20.0)]
    window: f64,
}

#[derive(Copy, Clone, ValueEnum)]
enum AggArg {
    Mean,
    Max,
}

impl From<AggArg> for AggregationMode {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Mean => AggregationMode::Mean,
            AggArg::Max => AggregationMode::Max,
        }
    }
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    voxel_size: f64,
    #[arg(long, value_enum, default_value_t = AggArg::Mean)]
    agg: AggArg,
    /// Route location to featurize (default: midpoint of derived locations)
    #[arg(long)]
    location: Option<f64>,
    /// Traversal id to leave out of the store (e.g. the query scan)
    #[arg(long)]
    exclude_traversal: Option<u64>,
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    #[arg(long, default_value_t = 20.0)]
    window: f64,
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scan_traversal: Option<u64>,
    #[arg(long, default_value_t = 0.3)]
    radius: f64,
    #[arg(long, default_value_t = 0.5)]
    voxel_size: f64,
    #[arg(long, value_enum, default_value_t = AggArg::Mean)]
    agg: AggArg,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    #[arg(long, default_value_t = 20.0)]
    window: f64,
}

#[derive(Args)]
struct FilterArgs {
    /// Candidate boxes (label text format)
    #[arg(long)]
    boxes: PathBuf,
    /// The scored cloud (PCB1, global frame)
    #[arg(long)]
    cloud: PathBuf,
    /// Per-point scores (P2S1), aligned with the cloud
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.20)]
    percentile: f64,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    min_points: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    points: usize,
    #[arg(long, default_value_t = 10_000)]
    queries: usize,
    #[arg(long, default_value_t = 0.3)]
    radius: f64,
    /// Queries timed under brute force before extrapolating
    #[arg(long, default_value_t = 32)]
    brute_sample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// CLI-level failures that are not library errors.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("TRAVERSE_P2_THREADS") {
            Ok(v) => v
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("TRAVERSE_P2_THREADS={v} is not a number")))?,
            Err(_) => 0,
        },
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => 2,
                CliError::Data(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<IngestError>() {
            return match e {
                IngestError::InvalidConfig { .. } => 2,
                IngestError::NoFramesInWindow { .. } => 4,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<P2Error>() {
            return match e {
                P2Error::TooFewTraversals { .. } => 4,
                P2Error::InvalidConfig { .. } => 2,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<SquashError>() {
            return match e {
                SquashError::Io { .. }
                | SquashError::BadMagic { .. }
                | SquashError::TruncatedFile { .. } => 3,
                _ => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<AlignError>() {
            match e {
                AlignError::Io { .. }
                | AlignError::BadMagic { .. }
                | AlignError::TruncatedFile { .. } => return 3,
                AlignError::InvalidSpec { .. } => return 2,
                // transparent wrappers: classify by the wrapped error next
                AlignError::P2(_) | AlignError::Squash(_) => continue,
                _ => return 4,
            }
        }
        if let Some(e) = cause.downcast_ref::<LabelsError>() {
            return match e {
                LabelsError::Io { .. } | LabelsError::MalformedRecord { .. } => 3,
                LabelsError::InvalidConfig { .. } => 2,
                _ => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<SimError>() {
            match e {
                SimError::InvalidSpec { .. } => return 2,
                SimError::LengthMismatch { .. } | SimError::EmptyClass { .. } => return 4,
                _ => continue,
            }
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Accumulate(args) => cmd_accumulate(args),
        Command::P2(args) => cmd_p2(args),
        Command::Featurize(args) => cmd_featurize(args),
        Command::TrainHead(args) => cmd_train_head(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {dir:?}"))
}

/// `run_meta.txt`: one `key = value` line per effective parameter, in
/// insertion order. Output paths are deliberately absent so identically
/// parameterized runs produce identical bytes wherever they land.
fn write_run_meta(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in entries {
        text.push_str(&format!("{key} = {value}\n"));
    }
    let path = dir.join("run_meta.txt");
    fs::write(&path, text).with_context(|| format!("writing {path:?}"))
}

fn location_millis(location: f64) -> i64 {
    (location * 1000.0).round() as i64
}

/// Split the manifest's traversals into (history, scan) by scan id,
/// defaulting to the highest id.
fn split_scan(
    mut traversals: Vec<Traversal>,
    scan_id: Option<u64>,
) -> Result<(Vec<Traversal>, Traversal)> {
    let scan_id = scan_id
        .or_else(|| traversals.iter().map(|t| t.traversal_id()).max())
        .ok_or_else(|| CliError::Data("manifest has no traversals".into()))?;
    let idx = traversals
        .iter()
        .position(|t| t.traversal_id() == scan_id)
        .ok_or_else(|| CliError::Usage(format!("traversal {scan_id} is not in the manifest")))?;
    let scan = traversals.remove(idx);
    Ok((traversals, scan))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let spec = SceneSpec {
        route_length: args.route_length,
        frame_spacing: args.frame_spacing,
        num_traversals: args.traversals,
        ground_width: args.ground_width,
        surface_density: args.density,
        num_persistent: args.persistent,
        num_cars: args.cars,
        num_pedestrians: args.pedestrians,
        ephemeral_presence: args.ephemeral_presence,
        position_jitter: args.jitter,
        sensor_noise: args.sensor_noise,
        localization_noise_translation: args.loc_noise,
        localization_noise_yaw: args.loc_noise_yaw,
        sensor_height: 1.8,
        seed: args.seed,
    };
    let scene = generate_scene(&spec)?;
    ensure_out(&args.out)?;
    let written = write_scene(&scene, &args.out)?;
    let total_points: usize = scene.traversals.iter().map(|t| t.num_points()).sum();
    write_run_meta(
        &args.out,
        &[
            ("subcommand", "simulate".into()),
            ("seed", spec.seed.to_string()),
            ("route_length", spec.route_length.to_string()),
            ("frame_spacing", spec.frame_spacing.to_string()),
            ("traversals", spec.num_traversals.to_string()),
            ("ground_width", spec.ground_width.to_string()),
            ("density", spec.surface_density.to_string()),
            ("persistent", spec.num_persistent.to_string()),
            ("cars", spec.num_cars.to_string()),
            ("pedestrians", spec.num_pedestrians.to_string()),
            ("ephemeral_presence", spec.ephemeral_presence.to_string()),
            ("jitter", spec.position_jitter.to_string()),
            ("sensor_noise", spec.sensor_noise.to_string()),
            ("loc_noise", spec.localization_noise_translation.to_string()),
            ("loc_noise_yaw", spec.localization_noise_yaw.to_string()),
            ("query_traversal", scene.query_scan().traversal_id().to_string()),
        ],
    )?;
    println!(
        "simulated {} traversals + query scan, {total_points} points; manifest {:?}",
        spec.num_traversals, written.manifest
    );
    Ok(())
}

fn cmd_accumulate(args: AccumulateArgs) -> Result<()> {
    let cfg = AccumulationConfig { spacing_m: args.spacing, window_hm: args.window };
    cfg.validate()?;
    let manifest = load_manifest(&args.manifest)?;
    let traversals = load_traversals(&manifest)?;
    let locations = match &manifest.locations {
        Some(explicit) => explicit.clone(),
        None => locations_for_route(&traversals, &cfg),
    };
    ensure_out(&args.out)?;

    let mut summary = String::from("traversal_id,location_mm,num_frames,num_points,file\n");
    let mut files = 0usize;
    for traversal in &traversals {
        for &location in &locations {
            match accumulate_dense(traversal, location, &cfg) {
                Ok(dense) => {
                    let name = format!(
                        "dense_t{}_l{}.pcb",
                        traversal.traversal_id(),
                        location_millis(location)
                    );
                    write_point_cloud(&dense.points, &args.out.join(&name))?;
                    files += 1;
                    summary.push_str(&format!(
                        "{},{},{},{},{name}\n",
                        traversal.traversal_id(),
                        location_millis(location),
                        dense.source_frame_ids.len(),
                        dense.points.len(),
                    ));
                }
                Err(IngestError::NoFramesInWindow { .. }) => {
                    summary.push_str(&format!(
                        "{},{},0,0,\n",
                        traversal.traversal_id(),
                        location_millis(location),
                    ));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    fs::write(args.out.join("summary.csv"), summary)?;
    write_run_meta(
        &args.out,
        &[
            ("subcommand", "accumulate".into()),
            ("spacing", cfg.spacing_m.to_string()),
            ("window", cfg.window_hm.to_string()),
            ("traversals", traversals.len().to_string()),
            ("locations", locations.len().to_string()),
            ("explicit_locations", manifest.locations.is_some().to_string()),
        ],
    )?;
    println!(
        "accumulated {files} dense clouds ({} traversals x {} locations)",
        traversals.len(),
        locations.len()
    );
    Ok(())
}

fn cmd_p2(args: P2Args) -> Result<()> {
    let accum = AccumulationConfig { spacing_m: args.spacing, window_hm: args.window };
    accum.validate()?;
    let p2_cfg = P2Config { radius_r: args.radius, min_traversals: args.min_traversals };
    p2_cfg.validate()?;

    let manifest = load_manifest(&args.manifest)?;
    let traversals = load_traversals(&manifest)?;
    let (history, scan) = split_scan(traversals, args.scan_traversal)?;
    let result = match &manifest.locations {
        Some(explicit) => {
            compute_p2_at_locations(&history, &scan, explicit, &accum, &p2_cfg, false)?
        }
        None => compute_p2_over_route(&history, &scan, &accum, &p2_cfg, false)?,
    };

    ensure_out(&args.out)?;
    save_scores(&result.scores, &args.out.join("scores.p2s"))?;

    let mut bins = [0usize; 20];
    for &s in &result.scores {
        let b = ((s * 20.0) as usize).min(19);
        bins[b] += 1;
    }
    let mut histogram = String::from("bin_lo,bin_hi,count\n");
    for (i, count) in bins.iter().enumerate() {
        histogram.push_str(&format!("{},{},{count}\n", i as f64 / 20.0, (i + 1) as f64 / 20.0));
    }
    fs::write(args.out.join("histogram.csv"), histogram)?;

    let mean = if result.scores.is_empty() {
        0.0
    } else {
        result.scores.iter().sum::<f64>() / result.scores.len() as f64
    };
    write_run_meta(
        &args.out,
        &[
            ("subcommand", "p2".into()),
            ("radius", p2_cfg.radius_r.to_string()),
            ("min_traversals", p2_cfg.min_traversals.to_string()),
            ("spacing", accum.spacing_m.to_string()),
            ("window", accum.window_hm.to_string()),
            ("scan_traversal", scan.traversal_id().to_string()),
            ("history_traversals", history.len().to_string()),
            ("explicit_locations", manifest.locations.is_some().to_string()),
            ("entropy_log", "natural".into()),
            ("scores", result.scores.len().to_string()),
        ],
    )?;
    println!(
        "scored {} points of traversal {} against {} historical traversals (mean {mean:.4})",
        result.scores.len(),
        scan.traversal_id(),
        history.len()
    );
    Ok(())
}

fn cmd_featurize(args: FeaturizeArgs) -> Result<()> {
    let accum = AccumulationConfig { spacing_m: args.spacing, window_hm: args.window };
    accum.validate()?;
    let manifest = load_manifest(&args.manifest)?;
    let mut traversals = load_traversals(&manifest)?;
    if let Some(excluded) = args.exclude_traversal {
        traversals.retain(|t| t.traversal_id() != excluded);
        if traversals.is_empty() {
            return Err(CliError::Data("no traversals left after exclusion".into()).into());
        }
    }
    let locations = match &manifest.locations {
        Some(explicit) => explicit.clone(),
        None => locations_for_route(&traversals, &accum),
    };
    let location = args.location.unwrap_or(locations[locations.len() / 2]);

    let mut dense = Vec::new();
    let mut skipped = Vec::new();
    for traversal in &traversals {
        match accumulate_dense(traversal, location, &accum) {
            Ok(d) => dense.push(d),
            Err(IngestError::NoFramesInWindow { traversal_id, .. }) => skipped.push(traversal_id),
            Err(e) => return Err(e.into()),
        }
    }
    if dense.is_empty() {
        return Err(CliError::Data(format!("no traversal covers location {location}")).into());
    }
    let spec = VoxelGridSpec::from_clouds(&dense, args.voxel_size)?;
    let stores = featurize_traversals(&dense, &spec, &HandcraftedFeaturizer)?;
    let mode: AggregationMode = args.agg.into();
    let per_traversal: Vec<_> = stores.iter().map(|(s, _)| s.clone()).collect();
    let aggregated = aggregate(&per_traversal, mode)?;

    ensure_out(&args.out)?;
    let store_name = format!("store_l{}.sqf", location_millis(location));
    save_store(&aggregated, &args.out.join(&store_name))?;

    let mut entries = vec![
        ("subcommand", "featurize".into()),
        ("voxel_size", args.voxel_size.to_string()),
        ("aggregation", mode.as_str().into()),
        ("location", location.to_string()),
        ("spacing", accum.spacing_m.to_string()),
        ("window", accum.window_hm.to_string()),
        ("feature_dim", aggregated.dim().to_string()),
        ("occupied_voxels", aggregated.len().to_string()),
        ("skipped_traversals", format!("{skipped:?}")),
    ];
    let detail: Vec<String> = dense
        .iter()
        .zip(&stores)
        .map(|(d, (s, dropped))| format!("t{}:{} voxels ({dropped} dropped)", d.traversal_id, s.len()))
        .collect();
    entries.push(("per_traversal", detail.join("; ")));
    write_run_meta(&args.out, &entries)?;
    println!(
        "featurized {} traversals at location {location}: {} voxels -> {store_name}",
        dense.len(),
        aggregated.len()
    );
    Ok(())
}

fn cmd_train_head(args: TrainHeadArgs) -> Result<()> {
    let accum = AccumulationConfig { spacing_m: args.spacing, window_hm: args.window };
    accum.validate()?;
    let p2_cfg = P2Config { radius_r: args.radius, min_traversals: 2 };
    p2_cfg.validate()?;

    let manifest = load_manifest(&args.manifest)?;
    let traversals = load_traversals(&manifest)?;
    let (history, scan) = split_scan(traversals, args.scan_traversal)?;
    let mode: AggregationMode = args.agg.into();

    let (dataset, stores) = match &manifest.locations {
        Some(explicit) => build_dataset_at_locations(
            &history,
            &scan,
            explicit,
            &accum,
            &p2_cfg,
            args.voxel_size,
            mode,
            derive_seed(args.seed, 1),
            args.val_fraction,
        )?,
        None => build_route_dataset(
            &history,
            &scan,
            &accum,
            &p2_cfg,
            args.voxel_size,
            mode,
            derive_seed(args.seed, 1),
            args.val_fraction,
        )?,
    };
    let mlp_spec = MlpSpec::for_input_dim(dataset.feature_dim(), derive_seed(args.seed, 2));
    let train_cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        momentum: args.momentum,
        seed: derive_seed(args.seed, 3),
    };
    let (mlp, history_stats) = train_head(&dataset, &mlp_spec, &train_cfg)?;

    ensure_out(&args.out)?;
    save_mlp(&mlp, &args.out.join("model.mlp"))?;
    let mut loss_csv = String::from("epoch,train_l1,val_l1\n");
    for stats in &history_stats {
        loss_csv.push_str(&format!("{},{},{}\n", stats.epoch, stats.train_l1, stats.val_l1));
    }
    fs::write(args.out.join("loss_history.csv"), loss_csv)?;

    // per-voxel predictions over the middle location's combined store
    if let Some(mid) = stores.get(stores.len() / 2) {
        let map = predict_p2_map(&mlp, &mid.store)?;
        let mut csv = String::from("voxel_x,voxel_y,voxel_z,tau_hat\n");
        for ((x, y, z), tau) in &map {
            csv.push_str(&format!("{x},{y},{z},{tau}\n"));
        }
        fs::write(args.out.join("predictions.csv"), csv)?;
    }

    let final_val = history_stats.last().map_or(f64::NAN, |s| s.val_l1);
    write_run_meta(
        &args.out,
        &[
            ("subcommand", "train-head".into()),
            ("radius", p2_cfg.radius_r.to_string()),
            ("voxel_size", args.voxel_size.to_string()),
            ("aggregation", mode.as_str().into()),
            ("lr", train_cfg.learning_rate.to_string()),
            ("epochs", train_cfg.epochs.to_string()),
            ("batch", train_cfg.batch_size.to_string()),
            ("momentum", train_cfg.momentum.to_string()),
            ("val_fraction", args.val_fraction.to_string()),
            ("seed", args.seed.to_string()),
            ("split_seed", derive_seed(args.seed, 1).to_string()),
            ("init_seed", derive_seed(args.seed, 2).to_string()),
            ("shuffle_seed", derive_seed(args.seed, 3).to_string()),
            ("scan_traversal", scan.traversal_id().to_string()),
            ("explicit_locations", manifest.locations.is_some().to_string()),
            ("feature_dim", dataset.feature_dim().to_string()),
            ("rows", dataset.len().to_string()),
            ("spacing", accum.spacing_m.to_string()),
            ("window", accum.window_hm.to_string()),
        ],
    )?;
    println!(
        "trained on {} rows (dim {}); final validation L1 {final_val:.4}",
        dataset.len(),
        dataset.feature_dim()
    );
    Ok(())
}

fn cmd_filter(args: FilterArgs) -> Result<()> {
    let cfg = FilterConfig {
        percentile: args.percentile,
        threshold: args.threshold,
        min_points: args.min_points,
    };
    cfg.validate()?;
    let boxes = load_labels(&args.boxes)?;
    let cloud = load_point_cloud(&args.cloud)?;
    let scores = load_scores(&args.scores)?;
    let outcome = filter_pseudo_labels(&boxes, &cloud, &scores, &cfg)?;

    ensure_out(&args.out)?;
    save_labels(&outcome.kept, &args.out.join("kept_boxes.txt"))?;
    let mut report = String::from("box_index,class,kept,reason,num_points,p2_percentile\n");
    for d in &outcome.decisions {
        report.push_str(&format!(
            "{},{},{},{},{},{}\n",
            d.box_index,
            boxes[d.box_index].class,
            d.kept,
            d.reason.map_or("", |r| r.as_str()),
            d.num_points,
            d.percentile_value.map_or(String::new(), |p| p.to_string()),
        ));
    }
    fs::write(args.out.join("filter_report.csv"), report)?;
    write_run_meta(
        &args.out,
        &[
            ("subcommand", "filter".into()),
            ("percentile", cfg.percentile.to_string()),
            ("threshold", cfg.threshold.to_string()),
            ("min_points", cfg.min_points.to_string()),
            ("percentile_estimator", "nearest_rank".into()),
            ("boxes", boxes.len().to_string()),
            ("kept", outcome.kept.len().to_string()),
            ("rejected", outcome.rejected.len().to_string()),
        ],
    )?;
    println!("kept {} of {} boxes", outcome.kept.len(), boxes.len());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    use rand::Rng;
    if args.points == 0 || args.queries == 0 || !args.radius.is_finite() || args.radius <= 0.0 {
        return Err(CliError::Usage("points, queries and radius must be positive".into()).into());
    }
    let brute_sample = args.brute_sample.clamp(1, args.queries);
    let mut rng = rand_chacha_rng(args.seed);
    // unit density: the cube side scales with the cube root of the count
    let side = (args.points as f64).cbrt();
    let cloud = PointCloud::new(
        (0..args.points)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..side),
                    rng.random_range(0.0..side),
                    rng.random_range(0.0..side),
                )
            })
            .collect(),
    );
    let queries: Vec<Point3> = (0..args.queries)
        .map(|_| {
            Point3::new(
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
            )
        })
        .collect();

    let t0 = Instant::now();
    let index = build_index(&cloud, args.radius);
    let build_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let counts = index.count_within_batch(&queries, args.radius);
    let batch_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let brute: Vec<usize> =
        queries[..brute_sample].iter().map(|&q| count_brute(&cloud, q, args.radius)).collect();
    let brute_sample_s = t2.elapsed().as_secs_f64();
    let brute_extrapolated_s = brute_sample_s * args.queries as f64 / brute_sample as f64;
    anyhow::ensure!(counts[..brute_sample] == brute[..], "index disagrees with brute force");

    let speedup = brute_extrapolated_s / batch_s;
    ensure_out(&args.out)?;
    let mut csv = String::from(
        "points,queries,radius,cell_size,build_s,batch_s,brute_sample,brute_sample_s,brute_extrapolated_s,speedup\n",
    );
    csv.push_str(&format!(
        "{},{},{},{},{build_s},{batch_s},{brute_sample},{brute_sample_s},{brute_extrapolated_s},{speedup}\n",
        args.points, args.queries, args.radius, args.radius
    ));
    fs::write(args.out.join("bench.csv"), csv)?;
    write_run_meta(
        &args.out,
        &[
            ("subcommand", "bench".into()),
            ("points", args.points.to_string()),
            ("queries", args.queries.to_string()),
            ("radius", args.radius.to_string()),
            ("cell_size", args.radius.to_string()),
            ("brute_sample", brute_sample.to_string()),
            ("seed", args.seed.to_string()),
        ],
    )?;
    println!(
        "build {build_s:.3}s; batch {batch_s:.4}s for {} queries; brute ~{brute_extrapolated_s:.1}s; speedup {speedup:.0}x",
        args.queries
    );
    Ok(())
}

fn rand_chacha_rng(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
