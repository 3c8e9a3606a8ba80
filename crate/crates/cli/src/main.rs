//! specmask: train, compress, evaluate, cost-model and deploy per-pixel
//! cloud/land/sea classifiers for hyperspectral cubes.
//!
//! Exit codes: 0 success, 2 invalid arguments, 3 data or format errors.

mod config;
mod scenes;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::Config;
use scenes::SceneArgs;
use specmask_core::bench::run_benchmark;
use specmask_core::cnn::{self, build_default_arch, TrainConfig};
use specmask_core::cost::{feasibility, HardwareBudget};
use specmask_core::data::{
    self, read_cube, synth_scene, write_cube, write_labels, Layout, SplitTag, SynthConfig,
};
use specmask_core::eval::{confusion, metrics_from_confusion, MetricReport};
use specmask_core::format::{load_model, save_model, AnyModel};
use specmask_core::gbt::{self, staged_search, GrowthParams, GrowthPolicy};
use specmask_core::mask::{
    classify_cube, cloud_fraction_from_pgm, decide_downlink, decide_from_fraction, export_mask,
};
use specmask_core::reduce::{build_reduced_model, fit_pca, HeadSpec};
use specmask_core::registry::{ModelRegistry, PixelClassifier};

#[derive(Parser)]
#[command(
    name = "specmask",
    version,
    about = "Lightweight pixel classifiers for hyperspectral cloud masking",
    after_help = "Config: key=value file via --config or SPECMASK_CONFIG; flags win."
)]
struct Cli {
    /// key=value config file (fallback: SPECMASK_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic scene (cube + label map).
    Synth(SynthArgs),
    /// Validate and summarize a cube (and optionally its labels).
    Ingest(IngestArgs),
    /// Train the 1D spectral CNN.
    TrainCnn(TrainCnnArgs),
    /// Train a boosted-tree ensemble (level- or leaf-wise growth).
    TrainGbt(TrainGbtArgs),
    /// Factorize conv layers down to a parameter budget, then fine-tune.
    Compress(CompressArgs),
    /// Fit a PCA projector and report explained variance.
    PcaFit(PcaFitArgs),
    /// Build and train a reduced model (frozen projection + small head).
    Reduce(ReduceArgs),
    /// Staged random hyperparameter search for the boosted ensembles.
    Search(SearchArgs),
    /// Evaluate a model on labeled scenes.
    Eval(EvalArgs),
    /// Analytic per-pixel cost and hardware feasibility of a model.
    Cost(CostArgs),
    /// Per-image inference timing on a cube.
    Bench(BenchArgs),
    /// Classify a cube and export class/confidence maps.
    Mask(MaskArgs),
    /// Keep/discard decision for a cube from its cloud fraction.
    Decide(DecideArgs),
}

// ---------------------------------------------------------------------------
// synth / ingest
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 120)]
    bands: usize,
    /// Gaussian noise sigma added to the class prototypes.
    #[arg(long)]
    noise_sigma: Option<f32>,
    /// thirds | checkerboard | cloud:<fraction>
    #[arg(long, default_value = "thirds")]
    layout: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output cube path.
    #[arg(long)]
    out: PathBuf,
    /// Output label path (default: cube path with .hsl extension).
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

fn parse_layout(s: &str) -> Result<Layout> {
    match s {
        "thirds" => Ok(Layout::Thirds),
        "checkerboard" => Ok(Layout::Checkerboard),
        other => match other.strip_prefix("cloud:") {
            Some(f) => Ok(Layout::CloudFraction(
                f.parse().with_context(|| format!("bad cloud fraction '{f}'"))?,
            )),
            None => bail!("unknown layout '{other}' (thirds | checkerboard | cloud:<f>)"),
        },
    }
}

fn cmd_synth(args: SynthArgs, cfg: &Config) -> Result<()> {
    let mut sc = SynthConfig::new(args.height, args.width, args.bands);
    sc.noise_sigma = cfg.resolve(args.noise_sigma, "noise-sigma", 0.01)?;
    sc.layout = parse_layout(&args.layout)?;
    let seed = cfg.resolve(args.seed, "seed", 0)?;
    let (cube, labels) = synth_scene(&sc, seed)?;
    write_cube(&cube, &args.out)?;
    let labels_path = args
        .labels_out
        .unwrap_or_else(|| args.out.with_extension("hsl"));
    write_labels(&labels, &labels_path)?;
    let counts = labels.class_counts();
    println!("cube={}", args.out.display());
    println!("labels={}", labels_path.display());
    println!("height={} width={} bands={}", cube.height, cube.width, cube.bands);
    println!("valid_bands={}", cube.valid_band_count());
    println!("sea={} land={} cloud={}", counts[0], counts[1], counts[2]);
    Ok(())
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Rewrite the cube here after validation (lossless round-trip).
    #[arg(long)]
    copy_to: Option<PathBuf>,
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let cube = read_cube(&args.cube).with_context(|| format!("reading {}", args.cube.display()))?;
    println!("cube={}", args.cube.display());
    println!("height={} width={} bands={}", cube.height, cube.width, cube.bands);
    println!(
        "wavelengths_nm={:.1}..{:.1}",
        cube.wavelengths.first().copied().unwrap_or(0.0),
        cube.wavelengths.last().copied().unwrap_or(0.0)
    );
    println!("valid_bands={}", cube.valid_band_count());
    println!("pixels={}", cube.pixel_count());
    if let Some(label_path) = &args.labels {
        let labels = data::read_labels(label_path)?;
        if labels.height != cube.height || labels.width != cube.width {
            bail!(
                "label dimensions {}x{} do not match cube {}x{}",
                labels.height,
                labels.width,
                cube.height,
                cube.width
            );
        }
        let counts = labels.class_counts();
        println!("sea={} land={} cloud={}", counts[0], counts[1], counts[2]);
    }
    if let Some(copy) = &args.copy_to {
        write_cube(&cube, copy)?;
        println!("copied_to={}", copy.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainCnnArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    step_size: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn train_config(cfg: &Config, epochs: Option<usize>, batch: Option<usize>, step: Option<f32>, seed: Option<u64>) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.resolve(epochs, "epochs", 2)?,
        batch: cfg.resolve(batch, "batch", 32)?,
        step_size: cfg.resolve(step, "step-size", 0.05)?,
        seed: cfg.resolve(seed, "seed", 0)?,
    })
}

fn cmd_train_cnn(args: TrainCnnArgs, cfg: &Config) -> Result<()> {
    let mut ds = args.scenes.load_raw()?;
    let stats = ds.fit_normalization()?;
    let tc = train_config(cfg, args.epochs, args.batch, args.step_size, args.seed)?;
    let mut model = build_default_arch(ds.feature_count, data::CLASS_COUNT)?;
    model.init_weights(tc.seed);
    let history = cnn::train(&mut model, &ds, &tc)?;
    model.norm = Some(stats);
    PixelClassifier::save(&model, &args.out)?;
    let counts = model.count_params();
    println!("model={}", args.out.display());
    println!("kind=cnn");
    println!("params_total={}", counts.total);
    for (epoch, (acc, loss)) in history.val_accuracy.iter().zip(&history.train_loss).enumerate() {
        println!("epoch{}_train_loss={loss:.6} epoch{}_val_accuracy={acc:.6}", epoch + 1, epoch + 1);
    }
    Ok(())
}

#[derive(Args)]
struct TrainGbtArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    /// level | leaf
    #[arg(long)]
    policy: String,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_child_weight: Option<f64>,
    #[arg(long)]
    subsample: Option<f64>,
    #[arg(long)]
    colsample: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    num_boost_round: Option<usize>,
    #[arg(long)]
    num_leaves: Option<usize>,
    #[arg(long)]
    min_data_in_leaf: Option<usize>,
    /// Rounds without validation improvement before stopping (0 disables).
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train_gbt(args: TrainGbtArgs, cfg: &Config) -> Result<()> {
    let policy = GrowthPolicy::parse(&args.policy)?;
    let base = match policy {
        GrowthPolicy::Level => GrowthParams::level_tuned(),
        GrowthPolicy::Leaf => GrowthParams::leaf_tuned(),
    };
    let params = GrowthParams {
        max_depth: cfg.resolve(args.max_depth, "max-depth", base.max_depth)?,
        min_child_weight: cfg.resolve(args.min_child_weight, "min-child-weight", base.min_child_weight)?,
        subsample: cfg.resolve(args.subsample, "subsample", base.subsample)?,
        colsample: cfg.resolve(args.colsample, "colsample", base.colsample)?,
        learning_rate: cfg.resolve(args.learning_rate, "learning-rate", base.learning_rate)?,
        num_boost_round: cfg.resolve(args.num_boost_round, "num-boost-round", base.num_boost_round)?,
        num_leaves: cfg.resolve(args.num_leaves, "num-leaves", base.num_leaves)?,
        min_data_in_leaf: cfg.resolve(args.min_data_in_leaf, "min-data-in-leaf", base.min_data_in_leaf)?,
        early_stop_patience: cfg.resolve(args.patience, "patience", base.early_stop_patience)?,
    };
    let seed = cfg.resolve(args.seed, "seed", 0)?;

    let mut ds = args.scenes.load_raw()?;
    let stats = ds.fit_normalization()?;
    let mut ensemble = gbt::train_boosted(&ds, &params, policy, seed)?;
    ensemble.norm = Some(stats);
    PixelClassifier::save(&ensemble, &args.out)?;
    let tree_stats = ensemble.tree_stats();
    println!("model={}", args.out.display());
    println!("kind=gbt-{}", policy.name());
    println!("rounds={}", ensemble.rounds());
    println!("trees={}", tree_stats.tree_count);
    println!("nodes={}", tree_stats.total_nodes);
    println!("leaves={}", tree_stats.total_leaves);
    println!("max_depth={}", tree_stats.max_depth);
    Ok(())
}

// ---------------------------------------------------------------------------
// compress / pca-fit / reduce / search
// ---------------------------------------------------------------------------

#[derive(Args)]
struct CompressArgs {
    /// Input CNN model file.
    #[arg(long)]
    model: PathBuf,
    /// Parameter budget for the factorized model.
    #[arg(long)]
    budget: Option<usize>,
    /// Fine-tune epochs after factorization (0 skips; needs --scenes).
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Scene manifest for the fine-tune pass.
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long, default_value = "")]
    train: String,
    #[arg(long, default_value = "")]
    val: String,
    #[arg(long, default_value = "")]
    test: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_compress(args: CompressArgs, cfg: &Config) -> Result<()> {
    let budget = cfg.resolve(args.budget, "budget", 1419)?;
    let AnyModel::Cnn(model) = load_model(&args.model)? else {
        bail!("--model must point at a plain CNN model file");
    };
    let before = model.count_params().total;
    let outcome = specmask_core::compress::compress_model(&model, budget)?;
    let mut compressed = outcome.model;
    println!("params_before={before}");
    println!("params_after={}", outcome.total_params);
    println!("budget={budget}");
    println!("budget_infeasible={}", outcome.budget_infeasible);
    for (i, rank) in outcome.ranks.iter().enumerate() {
        match rank {
            Some(r) => println!("conv{}_rank={r}", i + 1),
            None => println!("conv{}_rank=full", i + 1),
        }
    }

    let finetune_epochs = cfg.resolve(args.finetune_epochs, "finetune-epochs", 1)?;
    if finetune_epochs > 0 {
        let Some(manifest) = args.scenes else {
            bail!("fine-tuning needs --scenes (or pass --finetune-epochs 0)");
        };
        let scene_args = SceneArgs {
            scenes: manifest,
            train: args.train,
            val: args.val,
            test: args.test,
        };
        let mut ds = scene_args.load_raw()?;
        match &compressed.norm {
            Some(stats) => ds.apply_normalization(stats)?,
            None => {
                compressed.norm = Some(ds.fit_normalization()?);
            }
        }
        let tc = TrainConfig {
            epochs: finetune_epochs,
            seed: cfg.resolve(args.seed, "seed", 0)?,
            ..Default::default()
        };
        let history = cnn::train(&mut compressed, &ds, &tc)?;
        println!("finetune_epochs={finetune_epochs}");
        println!("finetune_val_accuracy={:.6}", history.val_accuracy.last().unwrap());
    }
    PixelClassifier::save(&compressed, &args.out)?;
    println!("model={}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct PcaFitArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    /// Reduced dimension.
    #[arg(long)]
    components: Option<usize>,
    /// Comma-separated explained-variance thresholds to report.
    #[arg(long, default_value = "0.999,0.9999")]
    thresholds: String,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_pca_fit(args: PcaFitArgs, cfg: &Config) -> Result<()> {
    let mut ds = args.scenes.load_raw()?;
    ds.fit_normalization()?;
    let d = cfg.resolve(args.components, "components", 30)?;
    let train_idx = ds.indices_of(SplitTag::Train);
    let mut train_rows = Vec::with_capacity(train_idx.len() * ds.feature_count);
    for &i in &train_idx {
        train_rows.extend_from_slice(ds.row(i));
    }
    let projector = fit_pca(&train_rows, ds.feature_count, d)?;
    let thresholds: Vec<f64> = args
        .thresholds
        .split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad threshold '{s}'")))
        .collect::<Result<_>>()?;
    let report = specmask_core::reduce::explained_variance_report(&projector, &thresholds)?;
    println!("components={d}");
    for (t, k) in report {
        println!("threshold_{t}=k{k}");
    }
    let mut cumulative = 0.0;
    for (i, e) in projector.explained.iter().enumerate().take(10) {
        cumulative += e;
        println!("explained_{}={:.6} cumulative={:.6}", i + 1, e, cumulative);
    }
    save_model(&AnyModel::Projector(projector), &args.out)?;
    println!("projector={}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    /// Projector file from pca-fit (fit on the same scenes/split);
    /// alternatively give --components to fit inline.
    #[arg(long)]
    projector: Option<PathBuf>,
    #[arg(long)]
    components: Option<usize>,
    /// default | affine | affine-bias
    #[arg(long, default_value = "default")]
    head: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    step_size: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_reduce(args: ReduceArgs, cfg: &Config) -> Result<()> {
    let mut ds = args.scenes.load_raw()?;
    let stats = ds.fit_normalization()?;
    let projector = match (&args.projector, args.components) {
        (Some(path), _) => match load_model(path)? {
            AnyModel::Projector(p) => p,
            AnyModel::Reduced(r) => r.projector,
            _ => bail!("--projector must point at a projector or reduced model file"),
        },
        (None, Some(d)) => {
            let train_idx = ds.indices_of(SplitTag::Train);
            let mut train_rows = Vec::with_capacity(train_idx.len() * ds.feature_count);
            for &i in &train_idx {
                train_rows.extend_from_slice(ds.row(i));
            }
            fit_pca(&train_rows, ds.feature_count, d)?
        }
        (None, None) => bail!("give either --projector or --components"),
    };
    let head = match args.head.as_str() {
        "default" => HeadSpec::Default,
        "affine" => HeadSpec::Affine { bias: false },
        "affine-bias" => HeadSpec::Affine { bias: true },
        other => bail!("unknown head spec '{other}'"),
    };
    let tc = train_config(cfg, args.epochs, args.batch, args.step_size, args.seed)?;
    let mut model = build_reduced_model(&projector, head)?;
    model.head.init_weights(tc.seed);
    let history = specmask_core::reduce::train_reduced(&mut model, &ds, &tc)?;
    model.norm = Some(stats);
    PixelClassifier::save(&model, &args.out)?;
    let counts = model.count_params();
    println!("model={}", args.out.display());
    println!("kind=cnn-reduced");
    println!("components={}", model.projector.d);
    println!("params_trainable={}", counts.trainable);
    println!("params_total={}", counts.total);
    println!("mean_entries={}", model.mean_entries());
    println!("val_accuracy={:.6}", history.val_accuracy.last().unwrap());
    Ok(())
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    /// level | leaf
    #[arg(long)]
    policy: String,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the winning parameters as a key=value file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_search(args: SearchArgs, cfg: &Config) -> Result<()> {
    let policy = GrowthPolicy::parse(&args.policy)?;
    let trials = cfg.resolve(args.trials, "trials", 8)?;
    let seed = cfg.resolve(args.seed, "seed", 0)?;
    let mut ds = args.scenes.load_raw()?;
    ds.fit_normalization()?;
    let stages = match policy {
        GrowthPolicy::Level => gbt::level_stages(),
        GrowthPolicy::Leaf => gbt::leaf_stages(),
    };
    let outcome = staged_search(&ds, policy, &stages, trials, &GrowthParams::default(), seed)?;
    for t in &outcome.trials {
        println!(
            "trial stage={} index={} val_loss={:.6}",
            t.stage, t.trial, t.val_loss
        );
    }
    let best = &outcome.best;
    let lines = [
        format!("max-depth={}", best.max_depth),
        format!("min-child-weight={}", best.min_child_weight),
        format!("subsample={}", best.subsample),
        format!("colsample={}", best.colsample),
        format!("learning-rate={}", best.learning_rate),
        format!("num-boost-round={}", best.num_boost_round),
        format!("num-leaves={}", best.num_leaves),
        format!("min-data-in-leaf={}", best.min_data_in_leaf),
        format!("patience={}", best.early_stop_patience),
    ];
    println!("best_val_loss={:.6}", outcome.best_val_loss);
    for line in &lines {
        println!("{line}");
    }
    if let Some(out) = &args.out {
        std::fs::write(out, lines.join("\n") + "\n")?;
        println!("params_file={}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / cost / bench / mask / decide
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    scenes: SceneArgs,
    /// Rows to evaluate: test | val | train | all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Class the binary metrics refer to (cloud = 2).
    #[arg(long, default_value_t = 2)]
    positive_class: usize,
    /// Append one CSV row keyed by this model name.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Name used in reports (default: model file stem).
    #[arg(long)]
    name: Option<String>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = ModelRegistry::default()
        .load(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let mut ds = args.scenes.load_raw()?;
    match model.norm() {
        Some(stats) => ds.apply_normalization(stats)?,
        None => eprintln!("note: model carries no normalization; evaluating raw features"),
    }
    let tags: Vec<SplitTag> = match args.split.as_str() {
        "test" => vec![SplitTag::Test],
        "val" => vec![SplitTag::Val],
        "train" => vec![SplitTag::Train],
        "all" => vec![SplitTag::Train, SplitTag::Val, SplitTag::Test],
        other => bail!("unknown split '{other}'"),
    };
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for i in 0..ds.len() {
        if tags.contains(&ds.split[i]) {
            let probs = model.predict(ds.row(i))?;
            predictions.push(cnn::argmax(&probs) as u8);
            labels.push(ds.labels[i]);
        }
    }
    if labels.is_empty() {
        bail!("no rows in split '{}'", args.split);
    }
    let m = confusion(&predictions, &labels)?;
    let report = metrics_from_confusion(&m, args.positive_class)?;
    let name = args.name.unwrap_or_else(|| {
        args.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    });
    print!("{}", report.to_kv(&name));
    println!("rows={}", labels.len());
    for t in 0..3 {
        println!(
            "confusion_row{}={},{},{}",
            t, m.counts[t][0], m.counts[t][1], m.counts[t][2]
        );
    }
    if let Some(csv) = &args.csv {
        append_csv(csv, MetricReport::csv_header(), &report.to_csv_row(&name))?;
        println!("csv={}", csv.display());
    }
    Ok(())
}

fn append_csv(path: &PathBuf, header: &str, row: &str) -> Result<()> {
    use std::io::Write;
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    model: PathBuf,
    /// Hardware budget profile (key=value: name, cache_bytes,
    /// max_params_4byte). Default: 32 KB cache, 8K parameters.
    #[arg(long)]
    budget_file: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
}

fn cmd_cost(args: CostArgs) -> Result<()> {
    let model = ModelRegistry::default()
        .load(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let report = model.cost();
    let budget = match &args.budget_file {
        Some(path) => HardwareBudget::from_file(path)?,
        None => HardwareBudget::default(),
    };
    let verdict = feasibility(&report, &budget);
    let name = args.name.unwrap_or_else(|| {
        args.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    });
    println!("model={name}");
    println!("kind={}", report.model_kind);
    println!("flops_per_pixel={}", report.flops_per_pixel);
    println!("kflops_per_pixel={:.3}", report.kflops());
    println!("comparisons_per_pixel={}", report.comparisons_per_pixel);
    println!("params_trainable={}", report.params_trainable);
    println!("params_total={}", report.params_total);
    println!("bytes={}", report.bytes);
    for stage in &report.breakdown {
        println!(
            "stage_{}: flops={} comparisons={}..{}",
            stage.name, stage.flops, stage.comparisons_min, stage.comparisons_max
        );
    }
    println!("budget={}", verdict.budget_name);
    println!("fits_cache={}", verdict.fits_cache);
    println!("fits_param_limit={}", verdict.fits_param_limit);
    println!("margin_bytes={}", verdict.margin_bytes);
    println!("margin_params={}", verdict.margin_params);
    println!("feasible={}", verdict.feasible());
    if let Some(csv) = &args.csv {
        append_csv(
            csv,
            specmask_core::cost::CostReport::csv_header(),
            &report.to_csv_row(&name),
        )?;
        println!("csv={}", csv.display());
    }
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    repetitions: Option<usize>,
}

fn cmd_bench(args: BenchArgs, cfg: &Config) -> Result<()> {
    let model = ModelRegistry::default()
        .load(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let cube = read_cube(&args.cube).with_context(|| format!("reading {}", args.cube.display()))?;
    let repetitions = cfg.resolve(args.repetitions, "repetitions", 3)?;
    let report = run_benchmark(model.as_ref(), &cube, repetitions)?;
    print!("{}", report.to_kv());
    Ok(())
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Base path for the exported maps.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_mask(args: MaskArgs) -> Result<()> {
    let model = ModelRegistry::default()
        .load(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let cube = read_cube(&args.cube).with_context(|| format!("reading {}", args.cube.display()))?;
    let mask = classify_cube(model.as_ref(), &cube)?;
    let (class_path, conf_path) = export_mask(&mask, &args.out)?;
    println!("classes={}", class_path.display());
    println!("confidence={}", conf_path.display());
    println!("cloud_fraction={:.6}", mask.cloud_fraction);
    Ok(())
}

#[derive(Args)]
struct DecideArgs {
    /// Classify this cube with --model, or reuse an exported class map.
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Exported class map (alternative to --model/--cube).
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Keep the image iff cloud_fraction < threshold [default: 0.7,
    /// config key "threshold"].
    #[arg(long)]
    threshold: Option<f64>,
}

fn cmd_decide(args: DecideArgs, cfg: &Config) -> Result<()> {
    let threshold = cfg.resolve(args.threshold, "threshold", 0.7)?;
    let decision = match (&args.classes, &args.model, &args.cube) {
        (Some(classes), _, _) => {
            let fraction = cloud_fraction_from_pgm(classes)?;
            decide_from_fraction(fraction, threshold)?
        }
        (None, Some(model_path), Some(cube_path)) => {
            let model = ModelRegistry::default()
                .load(model_path)
                .with_context(|| format!("loading {}", model_path.display()))?;
            let cube = read_cube(cube_path).with_context(|| format!("reading {}", cube_path.display()))?;
            let mask = classify_cube(model.as_ref(), &cube)?;
            decide_downlink(&mask, threshold)?
        }
        _ => bail!("give --classes, or both --model and --cube"),
    };
    println!("cloud_fraction={:.6}", decision.cloud_fraction);
    println!("threshold={}", decision.threshold);
    println!("keep={}", decision.keep);
    println!("decision={}", if decision.keep { "downlink" } else { "discard" });
    Ok(())
}

// ---------------------------------------------------------------------------
// entry
// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &cfg),
        Command::Ingest(args) => cmd_ingest(args),
        Command::TrainCnn(args) => cmd_train_cnn(args, &cfg),
        Command::TrainGbt(args) => cmd_train_gbt(args, &cfg),
        Command::Compress(args) => cmd_compress(args, &cfg),
        Command::PcaFit(args) => cmd_pca_fit(args, &cfg),
        Command::Reduce(args) => cmd_reduce(args, &cfg),
        Command::Search(args) => cmd_search(args, &cfg),
        Command::Eval(args) => cmd_eval(args),
        Command::Cost(args) => cmd_cost(args),
        Command::Bench(args) => cmd_bench(args, &cfg),
        Command::Mask(args) => cmd_mask(args),
        Command::Decide(args) => cmd_decide(args, &cfg),
    }
}

/// 0 success, 2 invalid arguments, 3 data/format/io errors.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<specmask_core::Error>() {
            return match core {
                specmask_core::Error::InvalidArgument(_) => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
