//! `tdm`: dataset validation, synthetic data, training, evaluation and
//! inspection for the top-down action recognition pipeline.

mod config;

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{debug, info};

use tdm_core::features::{write_feature_table, FeatureRow};
use tdm_core::pipeline::{preprocess, train_models};
use tdm_core::synth::gen_splits;
use tdm_core::{
    parse_dataset, render_report, segment, video_features, write_dataset, ActionClass, ClassId,
    ModelBundle, TdmError, VideoSample,
};

use config::{OutTarget, RunConfig, Usage};

#[derive(Parser, Debug)]
#[command(name = "tdm", version, about = "Top-down action recognition from object and hand tracks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated feature groups: base, depth, container.
    #[arg(long, global = true, value_name = "LIST")]
    pub mask: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub trees: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub max_depth: Option<usize>,
    /// Data directory for `synth`, model directory for `train`, output
    /// file for everything else (stdout when absent).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Report format: table or csv.
    #[arg(long, global = true, value_name = "FORMAT")]
    pub format: Option<String>,
    /// Worker threads. Output does not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a dataset file and check every record.
    Validate { file: PathBuf },
    /// Write synthetic train.jsonl and eval.jsonl.
    Synth(SynthArgs),
    /// Fit phase models and one-vs-rest forests, then save the bundle.
    Train {
        /// Training set; defaults to paths.train from the config.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Predict an evaluation set with a saved bundle and report metrics.
    Evaluate {
        /// Model directory; defaults to paths.model_dir.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Evaluation set; defaults to paths.eval.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Label for the report rows; defaults to the mask.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Print phase boundaries for each video in a file.
    Segment {
        file: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Use this class's phase model instead of the predicted class's.
        #[arg(long)]
        class: Option<ClassId>,
    },
    /// Dump the feature table for the videos in a file.
    Features {
        file: PathBuf,
        /// Segment with a bundle's phase models; without it the recorded
        /// phase labels are used.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        class: Option<ClassId>,
    },
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    /// Training videos per class.
    #[arg(long, value_name = "N")]
    pub n_train: Option<usize>,
    /// Evaluation videos per class.
    #[arg(long, value_name = "N")]
    pub n_eval: Option<usize>,
    #[arg(long, value_name = "N")]
    pub n_frames: Option<usize>,
    /// Box jitter standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub depth_noise: Option<f64>,
    /// Depth separation between classes, in [0, 1].
    #[arg(long)]
    pub depth_signal: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<TdmError>(), Some(TdmError::Argument(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn init_logging() {
    let level = match std::env::var("TDM_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let target = match cli.command {
        Command::Synth(_) => OutTarget::DataDir,
        Command::Train { .. } => OutTarget::ModelDir,
        _ => OutTarget::Report,
    };
    cfg.apply_flags(&cli.global, target);
    match &cli.command {
        Command::Synth(args) => cfg.apply_synth_flags(args),
        Command::Train { train: Some(p) } => cfg.paths.train = Some(p.clone()),
        Command::Evaluate { model, eval, .. } => {
            if let Some(p) = model {
                cfg.paths.model_dir = p.clone();
            }
            if let Some(p) = eval {
                cfg.paths.eval = Some(p.clone());
            }
        }
        Command::Segment { model: Some(p), .. } | Command::Features { model: Some(p), .. } => {
            cfg.paths.model_dir = p.clone()
        }
        _ => {}
    }
    cfg.check()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }

    match cli.command {
        Command::Validate { file } => {
            echo(&cfg);
            validate(&file)
        }
        Command::Synth(_) => {
            echo(&cfg);
            synth(&cfg)
        }
        Command::Train { .. } => {
            cfg.mask.get_or_insert_with(|| tdm_core::FeatureMask::ALL.to_string());
            echo(&cfg);
            let path = existing(cfg.paths.train.as_deref(), "training set", "--train")?;
            train(&cfg, &path)
        }
        Command::Evaluate { model_id, .. } => {
            let bundle = load_bundle(&existing(Some(&cfg.paths.model_dir), "model directory", "--model")?)?;
            adopt_bundle_mask(&mut cfg, &bundle)?;
            echo(&cfg);
            let eval = existing(cfg.paths.eval.as_deref(), "evaluation set", "--eval")?;
            evaluate(&cfg, &bundle, &eval, model_id)
        }
        Command::Segment { file, class, .. } => {
            let bundle = load_bundle(&existing(Some(&cfg.paths.model_dir), "model directory", "--model")?)?;
            adopt_bundle_mask(&mut cfg, &bundle)?;
            echo(&cfg);
            segment_videos(&cfg, &file, &bundle, class)
        }
        Command::Features { file, model, class } => {
            let bundle = match model {
                Some(_) => Some(load_bundle(&cfg.paths.model_dir)?),
                None => None,
            };
            if cfg.mask.is_none() {
                let mask = bundle.as_ref().map_or(tdm_core::FeatureMask::ALL, |b| b.mask());
                cfg.mask = Some(mask.to_string());
            }
            echo(&cfg);
            features(&cfg, &file, bundle.as_ref(), class)
        }
    }
}

/// Every run records its resolved configuration on stderr.
fn echo(cfg: &RunConfig) {
    eprint!("# resolved run configuration\n{}# end\n", cfg.to_toml());
}

/// A bundle fixes the mask it was trained with; asking for another is a
/// usage error rather than a silent mismatch.
fn adopt_bundle_mask(cfg: &mut RunConfig, bundle: &ModelBundle) -> Result<(), Usage> {
    let trained = bundle.mask();
    match cfg.feature_mask()? {
        requested if cfg.mask.is_some() && requested != trained => Err(Usage(format!(
            "the model was trained with mask \"{trained}\" but \"{requested}\" was requested"
        ))),
        _ => {
            cfg.mask = Some(trained.to_string());
            Ok(())
        }
    }
}

fn existing(path: Option<&Path>, what: &str, flag: &str) -> Result<PathBuf, Usage> {
    let path = path.ok_or_else(|| Usage(format!("no {what} given; pass {flag} or set it in the config file")))?;
    if !path.exists() {
        return Err(Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(path.to_path_buf())
}

fn read_dataset(path: &Path) -> anyhow::Result<Vec<VideoSample>> {
    let path = existing(Some(path), "input file", "a path")?;
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let samples = parse_dataset(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    info!("read {} videos from {}", samples.len(), path.display());
    Ok(samples)
}

fn load_bundle(dir: &Path) -> anyhow::Result<ModelBundle> {
    let bundle = ModelBundle::load(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    info!("loaded {} class models from {}", bundle.models.len(), dir.display());
    Ok(bundle)
}

/// Writes to the configured output file, or stdout.
fn emit(cfg: &RunConfig, bytes: &[u8]) -> anyhow::Result<()> {
    match &cfg.paths.report {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
            info!("wrote {}", path.display());
        }
        None => io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn validate(file: &Path) -> anyhow::Result<()> {
    let samples = read_dataset(file)?;
    let classes: BTreeSet<ClassId> = samples.iter().filter_map(|s| s.class_id).collect();
    let labelled = samples.iter().filter(|s| s.phase_truth.is_some()).count();
    let frames: usize = samples.iter().map(|s| s.frames.len()).sum();
    let classes: Vec<String> = classes.iter().map(ToString::to_string).collect();
    println!(
        "ok: {} samples, {} frames, {} with phase labels, classes [{}]",
        samples.len(),
        frames,
        labelled,
        classes.join(", ")
    );
    Ok(())
}

fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let (train, eval) = gen_splits(cfg.synth.n_train, cfg.synth.n_eval, &cfg.scenario())?;
    let dir = &cfg.paths.data_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, samples) in [("train.jsonl", &train), ("eval.jsonl", &eval)] {
        let path = dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut sink = BufWriter::new(file);
        write_dataset(&mut sink, samples)?;
        sink.flush()?;
        info!("wrote {} videos to {}", samples.len(), path.display());
    }
    println!(
        "wrote {} training and {} evaluation videos to {}",
        train.len(),
        eval.len(),
        dir.display()
    );
    Ok(())
}

/// Classes present in the data, named when they are known.
fn classes_of(samples: &[VideoSample]) -> Vec<ActionClass> {
    let known = ActionClass::putting_classes();
    let ids: BTreeSet<ClassId> = samples.iter().filter_map(|s| s.class_id).collect();
    ids.into_iter()
        .map(|id| {
            known
                .iter()
                .find(|c| c.id == id)
                .cloned()
                .unwrap_or_else(|| ActionClass::new(id, format!("class {id}")))
        })
        .collect()
}

fn train(cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    let samples = read_dataset(path)?;
    let classes = classes_of(&samples);
    if classes.is_empty() {
        return Err(TdmError::Training("training set has no class labels".into()).into());
    }
    debug!("training {} classes on {} videos", classes.len(), samples.len());
    let bundle = train_models(&samples, &classes, &cfg.pipeline()?)?;
    let dir = &cfg.paths.model_dir;
    bundle.save(dir).with_context(|| format!("saving model to {}", dir.display()))?;
    println!(
        "trained {} class models on {} videos into {}",
        bundle.models.len(),
        samples.len(),
        dir.display()
    );
    Ok(())
}

fn evaluate(cfg: &RunConfig, bundle: &ModelBundle, eval: &Path, model_id: Option<String>) -> anyhow::Result<()> {
    let samples = read_dataset(eval)?;
    let model_id = model_id.unwrap_or_else(|| bundle.mask().to_string());
    let report = bundle.evaluate(&samples, &model_id)?;
    emit(cfg, render_report(&report, cfg.report_format()?).as_bytes())
}

/// Picks the forced class, or the class the bundle predicts.
fn chosen_class(bundle: &ModelBundle, sample: &VideoSample, forced: Option<ClassId>) -> anyhow::Result<ClassId> {
    match forced {
        Some(c) if bundle.models.contains_key(&c) => Ok(c),
        Some(c) => Err(Usage(format!("the model has no class {c}")).into()),
        None => Ok(bundle.predict(sample)?),
    }
}

fn segment_videos(cfg: &RunConfig, file: &Path, bundle: &ModelBundle, class: Option<ClassId>) -> anyhow::Result<()> {
    let samples = read_dataset(file)?;
    let mut out = String::new();
    for s in &samples {
        let c = chosen_class(bundle, s, class)?;
        let seg = segment(&bundle.models[&c].phase_model, &preprocess(s, bundle.max_gap))?;
        out.push_str(&format!("{}\t{}\t{}\n", s.video_id, c, seg));
    }
    emit(cfg, out.as_bytes())
}

fn features(cfg: &RunConfig, file: &Path, bundle: Option<&ModelBundle>, class: Option<ClassId>) -> anyhow::Result<()> {
    let samples = read_dataset(file)?;
    let max_gap = bundle.map_or(cfg.max_gap, |b| b.max_gap);
    let mask = cfg.feature_mask()?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let prepared = preprocess(s, max_gap);
        let seg = match bundle {
            Some(b) => segment(&b.models[&chosen_class(b, s, class)?].phase_model, &prepared)?,
            None => s.phase_truth.clone().ok_or_else(|| {
                TdmError::validation(&s.video_id, "phases", "no phase labels; pass --model to segment")
            })?,
        };
        rows.push(FeatureRow {
            video_id: s.video_id.clone(),
            class_id: s.class_id,
            features: video_features(&prepared, &seg, mask, cfg.carry())?,
        });
    }
    let mut buf = Vec::new();
    write_feature_table(&mut buf, &rows)?;
    emit(cfg, &buf)
}
