//! Command-line front end: dataset tooling, the two training stages,
//! inference, evaluation and report rendering behind one binary.
//!
//! Every run that produces artifacts records its resolved configuration as
//! `resolved-config.json` in the output directory. Exit codes: 0 success,
//! 1 domain error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{build_splits, load_dataset, DatasetManifest, GenConfig};
use crate::decoder::{GenerationConfig, GenerationMode};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, judge_scores, parse_report_csv, rubric_scores, record_tags, tag_metrics,
    Cell, JudgeConfig, Report, ReportRow, RubricScore,
};
use crate::plot::{plot_loss_curve, plot_metric_bars};
use crate::trainer::{
    load_checkpoint, run_inference, train_caption_stage, train_hoi_stage, AblationFlags,
    InferenceRecord, ModelConfig, Stage, TrainConfig,
};

#[derive(Parser)]
#[command(name = "hoi2threat", version, about = "HOI-tag-guided threat description pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or validate synthetic dataset splits.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Run one training stage.
    Train {
        #[command(subcommand)]
        command: TrainCommand,
    },
    /// Caption a split with a trained checkpoint.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Render a comparison table from a metrics CSV.
    Report(ReportArgs),
    /// Train the full model plus both ablations and compare them.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate scenes, annotations and aligned captions.
    Build(DatasetBuildArgs),
    /// Check a manifest file and its images.
    Validate(DatasetValidateArgs),
}

#[derive(Args)]
struct DatasetBuildArgs {
    /// Output directory for manifests and images.
    #[arg(long)]
    out: PathBuf,
    /// Number of training scenes.
    #[arg(long)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square scene size in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 1)]
    min_entities: usize,
    #[arg(long, default_value_t = 5)]
    max_entities: usize,
    /// Probability that a scene contains a threatening action.
    #[arg(long, default_value_t = 0.4)]
    threat_ratio: f64,
}

#[derive(Args)]
struct DatasetValidateArgs {
    /// Manifest file to check.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Stage 1: the interaction encoder.
    Hoi(TrainArgs),
    /// Stage 2: fusion and caption head on a frozen encoder.
    Caption(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (uses train.jsonl inside) or a manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, logs and plots.
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint to start from; required for `train caption`.
    #[arg(long)]
    hoi_ckpt: Option<PathBuf>,
    /// JSON file mirroring the training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON file with the model architecture; defaults to the dataset resolution.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_hoi: Option<f64>,
    #[arg(long)]
    lr_caption: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop tag guidance (ablation).
    #[arg(long)]
    without_hoi_tag: bool,
    /// Drop position embeddings in fusion (ablation).
    #[arg(long)]
    without_pos: bool,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Unfreeze the whole decoder during the caption stage.
    #[arg(long)]
    train_full_decoder: bool,
}

#[derive(Args)]
struct GenerationArgs {
    #[arg(long, value_parser = ["greedy", "beam"], default_value = "greedy")]
    mode: String,
    #[arg(long, default_value_t = 1)]
    beam_width: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    length_penalty: f64,
}

impl GenerationArgs {
    fn to_config(&self) -> GenerationConfig {
        GenerationConfig {
            mode: if self.mode == "beam" { GenerationMode::Beam } else { GenerationMode::Greedy },
            beam_width: self.beam_width,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    /// Dataset directory (uses test.jsonl inside) or a manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint (usually caption.ckpt).
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for predictions.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    gen: GenerationArgs,
    #[arg(long, default_value_t = 0.5)]
    act_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    ent_threshold: f64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Multi-label tag metrics between two tag files.
    Tags(EvalPairArgs),
    /// Deterministic rubric proxies for generated captions.
    Rubric(EvalPairArgs),
    /// Remote judge scores (JUDGE_ENDPOINT, JUDGE_API_KEY, JUDGE_MODEL_ID).
    Judge(EvalJudgeArgs),
}

#[derive(Args)]
struct EvalPairArgs {
    /// Predictions: inference output, or a dataset manifest for tag lists.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth dataset manifest.
    #[arg(long)]
    truth: PathBuf,
    /// Optional directory for report artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label in the rendered report.
    #[arg(long, default_value = "ours")]
    model_name: String,
    #[arg(long, default_value = "synthetic")]
    dataset_name: String,
}

#[derive(Args)]
struct EvalJudgeArgs {
    #[command(flatten)]
    pair: EvalPairArgs,
    /// Identity of the caption generator; must differ from the judge model.
    #[arg(long, default_value = "hoi2threat")]
    generator_id: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV with a dataset,model,<metric...> header.
    #[arg(long)]
    input: PathBuf,
    /// Optional directory for report.txt, report.csv and bar chart.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory holding train.jsonl and test.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; one subdirectory per variant.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_hoi: Option<f64>,
    #[arg(long)]
    lr_caption: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    gen: GenerationArgs,
    #[arg(long, default_value_t = 0.5)]
    act_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    ent_threshold: f64,
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Same as [`run`] over explicit arguments, for tests.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Dataset { command: DatasetCommand::Build(args) } => dataset_build(args),
        Command::Dataset { command: DatasetCommand::Validate(args) } => dataset_validate(args),
        Command::Train { command: TrainCommand::Hoi(args) } => train(args, Stage::Hoi),
        Command::Train { command: TrainCommand::Caption(args) } => train(args, Stage::Caption),
        Command::Infer(args) => infer(args),
        Command::Eval { command: EvalCommand::Tags(args) } => eval_tags(args),
        Command::Eval { command: EvalCommand::Rubric(args) } => eval_rubric(args),
        Command::Eval { command: EvalCommand::Judge(args) } => eval_judge(args),
        Command::Report(args) => report(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn dataset_build(args: DatasetBuildArgs) -> Result<()> {
    let gen = GenConfig {
        resolution: args.resolution,
        entity_range: (args.min_entities, args.max_entities),
        threat_ratio: args.threat_ratio,
        ..GenConfig::default()
    };
    let splits = build_splits((args.train, args.val, args.test), args.seed, &gen)?;
    fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    for manifest in &splits {
        if manifest.records.is_empty() {
            continue;
        }
        let path = args.out.join(format!("{}.jsonl", manifest.split));
        crate::data::serialize_dataset(manifest, &path)?;
        written.push(format!("{} {}", manifest.records.len(), manifest.split));
    }
    record_config(
        &args.out,
        "dataset build",
        &serde_json::json!({
            "seed": args.seed,
            "counts": {"train": args.train, "val": args.val, "test": args.test},
            "gen": gen,
        }),
    )?;
    println!("wrote {} records under {}", written.join(" / "), args.out.display());
    Ok(())
}

fn dataset_validate(args: DatasetValidateArgs) -> Result<()> {
    let manifest = load_dataset(&args.data)?;
    for record in &manifest.records {
        let caption = crate::data::align_caption(&record.pair)?;
        let violations = crate::data::validate_alignment(&record.pair, &record.caption);
        if let Some(v) = violations.first() {
            return Err(Error::invariant(format!(
                "record {}: caption misaligned: {v:?}",
                record.pair.image_id
            )));
        }
        if caption.text != record.caption.text {
            return Err(Error::invariant(format!(
                "record {}: caption differs from the aligned reference",
                record.pair.image_id
            )));
        }
    }
    println!("ok: {} records in {}", manifest.records.len(), args.data.display());
    Ok(())
}

fn resolve_manifest_path(data: &Path, default_name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(default_name)
    } else {
        data.to_path_buf()
    }
}

fn resolve_train_config(args: &TrainArgs, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str::<TrainConfig>(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr_hoi {
        cfg.lr_hoi = v;
    }
    if let Some(v) = args.lr_caption {
        cfg.lr_caption = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.beta1 {
        cfg.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        cfg.beta2 = v;
    }
    if let Some(v) = args.eps {
        cfg.eps = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.grad_clip {
        cfg.grad_clip = v;
    }
    cfg.ablations.without_hoi_tag |= args.without_hoi_tag;
    cfg.ablations.without_pos |= args.without_pos;
    cfg.train_full_decoder |= args.train_full_decoder;
    Ok(cfg)
}

fn resolve_model_config(
    path: &Option<PathBuf>,
    manifest: &DatasetManifest,
) -> Result<ModelConfig> {
    let model = match path {
        Some(p) => serde_json::from_str::<ModelConfig>(&fs::read_to_string(p)?)?,
        None => {
            let record = manifest.records.first().ok_or_else(|| {
                Error::config("cannot infer the model size from an empty split")
            })?;
            let gen =
                GenConfig { resolution: record.image.resolution, ..GenConfig::default() };
            ModelConfig::for_resolution(&gen)
        }
    };
    model.validate()?;
    Ok(model)
}

fn train(args: TrainArgs, stage: Stage) -> Result<()> {
    let cfg = resolve_train_config(&args, stage)?;
    let manifest = load_dataset(&resolve_manifest_path(&args.data, "train.jsonl"))?;
    fs::create_dir_all(&args.out)?;
    let log = match stage {
        Stage::Hoi => {
            let model = resolve_model_config(&args.model_config, &manifest)?;
            record_config(
                &args.out,
                "train hoi",
                &serde_json::json!({"train": cfg, "model": model}),
            )?;
            let (_, log) = train_hoi_stage(&manifest, &model, &cfg, &args.out)?;
            log
        }
        Stage::Caption => {
            let hoi_path = args
                .hoi_ckpt
                .as_ref()
                .ok_or_else(|| Error::config("train caption needs --hoi-ckpt"))?;
            let ckpt = load_checkpoint(hoi_path)?;
            record_config(
                &args.out,
                "train caption",
                &serde_json::json!({"train": cfg, "model": ckpt.config, "hoi_ckpt": hoi_path}),
            )?;
            let (_, log) = train_caption_stage(&manifest, ckpt, &cfg, &args.out)?;
            log
        }
    };
    plot_loss_curve(&log, &args.out)?;
    let last = log.rows().last().expect("training always logs at least one step");
    println!(
        "{} stage done: {} steps, final loss {:.6}, artifacts in {}",
        stage.name(),
        log.rows().len(),
        last.loss_total,
        args.out.display()
    );
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let manifest = load_dataset(&resolve_manifest_path(&args.data, "test.jsonl"))?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let gen = args.gen.to_config();
    fs::create_dir_all(&args.out)?;
    record_config(
        &args.out,
        "infer",
        &serde_json::json!({
            "ckpt": args.ckpt,
            "generation": gen,
            "act_threshold": args.act_threshold,
            "ent_threshold": args.ent_threshold,
        }),
    )?;
    let out_path = args.out.join("predictions.jsonl");
    let records =
        run_inference(&manifest, &ckpt, &gen, args.act_threshold, args.ent_threshold, &out_path)?;
    println!("wrote {} predictions to {}", records.len(), out_path.display());
    Ok(())
}

/// Per-sample ranked tag lists keyed by image id, from either an inference
/// output or a dataset manifest.
fn read_tag_samples(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    if sniff_dataset_file(path)? {
        let manifest = load_dataset(path)?;
        Ok(manifest
            .records
            .iter()
            .map(|r| {
                (
                    r.pair.image_id.clone(),
                    record_tags(&r.pair, &manifest.vocab_entities, &manifest.vocab_actions),
                )
            })
            .collect())
    } else {
        load_predictions(path)?
            .into_iter()
            .map(|rec| {
                let tags = rec
                    .tags
                    .iter()
                    .map(|t| crate::eval::space_tag_to_canonical(t))
                    .collect::<Result<Vec<_>>>()?;
                Ok((rec.image_id, tags))
            })
            .collect()
    }
}

fn sniff_dataset_file(path: &Path) -> Result<bool> {
    let body = fs::read_to_string(path)?;
    let first = body
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::config(format!("{} is empty", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(first)
        .map_err(|e| Error::schema(1, format!("{}: {e}", path.display())))?;
    Ok(value.get("schema").is_some())
}

fn load_predictions(path: &Path) -> Result<Vec<InferenceRecord>> {
    let body = fs::read_to_string(path)?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| Error::schema(idx + 1, e.to_string()))
        })
        .collect()
}

/// Zips prediction samples with truth samples by image id, in prediction
/// order; both files must cover exactly the same ids.
fn pair_by_image_id<T>(
    preds: Vec<(String, T)>,
    mut truth: BTreeMap<String, T>,
) -> Result<Vec<(T, T)>> {
    let mut out = Vec::with_capacity(preds.len());
    for (id, p) in preds {
        let t = truth
            .remove(&id)
            .ok_or_else(|| Error::config(format!("prediction {id:?} has no ground truth")))?;
        out.push((p, t));
    }
    if let Some(id) = truth.keys().next() {
        return Err(Error::config(format!("ground truth {id:?} has no prediction")));
    }
    Ok(out)
}

fn eval_tags(args: EvalPairArgs) -> Result<()> {
    let preds = read_tag_samples(&args.pred)?;
    let truth: BTreeMap<String, Vec<String>> = read_tag_samples(&args.truth)?.into_iter().collect();
    let pairs = pair_by_image_id(preds, truth)?;
    let (pred_lists, truth_lists): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let m = tag_metrics(&pred_lists, &truth_lists)?;

    let columns =
        ["P/R/F1", "Jaccard", "Top-1", "Top-3", "Top-5"].map(String::from).to_vec();
    let rows = vec![ReportRow {
        dataset: args.dataset_name.clone(),
        model: args.model_name.clone(),
        cells: vec![
            Cell::Trio(m.precision, m.recall, m.f1),
            Cell::Scalar(m.jaccard),
            Cell::Scalar(m.top_k[&1]),
            Cell::Scalar(m.top_k[&3]),
            Cell::Scalar(m.top_k[&5]),
        ],
    }];
    let report = build_report(&columns, rows)?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        write_report_artifacts(out, "tags-report", &report)?;
        record_config(
            out,
            "eval tags",
            &serde_json::json!({"pred": args.pred, "truth": args.truth, "n_samples": m.n_samples}),
        )?;
    }
    Ok(())
}

/// Averaged rubric proxies over (prediction, record) pairs in file order.
fn rubric_average(
    preds: &[InferenceRecord],
    manifest: &DatasetManifest,
) -> Result<(RubricScore, Vec<(String, RubricScore)>)> {
    if preds.is_empty() {
        return Err(Error::config("no predictions to score"));
    }
    let by_id: BTreeMap<&str, &crate::data::DatasetRecord> =
        manifest.records.iter().map(|r| (r.pair.image_id.as_str(), r)).collect();
    let threat_ids = manifest.threat_action_ids();
    let mut rows = Vec::with_capacity(preds.len());
    let mut sum = RubricScore { coi_proxy: 0.0, bma_proxy: 0.0, tdo_proxy: 0.0 };
    for pred in preds {
        let record = by_id.get(pred.image_id.as_str()).ok_or_else(|| {
            Error::config(format!("prediction {:?} has no ground truth", pred.image_id))
        })?;
        let score = rubric_scores(
            &pred.caption,
            &record.pair,
            &manifest.vocab_entities,
            &manifest.vocab_actions,
            &threat_ids,
        );
        sum.coi_proxy += score.coi_proxy;
        sum.bma_proxy += score.bma_proxy;
        sum.tdo_proxy += score.tdo_proxy;
        rows.push((pred.image_id.clone(), score));
    }
    let n = preds.len() as f64;
    let avg = RubricScore {
        coi_proxy: sum.coi_proxy / n,
        bma_proxy: sum.bma_proxy / n,
        tdo_proxy: sum.tdo_proxy / n,
    };
    Ok((avg, rows))
}

fn rubric_report(dataset: &str, rows: Vec<(String, RubricScore)>) -> Result<Report> {
    let columns = ["coi_proxy", "bma_proxy", "tdo_proxy"].map(String::from).to_vec();
    let report_rows = rows
        .into_iter()
        .map(|(model, s)| ReportRow {
            dataset: dataset.to_string(),
            model,
            cells: vec![
                Cell::Scalar(s.coi_proxy),
                Cell::Scalar(s.bma_proxy),
                Cell::Scalar(s.tdo_proxy),
            ],
        })
        .collect();
    build_report(&columns, report_rows)
}

fn eval_rubric(args: EvalPairArgs) -> Result<()> {
    let preds = load_predictions(&args.pred)?;
    let manifest = load_dataset(&args.truth)?;
    let (avg, per_record) = rubric_average(&preds, &manifest)?;
    let report = rubric_report(&args.dataset_name, vec![(args.model_name.clone(), avg)])?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        write_report_artifacts(out, "rubric-report", &report)?;
        let mut body = String::new();
        for (id, s) in &per_record {
            body.push_str(&serde_json::to_string(&serde_json::json!({
                "image_id": id,
                "coi_proxy": s.coi_proxy,
                "bma_proxy": s.bma_proxy,
                "tdo_proxy": s.tdo_proxy,
            }))?);
            body.push('\n');
        }
        fs::write(out.join("rubric-scores.jsonl"), body)?;
        record_config(
            out,
            "eval rubric",
            &serde_json::json!({"pred": args.pred, "truth": args.truth, "n_samples": per_record.len()}),
        )?;
    }
    Ok(())
}

fn eval_judge(args: EvalJudgeArgs) -> Result<()> {
    let preds = load_predictions(&args.pair.pred)?;
    let manifest = load_dataset(&args.pair.truth)?;
    let by_id: BTreeMap<&str, &crate::data::DatasetRecord> =
        manifest.records.iter().map(|r| (r.pair.image_id.as_str(), r)).collect();
    let mut items = Vec::with_capacity(preds.len());
    for pred in &preds {
        let record = by_id.get(pred.image_id.as_str()).ok_or_else(|| {
            Error::config(format!("prediction {:?} has no ground truth", pred.image_id))
        })?;
        items.push((record.caption.text.clone(), pred.caption.clone()));
    }
    let cfg = JudgeConfig::from_env(&args.generator_id)?;
    let scores = judge_scores(&items, &cfg)?;

    let n = scores.len() as f64;
    let (coi, bma, tdo) = scores.iter().fold((0.0, 0.0, 0.0), |(a, b, c), s| {
        (a + s.coi / n, b + s.bma / n, c + s.tdo / n)
    });
    let columns = ["CoI", "BMA", "TDO"].map(String::from).to_vec();
    let report = build_report(
        &columns,
        vec![ReportRow {
            dataset: args.pair.dataset_name.clone(),
            model: args.pair.model_name.clone(),
            cells: vec![Cell::Scalar(coi), Cell::Scalar(bma), Cell::Scalar(tdo)],
        }],
    )?;
    print!("{}", report.to_text());
    if let Some(out) = &args.pair.out {
        write_report_artifacts(out, "judge-report", &report)?;
        let mut body = String::new();
        for (pred, score) in preds.iter().zip(&scores) {
            body.push_str(&serde_json::to_string(&serde_json::json!({
                "image_id": pred.image_id,
                "coi": score.coi,
                "bma": score.bma,
                "tdo": score.tdo,
                "judge_id": score.judge_id,
                "raw_response": score.raw_response,
            }))?);
            body.push('\n');
        }
        fs::write(out.join("judge-scores.jsonl"), body)?;
        record_config(
            out,
            "eval judge",
            &serde_json::json!({
                "pred": args.pair.pred,
                "truth": args.pair.truth,
                "judge_id": cfg.model_id,
                "generator_id": args.generator_id,
            }),
        )?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let report = parse_report_csv(&fs::read_to_string(&args.input)?)?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        write_report_artifacts(out, "report", &report)?;
        record_config(out, "report", &serde_json::json!({"input": args.input}))?;
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    if !args.data.is_dir() {
        return Err(Error::config(format!(
            "{} must be a dataset directory with train.jsonl and test.jsonl",
            args.data.display()
        )));
    }
    let train_m = load_dataset(&args.data.join("train.jsonl"))?;
    let test_m = load_dataset(&args.data.join("test.jsonl"))?;
    let model = resolve_model_config(&args.model_config, &train_m)?;
    let gen = args.gen.to_config();

    let mut base = match &args.config {
        Some(path) => serde_json::from_str::<TrainConfig>(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.epochs {
        base.epochs = v;
    }
    if let Some(v) = args.lr_hoi {
        base.lr_hoi = v;
    }
    if let Some(v) = args.lr_caption {
        base.lr_caption = v;
    }
    if let Some(v) = args.batch_size {
        base.batch_size = v;
    }
    if let Some(v) = args.seed {
        base.seed = v;
    }
    base.ablations = AblationFlags::default();

    fs::create_dir_all(&args.out)?;
    record_config(
        &args.out,
        "ablate",
        &serde_json::json!({
            "train": base,
            "model": model,
            "generation": gen,
            "act_threshold": args.act_threshold,
            "ent_threshold": args.ent_threshold,
        }),
    )?;

    let full_dir = args.out.join("full");
    fs::create_dir_all(&full_dir)?;
    let mut hoi_cfg = base.clone();
    hoi_cfg.stage = Stage::Hoi;
    println!("training shared interaction encoder...");
    let (hoi_ckpt, hoi_log) = train_hoi_stage(&train_m, &model, &hoi_cfg, &full_dir)?;
    plot_loss_curve(&hoi_log, &full_dir)?;

    let variants: [(&str, AblationFlags); 3] = [
        ("without_hoi_tag", AblationFlags { without_hoi_tag: true, without_pos: false }),
        ("without_pos", AblationFlags { without_hoi_tag: false, without_pos: true }),
        ("full", AblationFlags::default()),
    ];
    let mut rows = Vec::new();
    for (name, flags) in variants {
        let dir = args.out.join(name);
        fs::create_dir_all(&dir)?;
        let mut cfg = base.clone();
        cfg.stage = Stage::Caption;
        cfg.ablations = flags;
        println!("training caption stage for {name}...");
        let (ckpt, log) = train_caption_stage(&train_m, hoi_ckpt.clone(), &cfg, &dir)?;
        plot_loss_curve(&log, &dir)?;
        let preds = run_inference(
            &test_m,
            &ckpt,
            &gen,
            args.act_threshold,
            args.ent_threshold,
            &dir.join("predictions.jsonl"),
        )?;
        let (avg, _) = rubric_average(&preds, &test_m)?;
        rows.push((name.to_string(), avg));
    }

    let report = rubric_report("synthetic-test", rows)?;
    print!("{}", report.to_text());
    write_report_artifacts(&args.out, "ablation-report", &report)?;
    Ok(())
}

fn write_report_artifacts(out: &Path, stem: &str, report: &Report) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{stem}.txt")), report.to_text())?;
    fs::write(out.join(format!("{stem}.csv")), report.to_csv())?;
    plot_metric_bars(report, out)?;
    Ok(())
}

fn record_config(out: &Path, command: &str, config: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(out)?;
    let doc = serde_json::json!({"command": command, "config": config});
    fs::write(out.join("resolved-config.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::fusion::FusionConfig;

    fn run_cli(args: &[&str]) -> i32 {
        run_from(std::iter::once("hoi2threat").chain(args.iter().copied()))
    }

    fn tiny_model_json(dir: &Path) -> PathBuf {
        let model = ModelConfig {
            encoder: EncoderConfig {
                resolution: 48,
                d: 16,
                entity_queries: 4,
                interaction_queries: 4,
                ..EncoderConfig::default()
            },
            fusion: FusionConfig { d_visual: 16, d_f: 16, ..FusionConfig::default() },
            decoder: DecoderConfig { d_f: 16, ..DecoderConfig::default() },
            without_hoi_tag: false,
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string(&model).unwrap()).unwrap();
        path
    }

    fn build_dataset(dir: &Path) {
        let code = run_cli(&[
            "dataset",
            "build",
            "--out",
            dir.to_str().unwrap(),
            "--train",
            "3",
            "--test",
            "2",
            "--seed",
            "11",
            "--resolution",
            "48",
            "--max-entities",
            "3",
        ]);
        assert_eq!(code, 0);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_cli(&["train"]), 2);
        assert_eq!(run_cli(&["--no-such-flag"]), 2);
        assert_eq!(run_cli(&["dataset", "build", "--train", "not-a-number"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run_cli(&["--help"]), 0);
        assert_eq!(run_cli(&["eval", "--help"]), 0);
    }

    #[test]
    fn domain_errors_exit_1() {
        assert_eq!(run_cli(&["dataset", "validate", "--data", "/no/such/file.jsonl"]), 1);
        assert_eq!(run_cli(&["report", "--input", "/no/such/metrics.csv"]), 1);
    }

    #[test]
    fn dataset_build_validate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path());
        assert!(dir.path().join("resolved-config.json").exists());
        assert!(dir.path().join("train.jsonl").exists());
        assert!(!dir.path().join("val.jsonl").exists());
        for split in ["train", "test"] {
            let path = dir.path().join(format!("{split}.jsonl"));
            let code = run_cli(&["dataset", "validate", "--data", path.to_str().unwrap()]);
            assert_eq!(code, 0, "{split} failed validation");
        }
    }

    #[test]
    fn eval_tags_on_identical_files_is_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path());
        let data = dir.path().join("train.jsonl");
        let out = dir.path().join("tags");
        let code = run_cli(&[
            "eval",
            "tags",
            "--pred",
            data.to_str().unwrap(),
            "--truth",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(out.join("tags-report.csv")).unwrap();
        assert!(csv.contains("1.00/1.00/1.00,1.00,1.00,1.00,1.00"), "{csv}");
        assert!(out.join("metric-bars.png").exists());
    }

    #[test]
    fn report_command_renders_committed_fixtures() {
        let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report");
        let code = run_cli(&[
            "report",
            "--input",
            fixtures.join("table1_judged.csv").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let text = fs::read_to_string(out.join("report.txt")).unwrap();
        assert!(text.contains("5.68 5.43 4.78"), "{text}");
        assert_eq!(run_cli(&["report", "--input", fixtures.join("table2_tags.csv").to_str().unwrap()]), 0);
    }

    #[test]
    fn train_infer_eval_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path());
        let model = tiny_model_json(dir.path());
        let data = dir.path().to_str().unwrap().to_string();

        let hoi_out = dir.path().join("hoi-run");
        let code = run_cli(&[
            "train", "hoi",
            "--data", &data,
            "--out", hoi_out.to_str().unwrap(),
            "--model-config", model.to_str().unwrap(),
            "--epochs", "1",
            "--batch-size", "2",
            "--lr-hoi", "1e-4",
            "--seed", "7",
        ]);
        assert_eq!(code, 0);
        for artifact in ["hoi.ckpt", "train-hoi.csv", "loss-hoi.png", "resolved-config.json"] {
            assert!(hoi_out.join(artifact).exists(), "missing {artifact}");
        }

        let cap_out = dir.path().join("caption-run");
        let code = run_cli(&[
            "train", "caption",
            "--data", &data,
            "--out", cap_out.to_str().unwrap(),
            "--hoi-ckpt", hoi_out.join("hoi.ckpt").to_str().unwrap(),
            "--epochs", "1",
            "--batch-size", "2",
            "--seed", "7",
        ]);
        assert_eq!(code, 0);
        assert!(cap_out.join("caption.ckpt").exists());

        let infer_out = dir.path().join("preds");
        let code = run_cli(&[
            "infer",
            "--data", &data,
            "--ckpt", cap_out.join("caption.ckpt").to_str().unwrap(),
            "--out", infer_out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let preds = infer_out.join("predictions.jsonl");
        assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 2);

        let rubric_out = dir.path().join("rubric");
        let code = run_cli(&[
            "eval", "rubric",
            "--pred", preds.to_str().unwrap(),
            "--truth", dir.path().join("test.jsonl").to_str().unwrap(),
            "--out", rubric_out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(rubric_out.join("rubric-report.csv").exists());
        assert!(rubric_out.join("rubric-scores.jsonl").exists());

        let tags_code = run_cli(&[
            "eval", "tags",
            "--pred", preds.to_str().unwrap(),
            "--truth", dir.path().join("test.jsonl").to_str().unwrap(),
        ]);
        assert_eq!(tags_code, 0);
    }

    #[test]
    fn missing_hoi_ckpt_for_caption_stage_is_a_domain_error() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path());
        let code = run_cli(&[
            "train", "caption",
            "--data", dir.path().to_str().unwrap(),
            "--out", dir.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }
}
