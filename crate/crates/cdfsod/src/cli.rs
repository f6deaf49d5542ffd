//! Argument parsing and the seven subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use cdfsod_core::detops::{self, EnsembleConfig};
use cdfsod_core::domainstats::{self, ChannelStats, MmdConfig};
use cdfsod_core::episodes::{sample_episode, Episode};
use cdfsod_core::eval::{self, EvalSummary, Evaluator, MatchConfig, ScoreReport, Shot, TestSet};
use cdfsod_core::linalg::{self, Matrix};
use cdfsod_core::protofusion::{self, FeatureCache, FusionWeights, RefineProjections};
use cdfsod_core::selftrain::{
    self, IterationTrace, LoopMode, PrototypeScorer, PseudoLabelConfig, ReplayScorer,
};
use cdfsod_core::{Detection, EmbeddingKind, EmbeddingTable, LoadWarning};

use crate::io;
use crate::report::Report;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "CDFSOD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cdfsod", version, about = "Evaluation and fusion harness for cross-domain few-shot detection")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the JSON output here instead of stdout.
    #[arg(short = 'o', long, global = true)]
    output: Option<PathBuf>,
    /// Print more detail to stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Worker threads (default: $CDFSOD_THREADS, else one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// COCO-style mAP of detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Challenge score from nine per-dataset, per-shot mAPs.
    Score(ScoreArgs),
    /// Draw K-shot support sets and the matching query images.
    SampleEpisodes(EpisodeArgs),
    /// Reweight, pool and suppress detections from several models.
    Ensemble(EnsembleArgs),
    /// Classify query embeddings against support prototypes.
    Fuse(FuseArgs),
    /// Domain-gap statistics between two embedding sets.
    DomainStats(DomainArgs),
    /// Confidence-thresholded pseudo-label refinement.
    Selftrain(SelftrainArgs),
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    /// Use IoU 0.5 only instead of 0.50:0.95.
    #[arg(long)]
    ap50_only: bool,
    /// Label the result with a column key such as D1_5shot.
    #[arg(long)]
    slot: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    /// JSON object with the keys D1_1shot ... D3_10shot.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EpisodeArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    shots: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
struct EnsembleArgs {
    /// Reliability weight per model, e.g. a=1.0,b=0.7.
    #[arg(long, value_parser = parse_weight_list)]
    weights: WeightList,
    #[arg(long, default_value_t = detops::DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    #[arg(long, default_value_t = detops::DEFAULT_SCORE_FLOOR)]
    floor: f64,
    /// Detection files as `[name=]path`; unnamed files take the weight names in order.
    #[arg(required = true)]
    inputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FuseMethod {
    Proto,
    Ifc,
    Nearest,
    Tempered,
}

#[derive(Debug, Args, Serialize)]
struct FuseArgs {
    /// Support embeddings (JSON lines with class_id).
    #[arg(long)]
    support: PathBuf,
    /// Query embeddings (JSON lines).
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum, default_value_t = FuseMethod::Proto)]
    method: FuseMethod,
    /// Source weights local=,global=,text=,det=,aux=; unnamed sources keep their defaults.
    #[arg(long, value_parser = parse_weight_list)]
    weights: Option<WeightList>,
    #[arg(long, default_value_t = protofusion::DEFAULT_PROTO_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = protofusion::DEFAULT_TAU)]
    tau: f64,
    /// Turn each prototype source into a distribution before fusing.
    #[arg(long)]
    softmax: bool,
    /// L2-normalize support and query vectors on load.
    #[arg(long)]
    normalize: bool,
    /// Per-query detector scores `{query_id: [score per class]}` for the det source.
    #[arg(long)]
    det_scores: Option<PathBuf>,
    /// Per-query scores for the auxiliary source, same shape as --det-scores.
    #[arg(long)]
    aux_scores: Option<PathBuf>,
    /// Refine tempered prototypes with projection matrices from a file, or `identity`.
    #[arg(long)]
    refine: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Debug, Args, Serialize)]
struct DomainArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = domainstats::DEFAULT_BANDWIDTHS)]
    bandwidths: Vec<f64>,
    #[arg(long)]
    normalize: bool,
    /// Detection loss to fold into the combined objective.
    #[arg(long)]
    det_loss: Option<f64>,
    /// Training iteration at which to report the warm-up strength.
    #[arg(long, default_value_t = 0)]
    iteration: u64,
    #[arg(long, default_value_t = domainstats::DEFAULT_WARMUP)]
    warmup: u64,
}

#[derive(Debug, Args, Serialize)]
struct SelftrainArgs {
    #[arg(long)]
    gt: PathBuf,
    /// `replay:<glob>` (one file per iteration) or `proto:<supports.jsonl>:<proposals.json>`.
    #[arg(long)]
    scorer: String,
    #[arg(long = "lambda", default_value_t = 0.6)]
    lambda_conf: f64,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 0.5)]
    dedup_iou: f64,
    /// Restart the scorer for every image instead of carrying it across images.
    #[arg(long)]
    reset_per_image: bool,
    #[arg(long, default_value_t = protofusion::DEFAULT_TAU)]
    tau: f64,
    /// Write the per-iteration trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct WeightList(Vec<(String, f64)>);

fn parse_weight_list(s: &str) -> std::result::Result<WeightList, String> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| format!("`{part}` is not name=value"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| format!("`{value}` is not a number"))?;
        let name = name.trim().to_owned();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(format!("`{name}` given twice"));
        }
        out.push((name, value));
    }
    if out.is_empty() {
        return Err("no weights given".into());
    }
    Ok(WeightList(out))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Score(a) => score(cli, a),
        Command::SampleEpisodes(a) => sample_episodes(cli, a),
        Command::Ensemble(a) => ensemble(cli, a),
        Command::Fuse(a) => fuse(cli, a),
        Command::DomainStats(a) => domain_stats(cli, a),
        Command::Selftrain(a) => selftrain(cli, a),
    }
}

/// Subcommand flags plus the global flags that can affect results.
fn resolved_config(cli: &Cli, args: &impl Serialize) -> Value {
    let mut cfg = serde_json::to_value(args).expect("flags serialize");
    if let Value::Object(map) = &mut cfg {
        map.insert("seed".into(), json!(cli.seed));
        map.insert("output".into(), json!(cli.output));
    }
    cfg
}

fn emit<R: Serialize>(path: Option<&Path>, report: &Report<R>) -> Result<()> {
    write_json(path, report)
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = io::to_json_string(value);
    match path {
        Some(p) => io::write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn warnings_to_strings(ws: &[LoadWarning], verbose: u8) -> Vec<String> {
    let out: Vec<String> = ws.iter().map(ToString::to_string).collect();
    if verbose > 0 {
        for w in &out {
            eprintln!("warning: {w}");
        }
    } else if !out.is_empty() {
        eprintln!("warning: {} boxes clamped to their image (-v to list)", out.len());
    }
    out
}

#[derive(Debug, Serialize)]
struct EvaluateResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    slot: Option<String>,
    #[serde(flatten)]
    summary: EvalSummary,
}

fn check_slot(slot: &str) -> Result<()> {
    let known: Vec<String> = TestSet::ALL
        .iter()
        .flat_map(|&s| Shot::ALL.iter().map(move |&k| eval::slot_key(s, k)))
        .collect();
    if known.iter().any(|k| k == slot) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "unknown slot `{slot}` (expected one of {})",
            known.join(", ")
        )))
    }
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    if let Some(slot) = &a.slot {
        check_slot(slot)?;
    }
    let (ds, warns) = io::load_dataset(&a.gt)?;
    let warnings = warnings_to_strings(&warns, cli.verbose);
    let dets = io::load_detections(&a.dets)?;
    let cfg = if a.ap50_only {
        MatchConfig::ap50_only()
    } else {
        MatchConfig::default()
    };
    let evaluator = Evaluator::new(&dets, &ds, &cfg)?;
    let aps: Vec<f64> = evaluator
        .units()
        .into_par_iter()
        .map(|u| evaluator.unit_ap(u))
        .collect();
    let summary = evaluator.summarize(&aps)?;
    eprintln!(
        "mAP {:.2} over {} classes ({} detections)",
        summary.map,
        summary.per_class.len(),
        dets.len()
    );
    if cli.verbose > 0 {
        for (c, ap) in &summary.per_class {
            eprintln!("  class {c}: {ap:.2}");
        }
    }
    let result = EvaluateResult {
        slot: a.slot.clone(),
        summary,
    };
    emit(
        cli.output.as_deref(),
        &Report::new("evaluate", resolved_config(cli, a), warnings, result),
    )
}

fn score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let maps = io::load_nine_maps(&a.report)?;
    let report = ScoreReport::new(&maps, BTreeMap::new());
    eprintln!("Score {:.2}", report.score);
    emit(
        cli.output.as_deref(),
        &Report::new("score", resolved_config(cli, a), Vec::new(), report),
    )
}

#[derive(Debug, Serialize)]
struct EpisodesResult {
    episodes: Vec<Episode>,
}

fn sample_episodes(cli: &Cli, a: &EpisodeArgs) -> Result<()> {
    if a.shots.is_empty() {
        return Err(CliError::Usage("--shots needs at least one value".into()));
    }
    let (ds, warns) = io::load_dataset(&a.gt)?;
    let warnings = warnings_to_strings(&warns, cli.verbose);
    let episodes = a
        .shots
        .iter()
        .map(|&k| sample_episode(&ds, k, cli.seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for ep in &episodes {
        eprintln!(
            "{}-way {}-shot: {} support images, {} query images",
            ep.n_way,
            ep.k_shot,
            ep.support_image_ids(&ds).len(),
            ep.query_image_ids.len()
        );
    }
    emit(
        cli.output.as_deref(),
        &Report::new(
            "sample-episodes",
            resolved_config(cli, a),
            warnings,
            EpisodesResult { episodes },
        ),
    )
}

#[derive(Debug, Serialize)]
struct EnsembleResult {
    inputs: Vec<EnsembleInput>,
    kept: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    detections: Option<Value>,
}

#[derive(Debug, Serialize)]
struct EnsembleInput {
    source: String,
    path: String,
    detections: usize,
}

fn split_inputs(a: &EnsembleArgs) -> Result<Vec<(String, PathBuf)>> {
    let names: Vec<&str> = a.weights.0.iter().map(|(n, _)| n.as_str()).collect();
    a.inputs
        .iter()
        .enumerate()
        .map(|(i, s)| match s.split_once('=') {
            Some((name, path)) if names.contains(&name) => Ok((name.to_owned(), PathBuf::from(path))),
            _ => names
                .get(i)
                .map(|n| ((*n).to_owned(), PathBuf::from(s)))
                .ok_or_else(|| {
                    CliError::Usage(format!("input `{s}` has no matching entry in --weights"))
                }),
        })
        .collect()
}

fn ensemble(cli: &Cli, a: &EnsembleArgs) -> Result<()> {
    let inputs = split_inputs(a)?;
    let mut cfg = EnsembleConfig::new(a.weights.0.iter().cloned().collect());
    cfg.iou_threshold = a.iou;
    cfg.score_floor = a.floor;
    cfg.validate()?;
    let mut sets = Vec::with_capacity(inputs.len());
    let mut summary = Vec::with_capacity(inputs.len());
    for (name, path) in &inputs {
        let dets = io::load_detections(path)?;
        summary.push(EnsembleInput {
            source: name.clone(),
            path: path.display().to_string(),
            detections: dets.len(),
        });
        sets.push((name.clone(), dets));
    }
    let fused = detops::ensemble(&sets, &cfg)?;
    let pooled: usize = summary.iter().map(|s| s.detections).sum();
    eprintln!("kept {} of {} pooled detections", fused.len(), pooled);
    let dets_json = io::detections_to_json(&fused);
    let detections = match &cli.output {
        Some(p) => {
            write_json(Some(p), &dets_json)?;
            None
        }
        None => Some(dets_json),
    };
    let result = EnsembleResult {
        inputs: summary,
        kept: fused.len(),
        detections,
    };
    write_json(
        None,
        &Report::new("ensemble", resolved_config(cli, a), Vec::new(), result),
    )
}

#[derive(Debug, Serialize)]
struct FuseResult {
    method: FuseMethod,
    classes: Vec<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sources: Vec<FuseSource>,
    queries: Vec<QueryResult>,
}

#[derive(Debug, Clone, Serialize)]
struct FuseSource {
    name: &'static str,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct QueryResult {
    id: String,
    predicted_class: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    affinity: Option<Vec<f64>>,
}

fn fusion_weights(list: Option<&WeightList>) -> Result<FusionWeights> {
    let mut w = FusionWeights::default();
    for (name, v) in list.map(|l| l.0.as_slice()).unwrap_or_default() {
        let slot = match name.as_str() {
            "local" => &mut w.w_local,
            "global" => &mut w.w_global,
            "text" => &mut w.w_text,
            "det" => &mut w.w_det,
            "aux" => &mut w.w_aux,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown fusion source `{other}` (expected local, global, text, det, aux)"
                )))
            }
        };
        *slot = *v;
    }
    w.validate()?;
    Ok(w)
}

/// Index of the largest score; ties go to the first (lowest class id).
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn load_score_table(path: &Path, n_classes: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = io::read_text(path)?;
    let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| {
        CliError::Usage(format!(
            "{}: expected {{query_id: [score, ...]}}: {e}",
            path.display()
        ))
    })?;
    if let Some((id, v)) = table.iter().find(|(_, v)| v.len() != n_classes) {
        return Err(CliError::Usage(format!(
            "{}: query {id} has {} scores, expected {n_classes}",
            path.display(),
            v.len()
        )));
    }
    Ok(table)
}

fn support_instances(support: &EmbeddingTable) -> Result<Vec<(Vec<f64>, u64)>> {
    support
        .of_kind(EmbeddingKind::Instance)
        .map(|r| {
            r.class_id
                .map(|c| (r.vector.clone(), c))
                .ok_or_else(|| CliError::Core(cdfsod_core::Error::MissingClass(r.record_id.clone())))
        })
        .collect()
}

fn fuse(cli: &Cli, a: &FuseArgs) -> Result<()> {
    let support = io::load_embeddings(&a.support, a.normalize)?;
    let queries = io::load_embeddings(&a.queries, a.normalize)?;
    if support.is_empty() {
        return Err(CliError::Usage(format!("{}: no support records", a.support.display())));
    }
    if !queries.is_empty() && queries.dim() != support.dim() {
        return Err(CliError::Core(cdfsod_core::Error::DimensionMismatch {
            context: "query embeddings".into(),
            expected: support.dim(),
            found: queries.dim(),
        }));
    }
    let mut warnings = Vec::new();
    let result = match a.method {
        FuseMethod::Proto => fuse_proto(a, &support, &queries, &mut warnings)?,
        FuseMethod::Ifc => fuse_ifc(a, &support, &queries)?,
        FuseMethod::Nearest => fuse_nearest(&support, &queries)?,
        FuseMethod::Tempered => fuse_tempered(a, &support, &queries)?,
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "{} queries over {} classes ({:?})",
        result.queries.len(),
        result.classes.len(),
        a.method
    );
    emit(
        cli.output.as_deref(),
        &Report::new("fuse", resolved_config(cli, a), warnings, result),
    )
}

fn fuse_proto(
    a: &FuseArgs,
    support: &EmbeddingTable,
    queries: &EmbeddingTable,
    warnings: &mut Vec<String>,
) -> Result<FuseResult> {
    let weights = fusion_weights(a.weights.as_ref())?;
    let kinds = [EmbeddingKind::Instance, EmbeddingKind::Image, EmbeddingKind::Text];
    let protos = protofusion::build_prototypes(support, &kinds)?;
    let classes = protos.class_ids();
    let mut proto_sources: Vec<(&'static str, f64, Vec<&[f64]>)> = Vec::new();
    for (name, kind, w) in [
        ("local", EmbeddingKind::Instance, weights.w_local),
        ("global", EmbeddingKind::Image, weights.w_global),
        ("text", EmbeddingKind::Text, weights.w_text),
    ] {
        match protos.complete(kind) {
            Some(ps) => proto_sources.push((name, w, ps)),
            None => {
                let missing: Vec<String> = protos
                    .missing(&[kind])
                    .iter()
                    .map(|(c, _)| c.to_string())
                    .collect();
                warnings.push(format!(
                    "{name} source dropped: no prototype for class {}",
                    missing.join(", ")
                ));
            }
        }
    }
    let det = a
        .det_scores
        .as_deref()
        .map(|p| load_score_table(p, classes.len()))
        .transpose()?;
    let aux = a
        .aux_scores
        .as_deref()
        .map(|p| load_score_table(p, classes.len()))
        .transpose()?;
    if proto_sources.is_empty() && det.is_none() && aux.is_none() {
        return Err(CliError::Usage("no complete score source to fuse".into()));
    }
    let mut sources: Vec<FuseSource> = proto_sources
        .iter()
        .map(|(name, w, _)| FuseSource { name, weight: *w })
        .collect();
    if det.is_some() {
        sources.push(FuseSource { name: "det", weight: weights.w_det });
    }
    if aux.is_some() {
        sources.push(FuseSource { name: "aux", weight: weights.w_aux });
    }

    let results = queries
        .records()
        .par_iter()
        .map(|q| -> Result<QueryResult> {
            let mut scored: Vec<(Vec<f64>, f64)> = Vec::with_capacity(sources.len());
            for (_, w, ps) in &proto_sources {
                let mut s = protofusion::proto_scores(&q.vector, ps, a.sigma)?;
                if a.softmax {
                    s = linalg::softmax(&s);
                }
                scored.push((s, *w));
            }
            for (table, w, name) in [(&det, weights.w_det, "det"), (&aux, weights.w_aux, "aux")] {
                if let Some(t) = table {
                    let s = t.get(&q.record_id).ok_or_else(|| {
                        CliError::Usage(format!("no {name} scores for query {}", q.record_id))
                    })?;
                    scored.push((s.clone(), w));
                }
            }
            let refs: Vec<(&[f64], f64)> = scored.iter().map(|(s, w)| (s.as_slice(), *w)).collect();
            let fused = protofusion::fuse(&refs)?;
            Ok(QueryResult {
                id: q.record_id.clone(),
                predicted_class: classes[argmax(&fused)],
                scores: Some(fused),
                confidence: None,
                affinity: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FuseResult {
        method: FuseMethod::Proto,
        classes,
        sources,
        queries: results,
    })
}

fn fuse_ifc(a: &FuseArgs, support: &EmbeddingTable, queries: &EmbeddingTable) -> Result<FuseResult> {
    let inst = support_instances(support)?;
    if inst.is_empty() {
        return Err(CliError::Usage("ifc needs instance support records".into()));
    }
    let classes: Vec<u64> = inst
        .iter()
        .map(|(_, c)| *c)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows: Vec<Vec<f64>> = inst.iter().map(|(v, _)| v.clone()).collect();
    let index: Vec<usize> = inst
        .iter()
        .map(|(_, c)| classes.binary_search(c).expect("class collected above"))
        .collect();
    let cache = FeatureCache::new(&Matrix::from_rows(&rows)?, &index, classes.len(), a.beta)?;
    let results = queries
        .records()
        .par_iter()
        .map(|q| -> Result<QueryResult> {
            let out = protofusion::ifc_affinity(&q.vector, &cache)?;
            Ok(QueryResult {
                id: q.record_id.clone(),
                predicted_class: classes[argmax(&out.logits)],
                scores: Some(out.logits),
                confidence: None,
                affinity: Some(out.affinity),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FuseResult {
        method: FuseMethod::Ifc,
        classes,
        sources: Vec::new(),
        queries: results,
    })
}

fn fuse_nearest(support: &EmbeddingTable, queries: &EmbeddingTable) -> Result<FuseResult> {
    let inst = support_instances(support)?;
    let classes: Vec<u64> = support.class_ids().into_iter().collect();
    let results = queries
        .records()
        .par_iter()
        .map(|q| -> Result<QueryResult> {
            let (class, conf) = protofusion::nearest_support(&q.vector, &inst)?;
            Ok(QueryResult {
                id: q.record_id.clone(),
                predicted_class: class,
                scores: None,
                confidence: Some(conf),
                affinity: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FuseResult {
        method: FuseMethod::Nearest,
        classes,
        sources: Vec::new(),
        queries: results,
    })
}

fn fuse_tempered(a: &FuseArgs, support: &EmbeddingTable, queries: &EmbeddingTable) -> Result<FuseResult> {
    let inst = support_instances(support)?;
    let mut by_class: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for (v, c) in inst {
        by_class.entry(c).or_default().push(v);
    }
    if by_class.is_empty() {
        return Err(CliError::Usage("tempered needs instance support records".into()));
    }
    let classes: Vec<u64> = by_class.keys().copied().collect();
    let proj = match a.refine.as_deref() {
        None => None,
        Some("identity") => Some(RefineProjections::identity(support.dim())),
        Some(path) => Some(io::load_projections(Path::new(path), support.dim())?),
    };
    let shots: Vec<Matrix> = by_class
        .values()
        .map(|vs| Matrix::from_rows(vs))
        .collect::<std::result::Result<_, _>>()?;
    let means: Vec<Vec<f64>> = by_class
        .values()
        .map(|vs| linalg::mean_vector(vs).expect("class has a support"))
        .collect();
    let results = queries
        .records()
        .par_iter()
        .map(|q| -> Result<QueryResult> {
            let protos = match &proj {
                None => means.clone(),
                Some(p) => {
                    let f_q = Matrix::from_rows(std::slice::from_ref(&q.vector))?;
                    shots
                        .iter()
                        .map(|f_s| {
                            protofusion::refine_prototypes(&f_q, f_s, p, a.alpha, f_s.rows())
                                .map(|m| m.row(0).to_vec())
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?
                }
            };
            let scores = protofusion::tempered_scores(&q.vector, &protos, a.tau)?;
            Ok(QueryResult {
                id: q.record_id.clone(),
                predicted_class: classes[argmax(&scores)],
                scores: Some(scores),
                confidence: None,
                affinity: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FuseResult {
        method: FuseMethod::Tempered,
        classes,
        sources: Vec::new(),
        queries: results,
    })
}

#[derive(Debug, Serialize)]
struct DomainResult {
    source_count: usize,
    target_count: usize,
    dim: usize,
    mmd: f64,
    mmd_per_bandwidth: Vec<f64>,
    source_stats: ChannelStats,
    target_stats: ChannelStats,
    style_loss: f64,
    guarded_channels: Vec<usize>,
    warmup_alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    combined_objective: Option<f64>,
}

fn embedding_matrix(path: &Path, normalize: bool) -> Result<Matrix> {
    let table = io::load_embeddings(path, normalize)?;
    if table.is_empty() {
        return Err(CliError::Usage(format!("{}: no embeddings", path.display())));
    }
    let rows: Vec<Vec<f64>> = table.records().iter().map(|r| r.vector.clone()).collect();
    Ok(Matrix::from_rows(&rows)?)
}

fn domain_stats(cli: &Cli, a: &DomainArgs) -> Result<()> {
    let x = embedding_matrix(&a.source, a.normalize)?;
    let y = embedding_matrix(&a.target, a.normalize)?;
    let cfg = MmdConfig {
        bandwidths: a.bandwidths.clone(),
    };
    let per = domainstats::mmd_per_bandwidth(&x, &y, &cfg)?;
    let mmd = per.iter().sum::<f64>() / per.len() as f64;
    let src = ChannelStats::from_samples(&x)?;
    let tgt = ChannelStats::from_samples(&y)?;
    let styled = domainstats::style_transfer(&x, &src, &tgt)?;
    let style_loss = domainstats::style_loss(&styled.output, &tgt)?;
    let mut warnings = Vec::new();
    if !styled.guarded_channels.is_empty() {
        warnings.push(format!(
            "zero-variance source channels {:?} use sigma = {}",
            styled.guarded_channels,
            domainstats::SIGMA_EPS
        ));
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let result = DomainResult {
        source_count: x.rows(),
        target_count: y.rows(),
        dim: x.cols(),
        mmd,
        mmd_per_bandwidth: per,
        source_stats: src,
        target_stats: tgt,
        style_loss,
        guarded_channels: styled.guarded_channels,
        warmup_alpha: domainstats::warmup_alpha(a.iteration, a.warmup)?,
        combined_objective: a
            .det_loss
            .map(|d| domainstats::combined_objective(d, mmd, style_loss)),
    };
    eprintln!("MMD {:.2}, style loss {:.2}", result.mmd, result.style_loss);
    emit(
        cli.output.as_deref(),
        &Report::new("domain-stats", resolved_config(cli, a), warnings, result),
    )
}

#[derive(Debug, Serialize)]
struct SelftrainResult {
    images: usize,
    initial_labels: usize,
    final_labels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<IterationTrace>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Value>,
}

/// Last run of ASCII digits in the file name, used to order replay files.
fn file_number(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_string_lossy();
    let digits: String = name
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn replay_files(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern)
        .map_err(|e| CliError::Usage(format!("bad replay pattern `{pattern}`: {e}")))?;
    let mut files = paths
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| {
            let path = e.path().to_path_buf();
            CliError::File(io::IoError::Io {
                path,
                source: e.into(),
            })
        })?;
    files.sort_by(|a, b| (file_number(a), a).cmp(&(file_number(b), b)));
    if files.is_empty() {
        return Err(CliError::Usage(format!("replay pattern `{pattern}` matched no files")));
    }
    Ok(files)
}

enum AnyScorer {
    Replay(ReplayScorer),
    Proto(PrototypeScorer),
}

fn build_scorer(a: &SelftrainArgs) -> Result<AnyScorer> {
    if let Some(pattern) = a.scorer.strip_prefix("replay:") {
        let outputs = replay_files(pattern)?
            .iter()
            .map(|p| io::load_detections(p))
            .collect::<std::result::Result<Vec<Vec<Detection>>, _>>()?;
        return Ok(AnyScorer::Replay(ReplayScorer::new(outputs)));
    }
    if let Some(rest) = a.scorer.strip_prefix("proto:") {
        let (sup, props) = rest.split_once(':').ok_or_else(|| {
            CliError::Usage("proto scorer needs proto:<supports.jsonl>:<proposals.json>".into())
        })?;
        let support = io::load_embeddings(Path::new(sup), false)?;
        let inst = support_instances(&support)?;
        let proposals = io::load_proposals(Path::new(props))?;
        return Ok(AnyScorer::Proto(PrototypeScorer::new(&inst, proposals, a.tau)?));
    }
    Err(CliError::Usage(format!(
        "unknown scorer `{}` (expected replay:<glob> or proto:<supports>:<proposals>)",
        a.scorer
    )))
}

fn selftrain(cli: &Cli, a: &SelftrainArgs) -> Result<()> {
    let (ds, warns) = io::load_dataset(&a.gt)?;
    let warnings = warnings_to_strings(&warns, cli.verbose);
    let cfg = PseudoLabelConfig {
        lambda_conf: a.lambda_conf,
        iterations: a.iters,
        dedup_iou: a.dedup_iou,
    };
    cfg.validate()?;
    let mode = if a.reset_per_image {
        LoopMode::ResetPerImage
    } else {
        LoopMode::Carry
    };
    let image_ids: Vec<u64> = ds.images().keys().copied().collect();
    let initial = ds.annotations().to_vec();
    let outcome = match build_scorer(a)? {
        AnyScorer::Replay(mut s) => selftrain::self_train_loop(&image_ids, &mut s, &initial, &cfg, mode),
        AnyScorer::Proto(mut s) => selftrain::self_train_loop(&image_ids, &mut s, &initial, &cfg, mode),
    }
    .map_err(|e| CliError::Invalid(e.to_string()))?;

    let labelled = io::dataset_to_json(&ds.with_annotations(outcome.labels.clone())?);
    let labels = match &cli.output {
        Some(p) => {
            write_json(Some(p), &labelled)?;
            None
        }
        None => Some(labelled),
    };
    eprintln!(
        "{} labels -> {} after {} iterations",
        initial.len(),
        outcome.labels.len(),
        a.iters
    );
    let config = resolved_config(cli, a);
    let trace = match &a.trace {
        Some(p) => {
            let doc = Report::new("selftrain", config.clone(), Vec::new(), &outcome.trace);
            io::write_text(p, &io::to_json_string(&doc))?;
            None
        }
        None => Some(outcome.trace),
    };
    let result = SelftrainResult {
        images: image_ids.len(),
        initial_labels: initial.len(),
        final_labels: outcome.labels.len(),
        trace,
        labels,
    };
    write_json(None, &Report::new("selftrain", config, warnings, result))
}
