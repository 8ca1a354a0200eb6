//! Command-line front end.
//!
//! Exit codes: 0 success (including `--help`), 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    build_fewshot_split, generate_synthetic_dataset, iter_contexts, load_embeddings, load_scenes, load_split,
    predicate_vocabulary, rare_predicate_subset, write_embeddings, write_scenes, write_split, BBox, EmbeddingTable,
    FewShotSplit, SceneRecord, SynthConfig,
};
use crate::diagnostics::{
    cross_reconstruct, export_latents, perturbed_probe, project_2d, write_latents_csv, ProjectionMethod,
};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, recall_at_k_subset, top1_accuracy, PredictionSet, RecallReport};
use crate::fewshot::{fit_head, knn1_leave_one_out, predict_scenes, HeadConfig, HeadKind, TrainedHead};
use crate::model::{ModelConfig, RelVae};
use crate::trainer::{load_checkpoint, pretrain, save_checkpoint, write_loss_csv, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Seed offset separating the synthetic test scenes from the training scenes.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Parser)]
#[command(name = "relvae", version, about = "Label-free relation-context VAE with few-shot predicate heads")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset, embeddings and k-shot splits.
    GenData(GenDataArgs),
    /// Pretrain the VAE on predicate-free contexts.
    Pretrain(PretrainArgs),
    /// Fit a few-shot predicate head and score pairs.
    Fewshot(FewshotArgs),
    /// Recall@k of a fitted head on annotated scenes.
    Eval(EvalArgs),
    /// Latent-space diagnostics.
    #[command(subcommand)]
    Inspect(InspectCommand),
    /// Full synthetic pipeline: generate, pretrain, few-shot, evaluate.
    ReproduceSynthetic(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub n_test_scenes: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; the loss CSV is written to `<out>.losses.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory that relative image and feature paths resolve against.
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scenes the split refers to.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Split file; without it one is drawn with `--k` and `--split-seed`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadKind>,
    /// Scenes to score; defaults to `--scenes`.
    #[arg(long)]
    pub eval_scenes: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to store the fitted head; defaults to `<out>.head.json`.
    #[arg(long)]
    pub head_out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Also report on the n least frequent predicates.
    #[arg(long)]
    pub rare_n: Option<usize>,
    /// Scenes whose predicate counts define the rare subset; defaults to `--scenes`.
    #[arg(long)]
    pub train_scenes: Option<PathBuf>,
    #[arg(long)]
    pub no_graph_constraints: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum InspectCommand {
    /// Posterior means of every relation, with colouring columns, as CSV.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        base_dir: Option<PathBuf>,
    },
    /// 2-D projection of an exported latent CSV.
    Project {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long, default_value = "pca", value_parser = parse_method)]
        method: ProjectionMethod,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a source context on a target image and render heatmaps.
    CrossRecon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = 0)]
        relation: usize,
        #[arg(long)]
        target: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overlay file prefix; defaults to `<source>_<relation>_on_<target>`.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        base_dir: Option<PathBuf>,
    },
    /// Replace the object box of one context and measure the object heatmap.
    Perturb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long, default_value_t = 0)]
        relation: usize,
        /// `x1,y1,x2,y2`
        #[arg(long, value_parser = parse_bbox)]
        bbox: BBox,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        base_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub n_test_scenes: Option<usize>,
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<ProjectionMethod, String> {
    match s {
        "pca" => Ok(ProjectionMethod::Pca),
        "external" => Ok(ProjectionMethod::External),
        _ => Err(format!("unknown method {s:?} (expected pca or external)")),
    }
}

fn parse_bbox(s: &str) -> std::result::Result<BBox, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
    match v.as_slice() {
        &[x1, y1, x2, y2] => Ok(BBox::new(x1, y1, x2, y2)),
        _ => Err("expected x1,y1,x2,y2".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotSection {
    pub k: usize,
    pub seed: u64,
    pub head: HeadKind,
}

impl Default for FewshotSection {
    fn default() -> Self {
        Self { k: 5, seed: 0, head: HeadKind::Ffn }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    /// Rare-subset size; unset means half the vocabulary, rounded down.
    pub rare_n: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k: 50, rare_n: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    #[serde(flatten)]
    pub config: SynthConfig,
    pub n_test_scenes: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { config: SynthConfig { n_scenes: 300, ..SynthConfig::default() }, n_test_scenes: 200 }
    }
}

/// Everything a run can configure; each section is optional in the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub fewshot: FewshotSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn require_exists(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::io(*p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".losses.csv");
    PathBuf::from(s)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a, jobs),
        Command::Fewshot(a) => cmd_fewshot(a, jobs),
        Command::Eval(a) => cmd_eval(a, jobs),
        Command::Inspect(c) => cmd_inspect(c, jobs),
        Command::ReproduceSynthetic(a) => reproduce_synthetic(&a, jobs).map(|_| ()),
    }
}

/// Train and test scene sets from one seed.
pub fn synth_datasets(synth: &SynthSection, seed: u64) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>, EmbeddingTable)> {
    let (train, table) = generate_synthetic_dataset(&synth.config, seed)?;
    let test_cfg = SynthConfig { n_scenes: synth.n_test_scenes, ..synth.config.clone() };
    let (test, _) = generate_synthetic_dataset(&test_cfg, seed.wrapping_add(TEST_SEED_OFFSET))?;
    Ok((train, test, table))
}

pub const SPLIT_KS: [usize; 3] = [1, 2, 5];

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(n) = a.n_scenes {
        cfg.synth.config.n_scenes = n;
    }
    if let Some(n) = a.n_test_scenes {
        cfg.synth.n_test_scenes = n;
    }
    create_dir(&a.out)?;
    let (train, test, table) = synth_datasets(&cfg.synth, a.seed)?;
    write_scenes(a.out.join("train.jsonl"), &train)?;
    write_scenes(a.out.join("test.jsonl"), &test)?;
    write_embeddings(a.out.join("embeddings.tsv"), &table)?;
    if !train.iter().all(|s| s.relations.is_empty()) {
        for k in SPLIT_KS {
            write_split(a.out.join(format!("split_k{k}.json")), &build_fewshot_split(&train, k, a.seed)?)?;
        }
    }
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, jobs: usize) -> Result<()> {
    require_exists(&[&a.scenes, &a.embeddings])?;
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let scenes = load_scenes(&a.scenes)?;
    let table = load_embeddings(&a.embeddings)?;
    let base = a.base_dir.as_deref().or(a.scenes.parent());
    let out = pretrain(&scenes, &table, &cfg.model, &cfg.train, base, jobs)?;
    save_checkpoint(&out.checkpoint, &a.out)?;
    write_loss_csv(&loss_csv_path(&a.out), &out.losses)
}

fn resolve_split(explicit: Option<&Path>, k: usize, seed: u64, scenes: &[SceneRecord]) -> Result<FewShotSplit> {
    match explicit {
        Some(p) => load_split(p),
        None => build_fewshot_split(scenes, k, seed),
    }
}

fn cmd_fewshot(a: FewshotArgs, jobs: usize) -> Result<()> {
    let mut req: Vec<&Path> = vec![&a.ckpt, &a.scenes, &a.embeddings];
    req.extend(a.split.as_deref());
    req.extend(a.eval_scenes.as_deref());
    require_exists(&req)?;
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model = load_checkpoint(&a.ckpt)?.model;
    let scenes = load_scenes(&a.scenes)?;
    let table = load_embeddings(&a.embeddings)?;
    let k = a.k.unwrap_or(cfg.fewshot.k);
    let split = resolve_split(a.split.as_deref(), k, a.split_seed.unwrap_or(cfg.fewshot.seed), &scenes)?;
    let kind = a.head.unwrap_or(cfg.fewshot.head);
    let base = a.base_dir.as_deref().or(a.scenes.parent());
    let head = fit_head(kind, &model, &scenes, &split, &table, base, &cfg.head, jobs)?;
    let head_out = a.head_out.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".head.json");
        PathBuf::from(s)
    });
    head.write(&head_out)?;
    let (eval_scenes, eval_base) = match &a.eval_scenes {
        Some(p) => (load_scenes(p)?, a.base_dir.as_deref().or(p.parent())),
        None => (scenes, base),
    };
    let preds = predict_scenes(&head, &model, &eval_scenes, &table, eval_base, jobs)?;
    preds.write_jsonl(&a.out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: HeadKind,
    pub overall: RecallReport,
    pub rare: Option<RecallReport>,
    pub rare_predicates: Vec<String>,
    pub accuracy: f64,
}

/// Overall and rare-subset Recall@k plus top-1 accuracy of `preds`.
pub fn evaluate_predictions(
    head: HeadKind,
    preds: &PredictionSet,
    scenes: &[SceneRecord],
    k: usize,
    graph_constraints: bool,
    rare: &[String],
) -> Result<EvalReport> {
    let overall = recall_at_k(preds, scenes, k, graph_constraints)?;
    let rare_report = if rare.is_empty() {
        None
    } else {
        Some(recall_at_k_subset(preds, scenes, k, graph_constraints, rare, &format!("rare-{}", rare.len()))?)
    };
    Ok(EvalReport {
        head,
        overall,
        rare: rare_report,
        rare_predicates: rare.to_vec(),
        accuracy: top1_accuracy(preds, scenes, None)?,
    })
}

/// Runs the full pipeline on test scenes for a saved head.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &RelVae,
    head: &TrainedHead,
    scenes: &[SceneRecord],
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
    k: usize,
    subset: Option<&[String]>,
    jobs: usize,
) -> Result<RecallReport> {
    let preds = predict_scenes(head, model, scenes, table, base_dir, jobs)?;
    match subset {
        None => recall_at_k(&preds, scenes, k, true),
        Some(s) => recall_at_k_subset(&preds, scenes, k, true, s, &format!("rare-{}", s.len())),
    }
}

fn cmd_eval(a: EvalArgs, jobs: usize) -> Result<()> {
    let mut req: Vec<&Path> = vec![&a.ckpt, &a.head, &a.scenes, &a.embeddings];
    req.extend(a.train_scenes.as_deref());
    require_exists(&req)?;
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model = load_checkpoint(&a.ckpt)?.model;
    let head = TrainedHead::read(&a.head)?;
    let scenes = load_scenes(&a.scenes)?;
    let table = load_embeddings(&a.embeddings)?;
    let k = a.k.unwrap_or(cfg.eval.k);
    let rare = match a.rare_n.or(cfg.eval.rare_n) {
        Some(n) => {
            let freq_scenes = match &a.train_scenes {
                Some(p) => load_scenes(p)?,
                None => scenes.clone(),
            };
            rare_predicate_subset(&freq_scenes, n)?
        }
        None => Vec::new(),
    };
    let base = a.base_dir.as_deref().or(a.scenes.parent());
    let preds = predict_scenes(&head, &model, &scenes, &table, base, jobs)?;
    let report = evaluate_predictions(head.kind(), &preds, &scenes, k, !a.no_graph_constraints, &rare)?;
    write_json(&a.out, &report)
}

fn find_scene<'a>(scenes: &'a [SceneRecord], id: &str) -> Result<(usize, &'a SceneRecord)> {
    scenes
        .iter()
        .enumerate()
        .find(|(_, s)| s.image_id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("no scene with image_id {id:?}")))
}

fn context_in(scenes: &[SceneRecord], id: &str, relation: usize) -> Result<(usize, crate::dataio::ContextInput)> {
    let (si, scene) = find_scene(scenes, id)?;
    if relation >= scene.relations.len() {
        return Err(Error::InvalidArgument(format!("{id:?} has {} relations", scene.relations.len())));
    }
    Ok((si, crate::dataio::context_of(si, scene, relation)))
}

/// Reads the feature columns `z0 … z{D-1}` of a latent CSV.
/// `(image_id, relation_index)` keys and their latent vectors.
pub type LatentRows = (Vec<(String, usize)>, Vec<Vec<f64>>);

pub fn read_latent_features(path: &Path) -> Result<LatentRows> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(0, e.to_string()))?;
    let header = r.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let zcols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with('z')).map(|(i, _)| i).collect();
    let (id_col, rel_col) = (0, 1);
    let mut ids = Vec::new();
    let mut feats = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(i + 2, e.to_string()))?;
        let rel: usize = rec[rel_col].parse().map_err(|e: std::num::ParseIntError| err(i + 2, e.to_string()))?;
        ids.push((rec[id_col].to_string(), rel));
        let f: Vec<f64> = zcols
            .iter()
            .map(|&c| rec[c].parse::<f64>().map_err(|e| err(i + 2, e.to_string())))
            .collect::<Result<_>>()?;
        feats.push(f);
    }
    Ok((ids, feats))
}

fn cmd_inspect(c: InspectCommand, jobs: usize) -> Result<()> {
    match c {
        InspectCommand::ExportLatents { ckpt, scenes, embeddings, out, base_dir } => {
            require_exists(&[&ckpt, &scenes, &embeddings])?;
            let model = load_checkpoint(&ckpt)?.model;
            let sc = load_scenes(&scenes)?;
            let table = load_embeddings(&embeddings)?;
            let recs = export_latents(&model, &sc, &table, base_dir.as_deref().or(scenes.parent()), jobs)?;
            write_latents_csv(&out, &recs)
        }
        InspectCommand::Project { latents, method, out } => {
            require_exists(&[&latents])?;
            let (ids, feats) = read_latent_features(&latents)?;
            let pts = project_2d(&feats, method)?;
            let e = |e: csv::Error| Error::io(&out, std::io::Error::other(e));
            let mut w = csv::Writer::from_path(&out).map_err(e)?;
            let mut header = vec!["image_id".to_string(), "relation_index".to_string()];
            match method {
                ProjectionMethod::Pca => header.extend(["x".to_string(), "y".to_string()]),
                ProjectionMethod::External => header.extend((0..pts[0].len()).map(|j| format!("z{j}"))),
            }
            w.write_record(&header).map_err(e)?;
            for ((id, rel), p) in ids.iter().zip(&pts) {
                let mut row = vec![id.clone(), rel.to_string()];
                row.extend(p.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(e)?;
            }
            w.flush().map_err(|err| Error::io(&out, err))
        }
        InspectCommand::CrossRecon { ckpt, scenes, embeddings, source, relation, target, out_dir, id, base_dir } => {
            require_exists(&[&ckpt, &scenes, &embeddings])?;
            let model = load_checkpoint(&ckpt)?.model;
            let sc = load_scenes(&scenes)?;
            let table = load_embeddings(&embeddings)?;
            let (si, ctx) = context_in(&sc, &source, relation)?;
            let (_, tgt) = find_scene(&sc, &target)?;
            let id = id.unwrap_or_else(|| format!("{source}_{relation}_on_{target}"));
            let base = base_dir.as_deref().or(scenes.parent());
            let report = cross_reconstruct(&model, &sc[si], &ctx, tgt, &table, base, &out_dir, &id)?;
            write_json(&out_dir.join(format!("{id}.json")), &report)
        }
        InspectCommand::Perturb { ckpt, scenes, embeddings, image, relation, bbox, out, base_dir } => {
            require_exists(&[&ckpt, &scenes, &embeddings])?;
            let model = load_checkpoint(&ckpt)?.model;
            let sc = load_scenes(&scenes)?;
            let table = load_embeddings(&embeddings)?;
            let (si, ctx) = context_in(&sc, &image, relation)?;
            let report = perturbed_probe(&model, &sc[si], &ctx, bbox, &table, base_dir.as_deref().or(scenes.parent()))?;
            match out {
                Some(p) => write_json(&p, &report),
                None => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproRow {
    pub head: HeadKind,
    pub k: usize,
    pub recall_at_50: f64,
    pub recall_at_50_rare: f64,
    pub accuracy: f64,
    /// Leave-one-out accuracy on the support set (KNN-1 only).
    pub support_loo_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub seed: u64,
    pub n_train_scenes: usize,
    pub n_test_scenes: usize,
    pub n_train_contexts: usize,
    pub n_test_contexts: usize,
    pub predicates: Vec<String>,
    pub rare_predicates: Vec<String>,
    pub chance_accuracy: f64,
    pub pretrain_steps: usize,
    pub final_loss: Option<crate::losses::LossBreakdown>,
    pub rows: Vec<ReproRow>,
    pub per_predicate_recall_ffn_k5: BTreeMap<String, f64>,
}

/// Generates data, pretrains, fits every head for each k and writes
/// `report.json`, `pretrain.ckpt`, `pretrain.ckpt.losses.csv`, the datasets
/// and the split files into `out_dir`.
pub fn reproduce_synthetic(a: &ReproduceArgs, jobs: usize) -> Result<ReproReport> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(n) = a.n_scenes {
        cfg.synth.config.n_scenes = n;
    }
    if let Some(n) = a.n_test_scenes {
        cfg.synth.n_test_scenes = n;
    }
    cfg.train.seed = a.seed;
    create_dir(&a.out_dir)?;
    let (train, test, table) = synth_datasets(&cfg.synth, a.seed)?;
    write_scenes(a.out_dir.join("train.jsonl"), &train)?;
    write_scenes(a.out_dir.join("test.jsonl"), &test)?;
    write_embeddings(a.out_dir.join("embeddings.tsv"), &table)?;

    let out = pretrain(&train, &table, &cfg.model, &cfg.train, None, jobs)?;
    let ckpt_path = a.out_dir.join("pretrain.ckpt");
    save_checkpoint(&out.checkpoint, &ckpt_path)?;
    write_loss_csv(&loss_csv_path(&ckpt_path), &out.losses)?;
    let model = out.checkpoint.model;

    let predicates = predicate_vocabulary(&train);
    let rare_n = cfg.eval.rare_n.unwrap_or(predicates.len() / 2);
    let rare = rare_predicate_subset(&train, rare_n)?;
    let mut rows = Vec::new();
    let mut per_pred = BTreeMap::new();
    for k in SPLIT_KS {
        let split = build_fewshot_split(&train, k, a.seed)?;
        write_split(a.out_dir.join(format!("split_k{k}.json")), &split)?;
        for kind in HeadKind::ALL {
            let head_cfg = HeadConfig { seed: a.seed, ..cfg.head.clone() };
            let head = fit_head(kind, &model, &train, &split, &table, None, &head_cfg, jobs)?;
            let preds = predict_scenes(&head, &model, &test, &table, None, jobs)?;
            let r = evaluate_predictions(kind, &preds, &test, cfg.eval.k, true, &rare)?;
            let loo = match &head {
                TrainedHead::Knn1 { support } if support.len() > 1 => Some(knn1_leave_one_out(support)?),
                _ => None,
            };
            if kind == HeadKind::Ffn && k == 5 {
                per_pred = r.overall.per_predicate.iter().map(|(p, &(h, t))| (p.clone(), h as f64 / t as f64)).collect();
            }
            rows.push(ReproRow {
                head: kind,
                k,
                recall_at_50: r.overall.recall_at_k,
                recall_at_50_rare: r.rare.as_ref().map_or(f64::NAN, |x| x.recall_at_k),
                accuracy: r.accuracy,
                support_loo_accuracy: loo,
            });
        }
    }
    let report = ReproReport {
        seed: a.seed,
        n_train_scenes: train.len(),
        n_test_scenes: test.len(),
        n_train_contexts: iter_contexts(&train, false).count(),
        n_test_contexts: iter_contexts(&test, false).count(),
        chance_accuracy: 1.0 / predicates.len() as f64,
        predicates,
        rare_predicates: rare,
        pretrain_steps: cfg.train.steps,
        final_loss: out.losses.last().copied(),
        rows,
        per_predicate_recall_ffn_k5: per_pred,
    };
    write_json(&a.out_dir.join("report.json"), &report)?;
    Ok(report)
}
