use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ayce_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use ayce_core::data::{compute_stats, load_dataset, Dataset, DiskAssets};
use ayce_core::pca::{pca_2d, write_pca_csv};
use ayce_core::retrieval::{
    embed_all, evaluate_queries, rank, write_report, write_submission, Direction, EmbeddingStore, QueryMode, RankOrder,
};
use ayce_core::text::{
    encode_dataset, finetune_text, load_text_checkpoint, save_text_checkpoint, ProjectionHead, TextFinetuneConfig,
    TextMode, ToyEncoder, ToyEncoderConfig,
};
use ayce_core::training::{train_visual, Mining, ModelVariant, RunConfig, TrainConfig, TrainOutputs};
use ayce_core::visual::VisualModel;
use ayce_core::{Error, Metric};

#[derive(Parser, Debug)]
#[command(name = "ayce", version, about = "Natural-language vehicle track retrieval")]
struct Cli {
    /// Base directory for every relative path argument.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Worker threads for embedding.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Random seed; falls back to AYCE_SEED, then to the config file, then 0.
    #[arg(long, global = true, env = "AYCE_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (dataset.json, detections.jsonl, crops/).
    Gen(GenArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Fine-tune the sentence encoder on caption triplets.
    FinetuneText(FinetuneArgs),
    /// Train the visual branch against frozen caption embeddings.
    Train(TrainArgs),
    /// Embed every track and caption triplet.
    Embed(EmbedArgs),
    /// Rank candidates and write a submission file.
    Rank(RankArgs),
    /// Compute MRR and top-10 rate of an embedding store.
    Eval(EvalArgs),
    /// Export a 2-D principal-component projection of embeddings as CSV.
    Pca(PcaArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// JSON generator spec; missing fields take desk defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Built-in spec used when --spec is absent.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Number of tracks (overrides the spec).
    #[arg(long)]
    tracks: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Dataset directory (containing dataset.json).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CliMetric {
    #[value(alias = "cosine_metric")]
    CosineMetric,
    Euclidean,
}

impl From<CliMetric> for Metric {
    fn from(m: CliMetric) -> Self {
        match m {
            CliMetric::CosineMetric => Metric::CosineMetric,
            CliMetric::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CliTextMode {
    Lto,
    Lso,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long, default_value = "text.ckpt")]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, value_enum, default_value = "cosine-metric")]
    metric: CliMetric,
    #[arg(long, value_enum, default_value = "lto")]
    mode: CliTextMode,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CliVariant {
    #[value(name = "VS-LT")]
    VsLt,
    #[value(name = "VS-LS")]
    VsLs,
    #[value(name = "VT-LT")]
    VtLt,
}

impl From<CliVariant> for ModelVariant {
    fn from(v: CliVariant) -> Self {
        match v {
            CliVariant::VsLt => ModelVariant::VsLt,
            CliVariant::VsLs => ModelVariant::VsLs,
            CliVariant::VtLt => ModelVariant::VtLt,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TrainPreset {
    Desk,
    #[value(name = "paper-2021")]
    Paper2021,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CliMining {
    Farthest,
    Closest,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Text checkpoint from finetune-text.
    #[arg(long, default_value = "text.ckpt")]
    text: PathBuf,
    /// TOML file with [model], [loss] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Schedule preset; replaces the [train] section of --config.
    #[arg(long, value_enum)]
    preset: Option<TrainPreset>,
    #[arg(long, value_enum, ignore_case = true)]
    variant: Option<CliVariant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    mining: Option<CliMining>,
    /// Evaluate training-set MRR every N epochs.
    #[arg(long)]
    mrr_every: Option<usize>,
    /// Query granularity of the training-set MRR.
    #[arg(long, value_enum)]
    mrr_queries: Option<CliQueries>,
    /// Run directory (model.ckpt, history.csv, config.toml).
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    /// Visual checkpoint written by train.
    #[arg(long, default_value = "run/model.ckpt")]
    model: PathBuf,
    #[arg(long, default_value = "text.ckpt")]
    text: PathBuf,
    /// Output directory for embeddings.json.
    #[arg(long, default_value = "embeds")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CliDirection {
    #[value(alias = "text_to_visual")]
    TextToVisual,
    #[value(alias = "visual_to_text")]
    VisualToText,
}

impl From<CliDirection> for Direction {
    fn from(d: CliDirection) -> Self {
        match d {
            CliDirection::TextToVisual => Direction::TextToVisual,
            CliDirection::VisualToText => Direction::VisualToText,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CliOrder {
    Asc,
    Desc,
}

impl From<CliOrder> for RankOrder {
    fn from(o: CliOrder) -> Self {
        match o {
            CliOrder::Asc => RankOrder::Asc,
            CliOrder::Desc => RankOrder::Desc,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CliQueries {
    /// One query per track (min over its caption rows).
    Track,
    /// One query per caption row.
    Sentence,
}

impl From<CliQueries> for QueryMode {
    fn from(q: CliQueries) -> Self {
        match q {
            CliQueries::Track => QueryMode::Track,
            CliQueries::Sentence => QueryMode::Sentence,
        }
    }
}

#[derive(Args, Debug)]
struct RankingArgs {
    /// Embedding directory (or embeddings.json).
    #[arg(long)]
    embeds: PathBuf,
    #[arg(long, value_enum, default_value = "text-to-visual")]
    direction: CliDirection,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: CliMetric,
    /// Sort by ascending (nearest first) or descending distance.
    #[arg(long, value_enum, default_value = "asc")]
    rank_order: CliOrder,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    ranking: RankingArgs,
    #[arg(long, default_value = "submission.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    ranking: RankingArgs,
    #[arg(long, value_enum, default_value = "track")]
    queries: CliQueries,
    /// Report file to write.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Side {
    Text,
    Visual,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[arg(long)]
    embeds: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    side: Side,
    #[arg(long, default_value = "pca.csv")]
    out: PathBuf,
}

struct Ctx {
    workdir: PathBuf,
    jobs: usize,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn load_data(ctx: &Ctx, dir: &Path) -> Result<(Dataset, DiskAssets)> {
    let dir = ctx.path(dir);
    let d = load_dataset(&dir.join("dataset.json"))?;
    let assets = DiskAssets::open(&dir)?;
    Ok((d, assets))
}

fn gen(ctx: &Ctx, a: &GenArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let p = ctx.path(p);
            let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingFile(p.clone()))?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(Error::from)?
        }
        None => match a.preset {
            Preset::Desk => SyntheticSpec::desk(32),
            Preset::Paper => SyntheticSpec::paper_calibrated(32),
        },
    };
    if let Some(n) = a.tracks {
        spec.n_tracks = n;
    }
    let seed = ctx.seed();
    println!("seed={seed}");
    println!("config={}", serde_json::to_string(&spec)?);
    let corpus = generate_synthetic(&spec, seed)?;
    let out = ctx.path(&a.out);
    corpus.write(&out)?;
    println!("wrote {} tracks to {}", corpus.dataset.n(), out.display());
    Ok(())
}

fn stats(ctx: &Ctx, a: &StatsArgs) -> Result<()> {
    let (d, _) = load_data(ctx, &a.data)?;
    println!("seed={}", ctx.seed());
    println!("{}", serde_json::to_string_pretty(&compute_stats(&d)?)?);
    Ok(())
}

fn finetune(ctx: &Ctx, a: &FinetuneArgs) -> Result<()> {
    let (d, _) = load_data(ctx, &a.data)?;
    let seed = ctx.seed();
    let cfg = TextFinetuneConfig {
        mode: match a.mode {
            CliTextMode::Lto => TextMode::Lto,
            CliTextMode::Lso => TextMode::Lso,
        },
        metric: a.metric.into(),
        margin: a.margin,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed,
        ..TextFinetuneConfig::default()
    };
    println!("seed={seed}");
    println!("config={}", serde_json::to_string(&cfg)?);
    let mut enc = ToyEncoder::<f32>::for_dataset(&d, ToyEncoderConfig::default(), seed);
    let mut head = ProjectionHead::new(enc.config.width, seed);
    let history = finetune_text(&d, &mut enc, &mut head, &cfg)?;
    for (epoch, r) in history.iter().enumerate() {
        println!(
            "epoch={epoch} d_intra={:.4} d_inter={:.4} ratio={:.4}",
            r.d_intra_mean,
            r.d_inter_mean,
            r.d_intra_mean / r.d_inter_mean
        );
    }
    let out = ctx.path(&a.out);
    save_text_checkpoint(&out, &enc, &head, &cfg)?;
    let hist_path = out.with_extension("history.json");
    std::fs::write(&hist_path, serde_json::to_string_pretty(&history)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(&ctx.path(p))?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.preset {
        cfg.train = match p {
            TrainPreset::Desk => TrainConfig::desk(),
            TrainPreset::Paper2021 => TrainConfig::paper_2021(),
        };
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(m) = a.margin {
        cfg.loss.margin = m;
    }
    if let Some(b) = a.beta {
        cfg.loss.beta = b;
    }
    if let Some(m) = a.mining {
        cfg.train.mining = match m {
            CliMining::Farthest => Mining::Farthest,
            CliMining::Closest => Mining::Closest,
        };
    }
    if let Some(n) = a.mrr_every {
        cfg.train.mrr_every = n;
    }
    if let Some(q) = a.mrr_queries {
        cfg.train.mrr_queries = q.into();
    }
    if let Some(s) = ctx.seed {
        cfg.train.seed = s;
    }
    cfg.resolve();
    cfg.validate()?;
    println!("seed={}", cfg.train.seed);
    println!("{}", cfg.to_toml()?);

    let (d, assets) = load_data(ctx, &a.data)?;
    let text = load_text_checkpoint::<f32>(&ctx.path(&a.text))?;
    let variant = cfg.model.variant;
    let texts = encode_dataset(&d, variant.text_mode(), &text.encoder, &text.head)?;
    let mut model = VisualModel::<f32>::new(cfg.model.visual.clone(), cfg.train.seed)?;
    let outputs = TrainOutputs { dir: ctx.path(&a.out) };
    let eval_seed = cfg.train.seed;
    let jobs = ctx.jobs;
    let probe = |m: &VisualModel<f32>| -> ayce_core::Result<f64> {
        let store = embed_all(m, &text.encoder, &text.head, variant, &d, &assets, eval_seed, jobs)?;
        let report = evaluate_queries(
            &store,
            Direction::TextToVisual,
            cfg.loss.metric,
            RankOrder::Asc,
            cfg.train.mrr_queries,
        )?;
        Ok(report.mrr)
    };
    let history = train_visual(&d, &assets, &texts, &mut model, &cfg, Some(&outputs), Some(&probe))?;
    for r in &history {
        match r.mrr {
            Some(m) => println!("epoch={} loss={:.6} lr={:e} mrr={m:.4}", r.epoch, r.loss, r.lr),
            None => println!("epoch={} loss={:.6} lr={:e}", r.epoch, r.loss, r.lr),
        }
    }
    println!("wrote {}", outputs.checkpoint().display());
    Ok(())
}

fn embed(ctx: &Ctx, a: &EmbedArgs) -> Result<()> {
    let (d, assets) = load_data(ctx, &a.data)?;
    let (model, run_text) = VisualModel::<f32>::load(&ctx.path(&a.model))?;
    let run = RunConfig::from_toml(&run_text).context("reading the run config stored in the model checkpoint")?;
    let text = load_text_checkpoint::<f32>(&ctx.path(&a.text))?;
    let seed = ctx.seed.unwrap_or(run.train.seed);
    println!("seed={seed}");
    println!("variant={}", run.model.variant);
    let store = embed_all(
        &model,
        &text.encoder,
        &text.head,
        run.model.variant,
        &d,
        &assets,
        seed,
        ctx.jobs,
    )?;
    let out = ctx.path(&a.out);
    store.save(&out)?;
    println!("wrote {} entries to {}", store.len(), out.display());
    Ok(())
}

fn print_ranking_config(ctx: &Ctx, r: &RankingArgs, store: &EmbeddingStore) {
    println!("seed={}", ctx.seed.unwrap_or(store.seed));
    println!(
        "direction={} metric={} rank_order={}",
        Direction::from(r.direction),
        Metric::from(r.metric),
        format!("{:?}", r.rank_order).to_lowercase()
    );
}

fn rank_cmd(ctx: &Ctx, a: &RankArgs) -> Result<()> {
    let r = &a.ranking;
    let store = EmbeddingStore::load(&ctx.path(&r.embeds))?;
    print_ranking_config(ctx, r, &store);
    let table = rank(&store, r.direction.into(), r.metric.into(), r.rank_order.into())?;
    let out = ctx.path(&a.out);
    write_submission(&table, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let r = &a.ranking;
    let store = EmbeddingStore::load(&ctx.path(&r.embeds))?;
    print_ranking_config(ctx, r, &store);
    println!("queries={}", QueryMode::from(a.queries));
    let report = evaluate_queries(
        &store,
        r.direction.into(),
        r.metric.into(),
        r.rank_order.into(),
        a.queries.into(),
    )?;
    write_report(&report, &ctx.path(&a.out))?;
    println!("mrr={:.4}", report.mrr);
    println!("top10={:.4}", report.top10);
    Ok(())
}

fn pca_cmd(ctx: &Ctx, a: &PcaArgs) -> Result<()> {
    let store = EmbeddingStore::load(&ctx.path(&a.embeds))?;
    println!("seed={}", ctx.seed.unwrap_or(store.seed));
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for e in &store.entries {
        let rows = match a.side {
            Side::Text => &e.text,
            Side::Visual => &e.visual,
        };
        for (k, row) in rows.iter().enumerate() {
            ids.push(format!("{}#{k}", e.id));
            points.push(row.clone());
        }
    }
    let proj = pca_2d(&points)?;
    if proj.degenerate {
        eprintln!("warning: embeddings span fewer than two dimensions");
    }
    let out = ctx.path(&a.out);
    write_pca_csv(&out, &ids, &proj)?;
    println!(
        "explained_variance={:.6},{:.6}",
        proj.explained_variance[0], proj.explained_variance[1]
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        workdir: cli.workdir,
        jobs: cli.jobs,
        seed: cli.seed,
    };
    if ctx.jobs == 0 {
        bail!(Error::Config("--jobs must be >= 1".into()));
    }
    match &cli.command {
        Command::Gen(a) => gen(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::FinetuneText(a) => finetune(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::Rank(a) => rank_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Pca(a) => pca_cmd(&ctx, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
