//! The `vecformer` command line. [`run`] parses argv, dispatches to the
//! library and maps errors to exit codes: 0 on success, 2 on usage errors,
//! 1 on runtime failures with a one-line JSON error on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::encoder::GraphContext;
use crate::error::{Error, Result};
use crate::evalbench::ablation::{write_rows_csv, CODEBOOK_SIZES, TOKEN_SIZES};
use crate::evalbench::bench::write_scaling_csv;
use crate::evalbench::metrics::positive_scores;
use crate::evalbench::{
    ablate_codebook, ablate_tokens, bench_scaling, des_score, evaluate, model_diagnostics, positivity_mode,
    AttnDiagnostics, BenchConfig, Mechanism, MetricName, SplitTag, DES_THRESHOLD,
};
use crate::graphio::{
    build_knn_correlation_graph, gen_de_labels, gen_module_signals, gen_sbm, gen_spurious_shift, load_graph,
    save_graph, GraphDataset, Labels, SbmConfig, Split, SpuriousConfig,
};
use crate::numerics::SeededRng;
use crate::trainer::{
    bind_vecformer, default_split, grid_search, predict, train_stage1, train_stage2, Checkpoint, SearchSpace, Stage,
    TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "vecformer", version, about = "Two-stage graph-token transformer toolkit")]
struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON training config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic graph container.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Stage one: train encoder, codebooks, fusion and decoders.
    TrainCodebook(TrainCodebookArgs),
    /// Stage two: finetune the graph-token classifier on a stage-one checkpoint.
    Finetune(FinetuneArgs),
    /// Score a stage-two checkpoint on every split.
    Eval(EvalArgs),
    /// Attention statistics of a stage-two checkpoint.
    Diagnose(DiagnoseArgs),
    /// Token-list or codebook size sweep.
    Ablate(AblateArgs),
    /// Training time and memory against node count.
    Bench(BenchArgs),
    /// Hyperparameter sweep over both stages.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SbmArgs {
    /// Comma-separated block sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    blocks: Vec<usize>,
    #[arg(long)]
    p_in: f64,
    #[arg(long)]
    p_out: f64,
    #[arg(long, default_value_t = 8)]
    feat_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    feat_signal: f64,
}

impl SbmArgs {
    fn config(&self) -> SbmConfig {
        SbmConfig::new(self.blocks.clone(), self.p_in, self.p_out).with_features(self.feat_dim, self.feat_signal)
    }
}

#[derive(Subcommand, Debug)]
enum GenKind {
    /// Stochastic block model with class-signal features.
    Sbm {
        #[command(flatten)]
        sbm: SbmArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// SBM plus label-correlated spurious columns and an ID/OOD environment split.
    Spurious {
        #[command(flatten)]
        sbm: SbmArgs,
        #[arg(long, default_value_t = 2)]
        spurious_dim: usize,
        #[arg(long, default_value_t = 0.95)]
        id_corr: f64,
        #[arg(long, default_value_t = 0.05)]
        ood_corr: f64,
        #[arg(long, default_value_t = 0.5)]
        ood_fraction: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Correlation k-NN graph over module-structured signals, labelled by
    /// hop distance from a target node.
    Knn {
        #[arg(long, default_value_t = 200)]
        nodes: usize,
        #[arg(long, default_value_t = 40)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        modules: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Hop radius of the positive set; unbounded if omitted.
        #[arg(long)]
        radius: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args, Debug)]
struct TrainOverrides {
    /// Named size preset, e.g. `cora` or `twitch`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainCodebookArgs {
    /// Graph container directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Stage-one run directory or checkpoint file.
    #[arg(long)]
    stage1: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    freeze_codebooks: bool,
    #[arg(long)]
    freeze_fusion: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Stage-two run directory or checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split JSON; recomputed from the checkpoint config if omitted.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Orthonormalize codes, make projections and fusion nonnegative and
    /// set `W_Q = W_K = I` before measuring.
    #[arg(long)]
    positivity: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationKind {
    Tokens,
    Codebook,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "tokens")]
    kind: AblationKind,
    /// Sizes to sweep; defaults to 4,16,64,256 (tokens) or 2,4,8,16,32 (codebook).
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Seeds per size.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Node counts.
    #[arg(long = "n", value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "dense_node,graph_token")]
    mechanisms: Vec<String>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    /// Token-list size, split as a square.
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON search space; every listed value must lie on the declared grid.
    #[arg(long)]
    space: PathBuf,
    /// Evaluate only the first `budget` points.
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[command(flatten)]
    out: OutArg,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = Globals {
        seed: cli.seed,
        config: cli.config,
    };
    match cli.command {
        Command::Gen { kind } => gen(&g, kind),
        Command::TrainCodebook(a) => train_codebook(&g, a),
        Command::Finetune(a) => finetune(&g, a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Ablate(a) => ablate(&g, a),
        Command::Bench(a) => bench(&g, a),
        Command::Grid(a) => grid(&g, a),
    }
}

struct Globals {
    seed: Option<u64>,
    config: Option<PathBuf>,
}

impl Globals {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Config file, else `fallback`, then explicit flags on top.
    fn train_config(&self, o: &TrainOverrides, fallback: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, &o.preset) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(name)) => TrainConfig::preset(name)?,
            (None, None) => fallback.unwrap_or_default(),
        };
        if let Some(v) = o.lr {
            cfg.lr = v;
        }
        if let Some(v) = o.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = o.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = o.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = o.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = o.codebook_size {
            cfg.m = v;
            cfg.n = v;
        }
        if let Some(v) = o.stage1_epochs {
            cfg.stage1_epochs = v;
        }
        if let Some(v) = o.stage2_epochs {
            cfg.stage2_epochs = v;
        }
        if let Some(v) = o.patience {
            cfg.patience = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(out: &OutArg) -> Result<&Path> {
    std::fs::create_dir_all(&out.out).map_err(|e| Error::io(&out.out, e))?;
    Ok(&out.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

fn read_split(path: &Path) -> Result<Split> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.display().to_string(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}

/// Accepts a run directory holding `default_name` or a checkpoint file.
fn checkpoint_path(p: &Path, default_name: &str) -> PathBuf {
    if p.is_dir() {
        p.join(default_name)
    } else {
        p.to_path_buf()
    }
}

fn gen(g: &Globals, kind: GenKind) -> Result<()> {
    let mut rng = SeededRng::derive(g.seed(), "gen");
    let (ds, out) = match kind {
        GenKind::Sbm { sbm, out } => (gen_sbm(&sbm.config(), &mut rng)?, out),
        GenKind::Spurious {
            sbm,
            spurious_dim,
            id_corr,
            ood_corr,
            ood_fraction,
            out,
        } => {
            let base = gen_sbm(&sbm.config(), &mut rng)?;
            let cfg = SpuriousConfig {
                spurious_dim,
                id_corr,
                ood_corr,
                ood_fraction,
                ..SpuriousConfig::default()
            };
            (gen_spurious_shift(&base, &cfg, &mut rng)?, out)
        }
        GenKind::Knn {
            nodes,
            samples,
            modules,
            noise,
            k,
            target,
            radius,
            out,
        } => {
            let (signals, _) = gen_module_signals(nodes, samples, modules, noise, &mut rng);
            let adjacency = build_knn_correlation_graph(&signals, k)?;
            let labels = gen_de_labels(&adjacency, target, radius)?;
            let labels = Labels::Classes(labels.into_iter().map(usize::from).collect());
            (GraphDataset::new(adjacency, signals, labels, 2)?, out)
        }
    };
    save_graph(&ds, out_dir(&out)?)
}

fn train_codebook(g: &Globals, a: TrainCodebookArgs) -> Result<()> {
    let ds = load_graph(&a.data)?;
    let cfg = g.train_config(&a.overrides, None)?;
    let out = out_dir(&a.out)?;
    let result = train_stage1(&ds, &cfg)?;
    result.checkpoint.save(&out.join("stage1.ckpt"))?;
    write_rows_csv(&result.records, &out.join("stage1_loss.csv"))?;
    write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))
}

fn finetune(g: &Globals, a: FinetuneArgs) -> Result<()> {
    let ds = load_graph(&a.data)?;
    let s1 = Checkpoint::load(&checkpoint_path(&a.stage1, "stage1.ckpt"))?;
    let mut cfg = g.train_config(&a.overrides, Some(s1.config.clone()))?;
    cfg.freeze_encoder |= a.freeze_encoder;
    cfg.freeze_codebooks |= a.freeze_codebooks;
    cfg.freeze_fusion |= a.freeze_fusion;
    let out = out_dir(&a.out)?;
    let split = default_split(&ds, &cfg)?;
    let result = train_stage2(&ds, &split, &s1, &cfg)?;
    result.checkpoint.save(&out.join("stage2.ckpt"))?;
    write_rows_csv(&result.fit.records, &out.join("stage2_metrics.csv"))?;
    write_json(&out.join("split.json"), &split)?;
    write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))
}

fn load_stage2(path: &Path, ds: &GraphDataset, split: Option<&PathBuf>) -> Result<(Checkpoint, Split)> {
    let ck = Checkpoint::load(&checkpoint_path(path, "stage2.ckpt"))?;
    if ck.stage != Stage::Stage2 {
        return Err(Error::Contract(format!("expected a stage-2 checkpoint, got {:?}", ck.stage)));
    }
    if ck.feat_dim != ds.feat_dim() {
        return Err(Error::Contract(format!(
            "checkpoint expects {} features, dataset has {}",
            ck.feat_dim,
            ds.feat_dim()
        )));
    }
    let split = match split {
        Some(p) => read_split(p)?,
        None => default_split(ds, &ck.config)?,
    };
    split.validate(ds.n())?;
    Ok((ck, split))
}

fn split_masks(split: &Split) -> Vec<(SplitTag, &[usize])> {
    let mut v = vec![
        (SplitTag::Train, split.train.as_slice()),
        (SplitTag::Val, split.val.as_slice()),
        (SplitTag::Test, split.test.as_slice()),
    ];
    if let Some(ood) = &split.ood_test {
        v.push((SplitTag::OodTest, ood.as_slice()));
    }
    v
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_graph(&a.data)?;
    let (ck, split) = load_stage2(&a.checkpoint, &ds, a.split.as_ref())?;
    let model = bind_vecformer(&ck)?;
    let logits = predict(&model, &ck.params, &GraphContext::new(&ds.adjacency), &ds)?;
    let kind = MetricName::for_labels(&ds.labels, ds.num_classes);
    let mut csv = String::from("split,metric,value,n_evaluated\n");
    for (tag, mask) in split_masks(&split) {
        if mask.is_empty() {
            continue;
        }
        match evaluate(&logits, &ds.labels, kind, mask, tag) {
            Ok(r) => csv.push_str(&format!("{},{},{},{}\n", tag.as_str(), r.name.as_str(), r.value, r.n_evaluated)),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    // Two-class data also gets DES over the test nodes.
    if let (Some(y), 2) = (ds.labels.classes(), ds.num_classes) {
        let scores = positive_scores(&logits, &ds.labels, 1)?;
        let probs: Vec<f64> = split.test.iter().map(|&i| scores[i]).collect();
        let truth: Vec<usize> = (0..split.test.len()).filter(|&k| y[split.test[k]] == 1).collect();
        if !truth.is_empty() {
            let r = des_score(&probs, &truth, None, DES_THRESHOLD)?;
            csv.push_str(&format!("test,{},{},{}\n", r.name.as_str(), r.value, r.n_evaluated));
        }
    }
    write_text(&out_dir(&a.out)?.join("metrics.csv"), &csv)
}

#[derive(Serialize)]
struct DiagnosticsEntry {
    split: &'static str,
    nodes: usize,
    mean_std: f64,
    min_qk: f64,
    mean_kl: f64,
}

#[derive(Serialize)]
struct DiagnosticsFile {
    positivity_mode: bool,
    tokens: usize,
    splits: Vec<DiagnosticsEntry>,
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let ds = load_graph(&a.data)?;
    let (mut ck, split) = load_stage2(&a.checkpoint, &ds, a.split.as_ref())?;
    let mut model = bind_vecformer(&ck)?;
    if a.positivity {
        model = positivity_mode(&mut ck.params, &model)?;
    }
    let out = out_dir(&a.out)?;
    let all: Vec<usize> = (0..ds.n()).collect();
    let full: AttnDiagnostics = model_diagnostics(&model, &ck.params, &ds, &all)?;
    let mut attn = String::from("node,std\n");
    for (i, s) in full.row_std.iter().enumerate() {
        attn.push_str(&format!("{i},{s}\n"));
    }
    write_text(&out.join("attn.csv"), &attn)?;
    let mut splits = Vec::new();
    for (tag, mask) in split_masks(&split) {
        if mask.is_empty() {
            continue;
        }
        let d = model_diagnostics(&model, &ck.params, &ds, mask)?;
        splits.push(DiagnosticsEntry {
            split: tag.as_str(),
            nodes: mask.len(),
            mean_std: d.mean_std,
            min_qk: d.min_qk,
            mean_kl: d.mean_kl,
        });
    }
    splits.push(DiagnosticsEntry {
        split: SplitTag::All.as_str(),
        nodes: ds.n(),
        mean_std: full.mean_std,
        min_qk: full.min_qk,
        mean_kl: full.mean_kl,
    });
    write_json(
        &out.join("diagnostics.json"),
        &DiagnosticsFile {
            positivity_mode: a.positivity,
            tokens: model.tokens.len(),
            splits,
        },
    )
}

fn ablate(g: &Globals, a: AblateArgs) -> Result<()> {
    let ds = load_graph(&a.data)?;
    let cfg = g.train_config(&a.overrides, None)?;
    let out = out_dir(&a.out)?;
    match a.kind {
        AblationKind::Tokens => {
            let sizes = if a.sizes.is_empty() { TOKEN_SIZES.to_vec() } else { a.sizes };
            let split = default_split(&ds, &cfg)?;
            let r = ablate_tokens(&ds, &split, &sizes, &cfg, &a.seeds)?;
            write_rows_csv(&r.rows, &out.join("ablation_tokens.csv"))
        }
        AblationKind::Codebook => {
            let sizes = if a.sizes.is_empty() { CODEBOOK_SIZES.to_vec() } else { a.sizes };
            let r = ablate_codebook(&ds, &sizes, &cfg, &a.seeds)?;
            write_rows_csv(&r.rows, &out.join("ablation_codebook.csv"))
        }
    }
}

fn bench(g: &Globals, a: BenchArgs) -> Result<()> {
    let mechanisms = a
        .mechanisms
        .iter()
        .map(|m| m.parse::<Mechanism>())
        .collect::<Result<Vec<_>>>()?;
    let (n_f, n_s) = crate::evalbench::square_factorization(a.tokens)?;
    let cfg = BenchConfig {
        trials: a.trials,
        epochs: a.epochs,
        hidden_dim: a.hidden_dim,
        n_f,
        n_s,
        ..BenchConfig::default()
    };
    let records = bench_scaling(&a.n, &mechanisms, &cfg, g.seed())?;
    write_scaling_csv(&records, &out_dir(&a.out)?.join("scaling.csv"))
}

fn grid(g: &Globals, a: GridArgs) -> Result<()> {
    let ds = load_graph(&a.data)?;
    let base = g.train_config(&a.overrides, None)?;
    let text = std::fs::read_to_string(&a.space).map_err(|e| Error::io(&a.space, e))?;
    let space: SearchSpace = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let out = out_dir(&a.out)?;
    let split = default_split(&ds, &base)?;
    let result = grid_search(&ds, &split, &base, &space, a.budget)?;
    result.write_csv(&out.join("leaderboard.csv"))?;
    write_text(&out.join("best_config.json"), &(result.best.to_json() + "\n"))
}
