mod run_config;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use diffcore::ModelParams;
use mmsbr::config::{HyperParams, Precision, Variant};
use mmsbr::dataset::{write_interactions, SessionCorpus};
use mmsbr::embedding::{reduce_bundle, synthesize, ModalityBundle};
use mmsbr::evalkit::{
    ablate, buckets_csv, evaluate, metrics_csv, popularity_baseline, EvalReport, MetricRow, Split, DEFAULT_KS,
};
use mmsbr::model::init_params;
use mmsbr::trainer::{gradient_check, train_from};

use run_config::{expand_grid, RunConfig};

#[derive(Parser)]
#[command(name = "mmsbr", version, about = "Multimodal session-based recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log, corpus and raw embeddings.
    Synth(Common),
    /// Train one variant and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test splits.
    Eval(Common),
    /// Train and evaluate every variant from the same seed.
    Ablate(Common),
    /// Finite-difference check of the joint loss on a small model.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus and embedding directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    literal_eq6: bool,
    #[arg(long)]
    literal_eq23: bool,
    #[arg(long)]
    literal_eq26: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Grid over R/C/T, e.g. `--grid R=3,4 C=4 T=4`.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
}

impl Common {
    /// File values, then `--set`, then the dedicated flags.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let mut flag = |k: &str, v: Option<String>| -> anyhow::Result<()> {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
            Ok(())
        };
        flag("seed", self.seed.map(|s| s.to_string()))?;
        flag("out", self.out.as_ref().map(|p| p.display().to_string()))?;
        flag("data", self.data.as_ref().map(|p| p.display().to_string()))?;
        flag("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()))?;
        flag("variant", self.variant.clone())?;
        for (k, on) in [
            ("literal_eq6", self.literal_eq6),
            ("literal_eq23", self.literal_eq23),
            ("literal_eq26", self.literal_eq26),
        ] {
            if on {
                cfg.set(k, "true")?;
            }
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|()| run(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MMSBR_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MMSBR_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(c) => cmd_synth(&c.resolve()?),
        Command::Train(t) => cmd_train(&t.common.resolve()?, &t.grid),
        Command::Eval(c) => cmd_eval(&c.resolve()?),
        Command::Ablate(c) => cmd_ablate(&c.resolve()?),
        Command::Gradcheck(c) => cmd_gradcheck(&c.resolve()?),
    }
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn prepare_out(cfg: &RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    let out = cfg.out();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    write(&out.join(format!("{command}.config.txt")), &cfg.render())?;
    Ok(out)
}

fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let synth = cfg.synth()?;
    let corpus_cfg = cfg.corpus()?;
    let out = prepare_out(cfg, "synth")?;
    let s = synthesize(&synth, &corpus_cfg)?;
    write_interactions(&out.join("interactions.csv"), &s.interactions)?;
    s.corpus.write_dir(&out)?;
    s.raw.save_dir(&out)?;

    let mut manifest = String::from("file,rows,cols\n");
    manifest += &format!("interactions.csv,{},5\n", s.interactions.len());
    manifest += &format!("items.csv,{},4\n", s.corpus.n_items());
    for m in s.raw.matrices() {
        manifest += &format!("{}.mmeb,{},{}\n", m.kind.name(), m.rows(), m.dim());
    }
    write(&out.join("manifest.csv"), &manifest)?;
    println!(
        "synth: {} items, {} train / {} val / {} test sessions -> {}",
        s.corpus.n_items(),
        s.corpus.sessions_train.len(),
        s.corpus.sessions_val.len(),
        s.corpus.sessions_test.len(),
        out.display()
    );
    Ok(())
}

/// Corpus plus embeddings reduced to width `d` (PCA on training items when
/// the files are wider).
fn load_data(cfg: &RunConfig, hyper: &HyperParams) -> anyhow::Result<(SessionCorpus, ModalityBundle)> {
    let dir = cfg.data();
    let corpus =
        SessionCorpus::read_dir(&dir).with_context(|| format!("cannot load corpus from {}", dir.display()))?;
    let bundle = ModalityBundle::load_dir(&dir, corpus.n_items())
        .with_context(|| format!("cannot load embeddings from {}", dir.display()))?;
    let bundle = match bundle.dim() {
        w if w == hyper.d => bundle,
        w if w > hyper.d => reduce_bundle(&bundle, hyper.d, &corpus.train_rows(), cfg.pca_fit()?)?,
        w => bail!("embeddings are {w} wide, narrower than d={}", hyper.d),
    };
    Ok((corpus, bundle))
}

fn save_checkpoint(path: &Path, params: &ModelParams<f64>) -> anyhow::Result<()> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    params.write_checkpoint(std::io::BufWriter::new(f))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<ModelParams<f64>> {
    let f = fs::File::open(path).with_context(|| format!("missing checkpoint {}", path.display()))?;
    Ok(ModelParams::read_checkpoint(BufReader::new(f))?)
}

fn cmd_train(cfg: &RunConfig, grid: &[String]) -> anyhow::Result<()> {
    if grid.is_empty() {
        let out = prepare_out(cfg, "train")?;
        let (prec, epoch) = train_one(cfg, &out)?;
        println!("train: best val Prec@20 {prec:.2} at epoch {epoch} -> {}", out.display());
        return Ok(());
    }
    let root = prepare_out(cfg, "train")?;
    let mut summary = String::from("r_layers,c_features,t_pivot,best_epoch,val_prec20\n");
    for combo in expand_grid(grid)? {
        let mut sub = cfg.clone();
        let mut name = Vec::new();
        for (k, v) in &combo {
            sub.set(k, v)?;
            name.push(format!("{k}{v}"));
        }
        let dir = root.join(name.join("_"));
        sub.set("out", &dir.display().to_string())?;
        let out = prepare_out(&sub, "train")?;
        let (prec, epoch) = train_one(&sub, &out)?;
        summary += &format!(
            "{},{},{},{epoch},{prec:.2}\n",
            sub.get("r_layers"),
            sub.get("c_features"),
            sub.get("t_pivot")
        );
        println!("train: {} best val Prec@20 {prec:.2}", name.join(" "));
    }
    write(&root.join("grid.csv"), &summary)
}

fn train_one(cfg: &RunConfig, out: &Path) -> anyhow::Result<(f64, usize)> {
    let hyper = cfg.hyper()?;
    let variant = cfg.variant()?;
    let (corpus, bundle) = load_data(cfg, &hyper)?;
    let init = init_params(&hyper, variant, corpus.n_categories(), hyper.seed)?;
    let result = train_from(&corpus, &bundle, &hyper, variant, init)?;
    save_checkpoint(&out.join("checkpoint.ckpt"), &result.params)?;
    write(&out.join("train_log.csv"), &result.log_text())?;
    let best = result
        .log
        .iter()
        .find(|r| r.epoch == result.best_epoch)
        .map_or(0.0, |r| r.val_prec20);
    Ok((best, result.best_epoch))
}

fn eval_splits(corpus: &SessionCorpus) -> Vec<Split> {
    let mut splits = vec![Split::Test, Split::TestPlus];
    if !corpus.cold_items.is_empty() {
        splits.push(Split::ColdTargets);
    }
    splits
}

fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let hyper = cfg.hyper()?;
    let variant = cfg.variant()?;
    let params = load_checkpoint(&cfg.checkpoint())?;
    let out = prepare_out(cfg, "eval")?;
    let (corpus, bundle) = load_data(cfg, &hyper)?;
    let splits = eval_splits(&corpus);
    let EvalReport { mut rows, buckets } = evaluate(&params, &corpus, &bundle, &hyper, variant, &splits, &DEFAULT_KS)?;
    rows.extend(popularity_baseline(&corpus, &splits, &DEFAULT_KS)?);
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write(&out.join("buckets.csv"), &buckets_csv(&buckets))?;
    print!("{}", metrics_csv(&rows));
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<()> {
    let hyper = cfg.hyper()?;
    let variants = cfg.variants()?;
    let out = prepare_out(cfg, "ablate")?;
    let (corpus, bundle) = load_data(cfg, &hyper)?;
    let splits = eval_splits(&corpus);
    let runs = ablate(&corpus, &bundle, &hyper, &variants, &splits, &DEFAULT_KS)?;

    let mut rows: Vec<MetricRow> = Vec::new();
    let mut summary = String::from("variant,best_epoch,prec10,mrr10,prec20,mrr20\n");
    for run in &runs {
        let name = run.variant.name();
        write(&out.join(format!("{name}.train_log.csv")), &run.output.log_text())?;
        if cfg.save_checkpoints()? {
            save_checkpoint(&out.join(format!("{name}.ckpt")), &run.output.params)?;
        }
        let test: Vec<&MetricRow> = run.report.rows.iter().filter(|r| r.split == "test").collect();
        let at = |k: usize| test.iter().find(|r| r.k == k).map_or((0.0, 0.0), |r| (r.prec, r.mrr));
        let ((p10, m10), (p20, m20)) = (at(10), at(20));
        summary += &format!("{name},{},{p10:.2},{m10:.2},{p20:.2},{m20:.2}\n", run.output.best_epoch);
        rows.extend(run.report.rows.iter().cloned());
    }
    rows.extend(popularity_baseline(&corpus, &splits, &DEFAULT_KS)?);
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write(&out.join("ablation.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Runs on the configured corpus with the model shrunk to d=8, C=2, T=2,
/// R=2 in f64.
fn cmd_gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    for (k, v) in [("d", "8"), ("c_features", "2"), ("t_pivot", "2"), ("r_layers", "2")] {
        cfg.set(k, v)?;
    }
    let hyper = HyperParams {
        precision: Precision::F64,
        ..cfg.hyper()?
    };
    let variant: Variant = cfg.variant()?;
    let (batch, step, tol) = cfg.gradcheck()?;
    let out = prepare_out(&cfg, "gradcheck")?;
    let (corpus, bundle) = load_data(&cfg, &hyper)?;
    let report = gradient_check(&corpus, &bundle, &hyper, variant, batch, step, tol)?;
    let text = report.to_string();
    write(&out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if !report.passed() {
        bail!("gradient check failed (max relative error {:.3e})", report.max_rel_error());
    }
    Ok(())
}
