//! Command-line surface. Four commands tie the library together: `train`
//! writes a best-validation checkpoint plus its optimization trace, `attack`
//! runs the gradient-sign sweep or the paired minimum-distance L2 study,
//! `transfer` scores checkpoints across datasets, and `grid` exports a
//! decision-boundary map for 2-D models.
//!
//! Every run is reproducible from its settings: explicit flags are merged
//! over an optional plain-text `key = value` config file (flags win), the
//! effective configuration is echoed into the output directory, and repeated
//! runs with the same seed write byte-identical CSVs.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use crate::attack::CwConfig;
use crate::checkpoint::{load_model, save_model};
use crate::data::{half_moons, load_idx, load_semeion, split, synth, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    boundary_grid, cw_csv, cw_study, epsilon_sweep, eval_csv, evaluate, grid_csv, histogram_csv,
    paired_csv, sweep_csv, transfer_test, EvalReport,
};
use crate::nn::{preset, DataShape, Model};
use crate::train::{train, write_trace_csv, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Map library errors onto the documented process exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArg(_) => EXIT_USAGE,
        Error::Shape { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => EXIT_DATA,
        Error::NotFinite { .. }
        | Error::NotPosDef { .. }
        | Error::SingularTriangular { .. }
        | Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "gpdnn",
    version,
    about = "GP hybrid deep networks: training, adversarial attacks, transfer testing"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a preset model; writes the best-validation checkpoint and trace
    Train(TrainArgs),
    /// Generate adversarial examples against trained checkpoints
    #[command(subcommand)]
    Attack(AttackKind),
    /// Score checkpoints on every available dataset (cross table)
    Transfer(TransferArgs),
    /// Export p(class 1) and predictive entropy over a 2-D input grid
    Grid(GridArgs),
}

#[derive(Subcommand, Debug)]
enum AttackKind {
    /// Gradient-sign epsilon sweep generated on one source model
    Fgsm(FgsmArgs),
    /// Paired minimum-distance L2 study over two models
    Cw(CwArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct Common {
    /// plain-text `key = value` settings file; explicit flags override it
    #[arg(long)]
    config: Option<String>,
    /// output directory, created if missing (default: out/<command>)
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug, Default, Clone)]
struct DataFlags {
    /// directory with IDX digit files; falls back to $GPDNN_MNIST_DIR, then
    /// to a generated corpus under the output directory
    #[arg(long)]
    mnist_dir: Option<String>,
    /// Semeion-format digit file; falls back to $GPDNN_SEMEION_PATH, then to
    /// a generated file under the output directory
    #[arg(long)]
    semeion: Option<String>,
    /// images in the generated training corpus
    #[arg(long)]
    synth_train: Option<usize>,
    /// images in the generated test corpus and Semeion file
    #[arg(long)]
    synth_test: Option<usize>,
    /// seed for generated datasets, kept separate from --seed so data stays
    /// fixed while model seeds vary
    #[arg(long)]
    data_seed: Option<u64>,
    /// half-moon points drawn for the train+validation pool
    #[arg(long)]
    moons_n: Option<usize>,
    /// half-moon test points
    #[arg(long)]
    moons_test: Option<usize>,
    /// half-moon noise level
    #[arg(long)]
    moons_noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    /// model preset name (see library presets)
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// fraction of the training split to train on
    #[arg(long)]
    proportion: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// separate learning rate for GP-head parameters
    #[arg(long)]
    lr_gp: Option<f64>,
    /// items held out (from the front of the training files) for validation
    #[arg(long)]
    val_size: Option<usize>,
    /// steps between validation scores
    #[arg(long)]
    val_interval: Option<usize>,
}

#[derive(Args, Debug)]
struct FgsmArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    /// checkpoint the adversarial examples are generated against
    #[arg(long)]
    source: Option<String>,
    /// comma-separated checkpoints to score (default: the source itself)
    #[arg(long)]
    eval: Option<String>,
    /// comma-separated, strictly increasing epsilon list
    #[arg(long)]
    eps: Option<String>,
    /// test images in the attack pool
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct CwArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    /// exactly two comma-separated checkpoints
    #[arg(long)]
    models: Option<String>,
    /// test images in the candidate pool (filtered to items both models
    /// classify correctly)
    #[arg(long)]
    n: Option<usize>,
    /// worker threads for the attack; any count gives identical results
    #[arg(long)]
    threads: Option<usize>,
    /// line-search rounds over the attack constant
    #[arg(long)]
    search_steps: Option<usize>,
    /// initial attack constant
    #[arg(long)]
    c0: Option<f64>,
    /// gradient steps per line-search round
    #[arg(long)]
    cw_iters: Option<usize>,
    /// attack optimizer step size
    #[arg(long)]
    cw_lr: Option<f64>,
    /// confidence margin
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    /// comma-separated checkpoints to score
    #[arg(long)]
    models: Option<String>,
    /// cap on items per dataset (default: all)
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// checkpoint of a model with 2-D input and 2 classes
    #[arg(long)]
    model: Option<String>,
    /// grid resolution per axis
    #[arg(long)]
    steps: Option<usize>,
    /// first input axis range as `lo,hi`
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// second input axis range as `lo,hi`
    #[arg(long, allow_hyphen_values = true)]
    x1: Option<String>,
}

// ---------------------------------------------------------------------------
// Config-file merging
// ---------------------------------------------------------------------------

fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidArg(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Settings resolver: explicit flag > config-file entry > default. Records
/// the effective value of every consulted key so the run can be echoed.
struct Cfg {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    effective: BTreeMap<String, String>,
}

impl Cfg {
    fn new(config: &Option<String>) -> Result<Cfg> {
        let file = match config {
            Some(p) => parse_kv_file(Path::new(p))?,
            None => BTreeMap::new(),
        };
        Ok(Cfg { file, used: BTreeSet::new(), effective: BTreeMap::new() })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::InvalidArg(format!("config key `{}`: cannot parse `{}`", key, raw))
            }),
        }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.effective.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.get_opt(key, flag)?
            .ok_or_else(|| Error::InvalidArg(format!("missing required setting `--{}`", key)))
    }

    fn echo(&mut self, key: &str, value: impl Display) {
        self.effective.insert(key.to_string(), value.to_string());
    }

    fn warn_unused(&self) {
        for k in self.file.keys() {
            if !self.used.contains(k) {
                eprintln!("warning: config key `{}` is not used by this command", k);
            }
        }
    }

    /// Write the effective settings next to the outputs so the run can be
    /// reproduced from the directory alone.
    fn write(&self, out: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.effective {
            text.push_str(&format!("{} = {}\n", k, v));
        }
        std::fs::write(out.join("config.txt"), text)?;
        Ok(())
    }
}

fn out_dir(cfg: &mut Cfg, common: &Common, sub: &str) -> Result<PathBuf> {
    let out = cfg.get("out", common.out.clone(), format!("out/{}", sub))?;
    let p = PathBuf::from(out);
    std::fs::create_dir_all(&p)?;
    Ok(p)
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return Err(Error::InvalidArg(format!("{}: empty list", what)));
    }
    parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::InvalidArg(format!("{}: cannot parse `{}`", what, p)))
        })
        .collect()
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let v = parse_list::<f64>(s, what)?;
    if v.len() != 2 {
        return Err(Error::InvalidArg(format!("{}: expected `lo,hi`", what)));
    }
    Ok((v[0], v[1]))
}

// ---------------------------------------------------------------------------
// Dataset resolution
// ---------------------------------------------------------------------------

const DEFAULT_SYNTH_TRAIN: usize = 2000;
const DEFAULT_SYNTH_TEST: usize = 500;
const DEFAULT_DATA_SEED: u64 = 11;
const DEFAULT_MOONS_N: usize = 700;
const DEFAULT_MOONS_TEST: usize = 500;
const DEFAULT_MOONS_NOISE: f64 = 0.1;

struct DataCfg {
    mnist_dir: Option<PathBuf>,
    semeion: Option<PathBuf>,
    synth_train: usize,
    synth_test: usize,
    data_seed: u64,
    moons_n: usize,
    moons_test: usize,
    moons_noise: f64,
}

fn resolve_data(cfg: &mut Cfg, flags: &DataFlags) -> Result<DataCfg> {
    let path_setting = |cfg: &mut Cfg, key: &str, flag: &Option<String>, env: &str| -> Result<Option<PathBuf>> {
        let v = cfg.get_opt(key, flag.clone())?.or_else(|| std::env::var(env).ok());
        if let Some(v) = &v {
            cfg.echo(key, v);
        }
        Ok(v.map(PathBuf::from))
    };
    Ok(DataCfg {
        mnist_dir: path_setting(cfg, "mnist-dir", &flags.mnist_dir, "GPDNN_MNIST_DIR")?,
        semeion: path_setting(cfg, "semeion", &flags.semeion, "GPDNN_SEMEION_PATH")?,
        synth_train: cfg.get("synth-train", flags.synth_train, DEFAULT_SYNTH_TRAIN)?,
        synth_test: cfg.get("synth-test", flags.synth_test, DEFAULT_SYNTH_TEST)?,
        data_seed: cfg.get("data-seed", flags.data_seed, DEFAULT_DATA_SEED)?,
        moons_n: cfg.get("moons-n", flags.moons_n, DEFAULT_MOONS_N)?,
        moons_test: cfg.get("moons-test", flags.moons_test, DEFAULT_MOONS_TEST)?,
        moons_noise: cfg.get("moons-noise", flags.moons_noise, DEFAULT_MOONS_NOISE)?,
    })
}

/// Locate (or, when falling back to the generated corpus, materialize) the
/// IDX digit directory. A user-supplied directory is never written to.
fn digit_dir(dc: &DataCfg, out: &Path) -> Result<PathBuf> {
    match &dc.mnist_dir {
        Some(d) => Ok(d.clone()),
        None => {
            let d = out.join("synth-data");
            synth::ensure_idx_corpus(&d, dc.synth_train, dc.synth_test, dc.data_seed)?;
            Ok(d)
        }
    }
}

fn digit_sets(dc: &DataCfg, out: &Path) -> Result<(Dataset, Dataset)> {
    let dir = digit_dir(dc, out)?;
    let train = load_idx(&dir.join(synth::TRAIN_IMAGES), &dir.join(synth::TRAIN_LABELS))?
        .with_name("mnist-train");
    let test = load_idx(&dir.join(synth::TEST_IMAGES), &dir.join(synth::TEST_LABELS))?
        .with_name("mnist-test");
    Ok((train, test))
}

fn semeion_set(dc: &DataCfg, out: &Path) -> Result<Dataset> {
    let path = match &dc.semeion {
        Some(p) => p.clone(),
        None => {
            let p = out.join("synth-data").join("semeion.data");
            synth::ensure_semeion_file(&p, dc.synth_test, dc.data_seed)?;
            p
        }
    };
    load_semeion(&path)
}

/// The classes are interleaved in the draw, so contiguous slices stay
/// balanced: the tail is the test set, the head feeds train/validation.
fn moons_sets(dc: &DataCfg) -> Result<(Dataset, Dataset)> {
    let total = dc.moons_n + dc.moons_test;
    let all = half_moons(total, dc.moons_noise, dc.data_seed)?;
    let test =
        all.subset(&(dc.moons_n..total).collect::<Vec<_>>())?.with_name("half-moons-test");
    let pool = all.take(dc.moons_n)?.with_name("half-moons");
    Ok((pool, test))
}

/// (train-pool, test) for whatever input domain the model expects.
fn sets_for(input: &DataShape, dc: &DataCfg, out: &Path) -> Result<(Dataset, Dataset)> {
    match *input {
        DataShape::Vector { dim: 2 } => moons_sets(dc),
        DataShape::Image { h: 28, w: 28, c: 1 } => digit_sets(dc, out),
        ref other => Err(Error::Data(format!(
            "no dataset source for input shape {:?}; supply --mnist-dir",
            other
        ))),
    }
}

/// Load a checkpoint, renaming the model after the file stem so reports can
/// tell two checkpoints of the same architecture apart.
fn load_named(path: &str) -> Result<Model> {
    let mut m = load_model(Path::new(path))?;
    if let Some(stem) = Path::new(path).file_stem().and_then(|s| s.to_str()) {
        m.spec.name = stem.to_string();
    }
    Ok(m)
}

fn print_reports(reports: &[EvalReport]) {
    println!(
        "{:<18} {:<22} {:>6} {:>8} {:>9} {:>8}",
        "dataset", "model", "n", "error", "ll", "entropy"
    );
    for r in reports {
        println!(
            "{:<18} {:<22} {:>6} {:>8.4} {:>9.4} {:>8.4}",
            r.dataset, r.model, r.n, r.error, r.mean_ll, r.mean_entropy
        );
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = Cfg::new(&a.common.config)?;
    let out = out_dir(&mut cfg, &a.common, "train")?;
    let preset_name = cfg.require("preset", a.preset)?;
    let spec = preset(&preset_name)?;
    let seed = cfg.get("seed", a.seed, 0u64)?;
    let proportion = cfg.get("proportion", a.proportion, 1.0)?;
    let defaults = TrainConfig::default();
    let iters = cfg.get("iters", a.iters, defaults.iters)?;
    let batch = cfg.get("batch", a.batch, defaults.batch)?;
    let lr = cfg.get("lr", a.lr, defaults.lr)?;
    let lr_gp = cfg.get_opt("lr-gp", a.lr_gp)?;
    let val_size = cfg.get("val-size", a.val_size, 200usize)?;
    let val_interval = cfg.get("val-interval", a.val_interval, defaults.val_interval)?;
    let dc = resolve_data(&mut cfg, &a.data)?;
    cfg.warn_unused();

    let (pool, test) = sets_for(&spec.input, &dc, &out)?;
    let (train_ds, val_ds) = split(&pool, val_size, proportion, seed)?;
    println!(
        "training {} on {} items (val {}, test {}), {} iterations",
        preset_name,
        train_ds.n(),
        val_ds.n(),
        test.n(),
        iters
    );
    cfg.write(&out)?;

    let model = Model::build(&spec, seed)?;
    let tc = TrainConfig { iters, batch, lr, lr_gp, seed, val_interval, ..defaults };
    let outcome = train(&model, &train_ds, &val_ds, &tc)?;
    save_model(&out.join("model.ckpt"), &outcome.model)?;
    write_trace_csv(&out.join("trace.csv"), &outcome.trace)?;

    println!(
        "best checkpoint: iteration {} (val error {:.4}, val ll {:.4})",
        outcome.best_iter, outcome.best_val_error, outcome.best_val_ll
    );
    let report = evaluate(&outcome.model, &test, 256)?;
    print_reports(&[report]);
    println!("wrote {} and trace.csv", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_fgsm(a: FgsmArgs) -> Result<()> {
    let mut cfg = Cfg::new(&a.common.config)?;
    let out = out_dir(&mut cfg, &a.common, "attack-fgsm")?;
    let source_path: String = cfg.require("source", a.source)?;
    let eval_paths: Vec<String> = match cfg.get_opt::<String>("eval", a.eval)? {
        Some(s) => parse_list(&s, "eval")?,
        None => vec![source_path.clone()],
    };
    cfg.echo("eval", eval_paths.join(","));
    let eps_s = cfg.get("eps", a.eps, "0,0.05,0.1,0.2,0.3,0.4".to_string())?;
    let epsilons = parse_list::<f64>(&eps_s, "eps")?;
    let n = cfg.get("n", a.n, 200usize)?;
    let dc = resolve_data(&mut cfg, &a.data)?;
    cfg.warn_unused();

    let source = load_named(&source_path)?;
    let models: Vec<Model> = eval_paths.iter().map(|p| load_named(p)).collect::<Result<_>>()?;
    let (_, test) = sets_for(&source.spec.input, &dc, &out)?;
    let pool = test.take(n)?;
    cfg.write(&out)?;

    let refs: Vec<&Model> = models.iter().collect();
    let sweep = epsilon_sweep(&refs, &source, &pool, &epsilons, pool.range)?;
    std::fs::write(out.join("sweep.csv"), sweep_csv(&sweep))?;

    println!("gradient-sign sweep on {} ({} images)", sweep.source, pool.n());
    for row in &sweep.rows {
        for rep in &row.reports {
            println!(
                "eps {:<6} {:<22} error {:.4}  ll {:>8.4}  entropy {:.4}",
                row.eps, rep.model, rep.error, rep.mean_ll, rep.mean_entropy
            );
        }
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

fn cmd_cw(a: CwArgs) -> Result<()> {
    let mut cfg = Cfg::new(&a.common.config)?;
    let out = out_dir(&mut cfg, &a.common, "attack-cw")?;
    let models_s: String = cfg.require("models", a.models)?;
    let paths = parse_list::<String>(&models_s, "models")?;
    if paths.len() != 2 {
        return Err(Error::InvalidArg(format!(
            "the paired study needs exactly two checkpoints, got {}",
            paths.len()
        )));
    }
    let n = cfg.get("n", a.n, 100usize)?;
    let threads = cfg.get("threads", a.threads, 1usize)?;
    let cw_defaults = CwConfig::default();
    let search_steps = cfg.get("search-steps", a.search_steps, cw_defaults.search_steps)?;
    let c0 = cfg.get("c0", a.c0, cw_defaults.c0)?;
    let cw_iters = cfg.get("cw-iters", a.cw_iters, cw_defaults.iters)?;
    let cw_lr = cfg.get("cw-lr", a.cw_lr, cw_defaults.lr)?;
    let kappa = cfg.get("kappa", a.kappa, cw_defaults.kappa)?;
    let dc = resolve_data(&mut cfg, &a.data)?;
    cfg.warn_unused();

    let ma = load_named(&paths[0])?;
    let mut mb = load_named(&paths[1])?;
    if mb.spec.name == ma.spec.name {
        mb.spec.name.push_str("-2");
    }
    let (_, test) = sets_for(&ma.spec.input, &dc, &out)?;
    let pool = test.take(n)?;
    cfg.write(&out)?;

    let cw = CwConfig { search_steps, c0, iters: cw_iters, lr: cw_lr, kappa, bounds: pool.range };
    let study = cw_study(&ma, &mb, &pool, &cw, threads)?;

    std::fs::write(out.join("cw.csv"), cw_csv(&study, &ma.spec.name, &mb.spec.name))?;
    std::fs::write(out.join("paired.csv"), paired_csv(&study))?;
    std::fs::write(out.join("histogram.csv"), histogram_csv(&study.histogram))?;

    println!(
        "paired L2 study: {} of {} pool images classified correctly by both models",
        study.kept,
        study.kept + study.skipped
    );
    println!("attack failures: {} {} / {} {}", ma.spec.name, study.fail_a, mb.spec.name, study.fail_b);
    for cell in &study.table {
        println!(
            "adversarials from {:<22} scored by {:<22} n {:>4}  error {:.4}  ll {:>8.4}",
            cell.source, cell.scorer, cell.n, cell.error, cell.mean_ll
        );
    }
    println!(
        "paired distance difference ({} - {}): mean {:.4} over {} pairs",
        mb.spec.name,
        ma.spec.name,
        study.mean_paired_diff,
        study.paired_diffs.len()
    );
    println!("wrote cw.csv, paired.csv, histogram.csv under {}", out.display());
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let mut cfg = Cfg::new(&a.common.config)?;
    let out = out_dir(&mut cfg, &a.common, "transfer")?;
    let models_s: String = cfg.require("models", a.models)?;
    let paths = parse_list::<String>(&models_s, "models")?;
    let n = cfg.get_opt("n", a.n)?;
    let dc = resolve_data(&mut cfg, &a.data)?;
    cfg.warn_unused();

    let models: Vec<Model> = paths.iter().map(|p| load_named(p)).collect::<Result<_>>()?;
    let input = models[0].spec.input;
    let (_, test) = sets_for(&input, &dc, &out)?;
    let mut sets = vec![test];
    if matches!(input, DataShape::Image { h: 28, w: 28, c: 1 }) {
        sets.push(semeion_set(&dc, &out)?);
    }
    if let Some(n) = n {
        sets = sets.iter().map(|s| s.take(n)).collect::<Result<_>>()?;
    }
    cfg.write(&out)?;

    let model_refs: Vec<&Model> = models.iter().collect();
    let set_refs: Vec<&Dataset> = sets.iter().collect();
    let table = transfer_test(&model_refs, &set_refs)?;
    std::fs::write(out.join("transfer.csv"), eval_csv(&table))?;
    print_reports(&table);
    println!("wrote {}", out.join("transfer.csv").display());
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let mut cfg = Cfg::new(&a.common.config)?;
    let out = out_dir(&mut cfg, &a.common, "grid")?;
    let model_path: String = cfg.require("model", a.model)?;
    let steps = cfg.get("steps", a.steps, 200usize)?;
    let x0 = parse_pair(&cfg.get("x0", a.x0, "-3,4".to_string())?, "x0")?;
    let x1 = parse_pair(&cfg.get("x1", a.x1, "-3,3".to_string())?, "x1")?;
    cfg.warn_unused();

    let model = load_named(&model_path)?;
    if !matches!(model.spec.input, DataShape::Vector { dim: 2 }) {
        return Err(Error::InvalidArg(format!(
            "the grid command needs a 2-D-input model, got input {:?}",
            model.spec.input
        )));
    }
    cfg.write(&out)?;

    let rows = boundary_grid(&model, x0, x1, steps)?;
    std::fs::write(out.join("grid.csv"), grid_csv(&rows))?;
    println!(
        "wrote {} grid points ({}x{}) to {}",
        rows.len(),
        steps,
        steps,
        out.join("grid.csv").display()
    );
    Ok(())
}

/// Parse and run; returns the process exit code. Kept separate from `main`
/// so tests can drive the full command surface in-process.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Attack(AttackKind::Fgsm(a)) => cmd_fgsm(a),
        Command::Attack(AttackKind::Cw(a)) => cmd_cw(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}
