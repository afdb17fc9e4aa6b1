use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use featalign::config::{Mode, RunConfig};
use featalign::data::{generate, load_dataset, save_dataset, Dataset, LocalizationSample, Split};
use featalign::evaluate::{decompose_sample, evaluate, infer, Evaluation, MapSource};
use featalign::model::{load_checkpoint, save_checkpoint, Model};
use featalign::suite::gradient_suite;
use featalign::tensor::{write_ften, GradCheckOptions};
use featalign::train::{train, Progress};
use featalign::Error;

#[derive(Parser)]
#[command(name = "featalign", version, about = "CAM decomposition and feature direction alignment")]
struct Cli {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (and the dataset seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Cam,
    Norm,
    Sim,
}

impl From<SourceArg> for MapSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Cam => MapSource::Cam,
            SourceArg::Norm => MapSource::Norm,
            SourceArg::Sim => MapSource::Sim,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cam")]
    map_source: SourceArg,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        /// Replace an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and evaluate it on the test split.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint: report JSON and threshold sweep CSV.
    Eval(EvalArgs),
    /// Threshold sweep CSV only.
    Sweep(EvalArgs),
    /// Dump the norm, similarity, normalized norm and CAM maps of one image.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class to decompose for; defaults to the ground-truth label.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Finite-difference checks of every layer and loss on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Corrupts the analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) => Failure::Usage(msg),
            Error::NonFinite { .. } | Error::DivergedLoss { .. } | Error::GradCheck(_) => Failure::Numeric(msg),
            Error::Shape { .. } | Error::Data { .. } | Error::Io { .. } | Error::Json { .. } => Failure::Data(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn load_data(cfg: &RunConfig, dir: Option<&PathBuf>) -> Result<Dataset, Failure> {
    let dir = dir.unwrap_or(&cfg.dataset_dir);
    Ok(load_dataset(dir)?)
}

fn check_classes(model: &Model, data: &Dataset) -> CmdResult {
    let (m, d) = (model.config().num_classes, data.spec.num_classes);
    if m != d {
        return Err(Failure::Data(format!("checkpoint has {m} classes but the dataset has {d}")));
    }
    if model.config().input_size != data.spec.image_size {
        return Err(Failure::Data(format!(
            "checkpoint expects {}px images but the dataset has {}px",
            model.config().input_size,
            data.spec.image_size
        )));
    }
    Ok(())
}

fn cmd_gen_data(cli: &Cli, dataset: &Option<PathBuf>, classes: Option<usize>, force: bool) -> CmdResult {
    let cfg = load_config(cli)?;
    let mut spec = cfg.data.clone();
    if let Some(c) = classes {
        spec.num_classes = c;
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let dir = dataset.clone().unwrap_or(cfg.dataset_dir);
    if dir.exists() && fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
        if !force {
            return Err(Failure::Usage(format!("{} already exists (use --force)", dir.display())));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let data = generate(&spec)?;
    save_dataset(&data, &dir)?;
    println!(
        "{}",
        serde_json::json!({
            "dataset": dir,
            "classes": spec.num_classes,
            "train": data.train.len(),
            "val": data.val.len(),
            "test": data.test.len(),
        })
    );
    Ok(())
}

fn histogram_csvs(out: &Path, prefix: &str, e: &Evaluation) -> CmdResult {
    write_file(&out.join(format!("{prefix}hist_sim.csv")), e.sim_histogram.to_csv())?;
    write_file(&out.join(format!("{prefix}hist_norm.csv")), e.norm_histogram.to_csv())
}

fn diagnostics(e: &Evaluation) -> serde_json::Value {
    serde_json::json!({
        "mean_sim_in_mask": e.mean_sim_in_mask,
        "sim_mass_above_half": e.sim_mass_above_half,
    })
}

fn cmd_train(cli: &Cli, dataset: &Option<PathBuf>, mode: Option<ModeArg>, epochs: Option<usize>) -> CmdResult {
    let mut cfg = load_config(cli)?;
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::Full => Mode::Full,
        };
    }
    if let Some(n) = epochs {
        cfg.epochs = n;
    }
    if let Some(d) = dataset {
        cfg.dataset_dir = d.clone();
    }
    let data = load_data(&cfg, None)?;
    cfg.data = data.spec.clone();
    cfg.model.num_classes = data.spec.num_classes;
    cfg.model.input_size = data.spec.image_size;
    cfg.validate()?;

    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    cfg.save(&out.join("config.json"))?;

    let init = Model::init(cfg.model.clone(), cfg.seed)?;
    let init_eval = evaluate(&init, &data.test, MapSource::Cam, &cfg.eval)?;
    histogram_csvs(&out, "init_", &init_eval)?;

    let stderr = std::io::stderr();
    let outcome = train(&cfg, &data, |p| {
        let _ = match p {
            Progress::Pretrain(r) => writeln!(
                stderr.lock(),
                "pretrain {:>3} ce {:.4} acc {:.3} val_gt_loc {:.3}",
                r.epoch,
                r.l_ce,
                r.train_acc,
                r.val_gt_loc
            ),
            Progress::Epoch(r) => writeln!(
                stderr.lock(),
                "epoch {:>3} {:?} ce {:.4} sim {:.4} norm {:.4} drop {:.4} acc {:.3} val_gt_loc {:.3}",
                r.epoch,
                r.stage,
                r.l_ce,
                r.l_sim,
                r.l_norm,
                r.l_drop,
                r.train_acc,
                r.val_gt_loc
            ),
        };
    })?;
    write_file(&out.join("train_log.json"), to_json(&outcome.log))?;
    save_checkpoint(&outcome.model, &out.join("checkpoint"))?;
    save_checkpoint(&outcome.best, &out.join("best"))?;

    let final_eval = evaluate(&outcome.model, &data.test, MapSource::Cam, &cfg.eval)?;
    write_file(&out.join("eval_report.json"), to_json(&final_eval.report))?;
    write_file(&out.join("sweep.csv"), final_eval.curve.to_csv())?;
    histogram_csvs(&out, "", &final_eval)?;
    let diag = serde_json::json!({ "init": diagnostics(&init_eval), "final": diagnostics(&final_eval) });
    write_file(&out.join("diagnostics.json"), to_json(&diag))?;
    println!("{}", serde_json::to_string(&final_eval.report).expect("serializable"));
    Ok(())
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<(RunConfig, Evaluation), Failure> {
    let cfg = load_config(cli)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&cfg, args.dataset.as_ref())?;
    check_classes(&model, &data)?;
    let samples = data.split(args.split.into());
    let e = evaluate(&model, samples, args.map_source.into(), &cfg.eval)?;
    Ok((cfg, e))
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> CmdResult {
    let (cfg, e) = run_eval(cli, args)?;
    let source = MapSource::from(args.map_source).name();
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_file(&out.join(format!("eval_{source}.json")), to_json(&e.report))?;
    write_file(&out.join(format!("sweep_{source}.csv")), e.curve.to_csv())?;
    println!("{}", serde_json::to_string(&e.report).expect("serializable"));
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &EvalArgs) -> CmdResult {
    let (cfg, e) = run_eval(cli, args)?;
    let source = MapSource::from(args.map_source).name();
    create_dir(&cfg.output_dir)?;
    let csv = e.curve.to_csv();
    write_file(&cfg.output_dir.join(format!("sweep_{source}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

/// 8-bit PGM of a map scaled from `[lo, hi]`.
fn pgm(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let range = hi - lo;
    out.extend(values.iter().map(|v| {
        if range > 0.0 {
            (((v - lo) / range).clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

fn pick_sample(data: &Dataset, split: Split, index: usize) -> Result<&LocalizationSample, Failure> {
    let samples = data.split(split);
    samples.get(index).ok_or_else(|| {
        Failure::Usage(format!(
            "index {index} out of range for {} split of {} images",
            split.name(),
            samples.len()
        ))
    })
}

fn cmd_decompose(
    cli: &Cli,
    checkpoint: &Path,
    dataset: &Option<PathBuf>,
    split: SplitArg,
    index: usize,
    class: Option<usize>,
) -> CmdResult {
    let cfg = load_config(cli)?;
    let model = load_checkpoint(checkpoint)?;
    let data = load_data(&cfg, dataset.as_ref())?;
    check_classes(&model, &data)?;
    let sample = pick_sample(&data, split.into(), index)?;
    let class = class.unwrap_or(sample.label);
    if class >= model.config().num_classes {
        return Err(Failure::Usage(format!(
            "class {class} out of range for {} classes",
            model.config().num_classes
        )));
    }
    let inf = infer(&model, sample)?;
    let d = decompose_sample(&model, &inf, class)?;
    let out = cfg.output_dir.join("decompose");
    create_dir(&out)?;
    for (name, tensor) in d.as_tensors() {
        write_ften(&out.join(format!("{name}.ften")), &tensor)?;
        let values = tensor.data();
        let (lo, hi) = match name {
            "sim" => (-1.0, 1.0),
            _ => featalign::tensor::extrema(values),
        };
        write_file(&out.join(format!("{name}.pgm")), pgm(d.width, d.height, values, lo, hi))?;
    }
    let meta = serde_json::json!({
        "split": Split::from(split).name(),
        "index": index,
        "label": sample.label,
        "class": class,
        "weight_norm": d.weight_norm,
        "height": d.height,
        "width": d.width,
        "logits": inf.logits,
    });
    write_file(&out.join("meta.json"), to_json(&meta))?;
    println!("{}", serde_json::to_string(&meta).expect("serializable"));
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, tol: f64, eps: f64, inject_fault: bool) -> CmdResult {
    let seed = cli.seed.unwrap_or(0);
    let opts = GradCheckOptions { eps, tol, inject_fault };
    let report = gradient_suite(opts, seed)?;
    for e in &report.entries {
        println!(
            "{:<24} max_rel_err {:.3e} {}",
            e.name,
            e.max_rel_error,
            if e.passed { "PASS" } else { "FAIL" }
        );
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
        Err(Failure::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::GenData { dataset, classes, force } => cmd_gen_data(cli, dataset, *classes, *force),
        Command::Train { dataset, mode, epochs } => cmd_train(cli, dataset, *mode, *epochs),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Sweep(args) => cmd_sweep(cli, args),
        Command::Decompose {
            checkpoint,
            dataset,
            split,
            index,
            class,
        } => cmd_decompose(cli, checkpoint, dataset, *split, *index, *class),
        Command::Gradcheck { tol, eps, inject_fault } => cmd_gradcheck(cli, *tol, *eps, *inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERR_USAGE: {line}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, tag, msg) = match f {
                Failure::Usage(m) => (1, "ERR_USAGE", m),
                Failure::Data(m) => (2, "ERR_DATA", m),
                Failure::Numeric(m) => (3, "ERR_NUMERIC", m),
            };
            eprintln!("{tag}: {}", msg.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
