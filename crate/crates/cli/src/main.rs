mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};

use docparse_core::data::corpus::MANIFEST;
use docparse_core::data::{load_split, split_dataset, split_sizes, synth_generate, write_corpus, Splits, SPLITS};
use docparse_core::model::DocParseNet;
use docparse_core::profile::cost_report;
use docparse_core::train::{evaluate, train};
use docparse_core::{Error, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "docparse", version, about = "Document field segmentation: data, training, evaluation, profiling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic corpus with an 8-1-1 split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Page size, `HxW` or a single number.
        #[arg(long, default_value = "288x288")]
        page: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory, replacing an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes metrics.jsonl, best.dtf, final.dtf and config.txt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse an output directory that already holds a run.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// When given, its model keys must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics file; defaults to `<checkpoint>.<split>.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parameter and FLOP accounting for a config.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 4,
        Error::Data(_) | Error::Io { .. } | Error::Format(_) | Error::Lookup(_) | Error::Generation(_) => 3,
        _ => 2,
    }
}

fn with_seed(overrides: &[String], seed: Option<u64>) -> Vec<String> {
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    all
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.display().to_string(), source: e }
}

fn parse_page(s: &str) -> Result<(usize, usize)> {
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad --page `{s}`")));
    match s.split_once('x') {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(s).map(|v| (v, v)),
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn gen_data(out: &Path, n: usize, page: &str, seed: u64, force: bool) -> Result<()> {
    let page = parse_page(page)?;
    split_sizes(n)?;
    if is_nonempty_dir(out) {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to replace the corpus", out.display())));
        }
        for split in SPLITS {
            let dir = out.join(split);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(io(&dir))?;
            }
        }
    }
    let all = synth_generate(n, page, seed)?;
    let (train, val, test) = split_dataset(&all, seed)?;
    let splits = Splits { train, val, test };
    write_corpus(out, &splits)?;
    for split in SPLITS {
        println!("{split} {}", splits.get(split).map_or(0, <[_]>::len));
    }
    let manifest = out.join(MANIFEST);
    let bytes = fs::read(&manifest).map_err(io(&manifest))?;
    let sum: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    println!("manifest {} sha256 {sum}", manifest.display());
    Ok(())
}

const RUN_FILES: [&str; 4] = ["metrics.jsonl", "best.dtf", "final.dtf", "config.txt"];

fn run_train(config: Option<&Path>, data: &Path, out: &Path, overrides: &[String], force: bool) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let provider = cfg.provider()?;
    let train_set = load_split(data, "train")?;
    let val_set = load_split(data, "val")?;
    fs::create_dir_all(out).map_err(io(out))?;
    for f in RUN_FILES {
        let p = out.join(f);
        if p.exists() {
            if !force {
                return Err(Error::Config(format!("{} already exists; pass --force to start over", p.display())));
            }
            fs::remove_file(&p).map_err(io(&p))?;
        }
    }
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(io(out))?;
    let mut model = DocParseNet::<f32>::build(&cfg.model)?;
    let mut tc = cfg.train.clone();
    tc.log_path = Some(out.join("metrics.jsonl"));
    tc.checkpoint_path = Some(out.join("best.dtf"));
    let outcome = train(&mut model, &tc, &train_set, &val_set, &provider)?;
    model.save(out.join("final.dtf"))?;
    for r in &outcome.history {
        println!("epoch {} loss {:.6} miou {:.4} ({:.1}s)", r.epoch, r.loss, r.miou, r.seconds);
    }
    println!("best epoch {} miou {:.4}; {} steps", outcome.best_epoch, outcome.best_miou, outcome.steps);
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, split: &str, config: Option<&Path>, overrides: &[String], report: Option<&Path>) -> Result<()> {
    let model = DocParseNet::<f32>::load(checkpoint)?;
    let mut cfg = RunConfig::load(config, overrides)?;
    if config.is_some() {
        if let Some(field) = cfg.model.first_difference(&model.cfg) {
            return Err(Error::Schema {
                field: field.to_string(),
                reason: format!(
                    "config has `{}` but the checkpoint was built with `{}`",
                    cfg.model.get(field).unwrap_or_default(),
                    model.cfg.get(field).unwrap_or_default()
                ),
            });
        }
    }
    cfg.model = model.cfg.clone();
    let samples = load_split(data, split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no samples in split `{split}` of {}", data.display())));
    }
    let r = evaluate(&model, &samples, &cfg.provider()?, cfg.train.iou_mode, cfg.train.batch_size)?;
    println!("{r}");
    let path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".{split}.json"));
        checkpoint.with_file_name(name)
    });
    fs::write(&path, r.to_json_line() + "\n").map_err(io(&path))?;
    Ok(())
}

fn run_profile(config: Option<&Path>, overrides: &[String], batch: usize) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let model = DocParseNet::<f32>::build(&cfg.model)?;
    let r = cost_report(&model, cfg.model.crop, batch.max(1))?;
    println!("{r}");
    print!("{}", r.machine_lines());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DOCPARSE_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("DOCPARSE_THREADS=`{v}` is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.cmd {
        Cmd::GenData { out, n, page, seed, force } => gen_data(&out, n, &page, seed, force),
        Cmd::Train { config, data, out, overrides, seed, force } => {
            run_train(config.as_deref(), &data, &out, &with_seed(&overrides, seed), force)
        }
        Cmd::Eval { checkpoint, data, split, config, overrides, seed, report } => {
            run_eval(&checkpoint, &data, &split, config.as_deref(), &with_seed(&overrides, seed), report.as_deref())
        }
        Cmd::Profile { config, overrides, seed, batch } => run_profile(config.as_deref(), &with_seed(&overrides, seed), batch),
    }
}

fn main() -> ExitCode {
    let keys = RunConfig::help_text();
    let cmd = Cli::command().after_help(keys.clone()).mut_subcommands(|s| s.after_help(keys.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
