//! `dmt`: generate synthetic domains, meta-train, meta-test and inspect the
//! feature transforms.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dmt_core::episodes::{
    domain_stats, gen_domain, inspect_transform, load_dataset, meta_test, meta_train, save_dataset, transform_csv,
    Combine, DataSpec, Dataset, EpisodeSpec, FeatureBank, TestConfig, TrainConfig, TrainState, TsfConfig, TsfGroup,
};
use dmt_core::{netpbm, Checkpoint, Error};

const SEED_ENV: &str = "DMT_SEED";

#[derive(Parser)]
#[command(name = "dmt", version, about = "Cross-domain few-shot segmentation on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the source and target domains as PPM/PGM plus a manifest each.
    GenData {
        /// Generation plan (JSON); defaults to one source and two targets.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Episodic training on the source domain.
    MetaTrain {
        /// Run configuration (JSON); see the README for the schema.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; episode numbering carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Source domain directory; overrides the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Episodes to run; overrides the config.
        #[arg(long)]
        episodes: Option<usize>,
        /// Training log CSV; defaults to the checkpoint path with `.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a domain, with and without self-finetuning.
    MetaTest {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        domain: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 1)]
        queries: usize,
        /// Disable self-finetuning (steps = 0).
        #[arg(long)]
        no_tsf: bool,
        #[arg(long, value_enum, default_value_t = CombineArg::F)]
        combine: CombineArg,
        #[arg(long)]
        tsf_steps: Option<usize>,
        #[arg(long)]
        tsf_lr: Option<f64>,
        #[arg(long, value_enum)]
        tsf_group: Option<GroupArg>,
        /// Write every predicted query mask as PGM into this directory.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        /// Worker threads for episode-level parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Per-level feature distances to the source and transform solve residuals.
    InspectTransform {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        domain: PathBuf,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    F,
    Fb,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    Encoder,
    Low,
    Mid,
    High,
    Decoder,
}

impl From<GroupArg> for TsfGroup {
    fn from(g: GroupArg) -> Self {
        match g {
            GroupArg::Encoder => Self::Encoder,
            GroupArg::Low => Self::Low,
            GroupArg::Mid => Self::Mid,
            GroupArg::High => Self::High,
            GroupArg::Decoder => Self::Decoder,
        }
    }
}

/// Training run file: where the source domain lives and how to train on it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRun {
    data: Option<PathBuf>,
    train: TrainConfig,
}

enum Failure {
    Config(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Io(m) | Self::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io(_)
            | Error::NotFound(_)
            | Error::Image(_)
            | Error::MalformedHeader(_)
            | Error::TruncatedPayload { .. } => Self::Io(m),
            Error::NonFiniteLoss(_)
            | Error::SingularPrototypeMatrix { .. }
            | Error::EmptyMask
            | Error::NoValidPrototypes
            | Error::ZeroPrototype => Self::Numeric(m),
            _ => Self::Config(m),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

/// Explicit flag, then `DMT_SEED`, then the fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn gen_data(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Outcome {
    let spec: DataSpec = match &spec {
        Some(p) => read_json(p)?,
        None => DataSpec::default(),
    };
    spec.validate()?;
    let seed = resolve_seed(seed, 0)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    for plan in &spec.domains {
        let ds = gen_domain(&plan.domain, plan.images, seed)?;
        save_dataset(&ds, out.join(&plan.domain.id))?;
        println!("{}: {} images", plan.domain.id, ds.len());
    }
    let text = serde_json::to_string_pretty(&spec).map_err(|e| Failure::Config(e.to_string()))?;
    write_file(&out.join("spec.json"), &(text + "\n"))
}

fn load_domain(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Io(format!("{}: not a domain directory", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

const LOG_HEADER: &str = "episode,class,l1,l2,total,smoothed\n";

fn meta_train_cmd(
    config: Option<PathBuf>,
    out: PathBuf,
    resume: Option<PathBuf>,
    data: Option<PathBuf>,
    episodes: Option<usize>,
    log: Option<PathBuf>,
) -> Outcome {
    let mut run: TrainRun = match &config {
        Some(p) => read_json(p)?,
        None => TrainRun::default(),
    };
    if let (Some(d), Some(c)) = (&mut run.data, &config) {
        if d.is_relative() {
            *d = c.parent().unwrap_or(Path::new(".")).join(&*d);
        }
    }
    let data = data.or(run.data).ok_or_else(|| Failure::Config("no source data: set `data` or pass --data".into()))?;
    let mut cfg = run.train;
    cfg.seed = resolve_seed(None, cfg.seed)?;
    if let Some(n) = episodes {
        cfg.episodes = n;
    }
    let mut state = match &resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            cfg.model = ck.state.model.config.clone();
            cfg.seed = ck.state.model.seed;
            ck.state
        }
        None => TrainState::fresh(&cfg)?,
    };
    cfg.validate()?;
    let ds = load_domain(&data)?;
    let bank = FeatureBank::build(&state.model, &ds)?;

    let log_path = log.unwrap_or_else(|| out.with_extension("log.csv"));
    let append = resume.is_some() && log_path.exists();
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if !append {
        log_file.write_all(LOG_HEADER.as_bytes()).map_err(|e| io_err(&log_path, e))?;
    }
    let mut io_error = None;
    let result = meta_train(&cfg, &ds, &bank, &mut state, |r| {
        let line = format!("{},{},{},{},{},{}\n", r.episode, r.class, r.l1, r.l2, r.total, r.smoothed);
        if let Err(e) = log_file.write_all(line.as_bytes()) {
            io_error.get_or_insert(e);
        }
        if (r.episode + 1) % 50 == 0 {
            eprintln!("episode {:>5}  total {:.4}  smoothed {:.4}", r.episode + 1, r.total, r.smoothed);
        }
    });
    if let Some(e) = io_error {
        return Err(io_err(&log_path, e));
    }
    if let Err(e) = result {
        eprintln!("training aborted after {} episodes", state.episodes_done);
        return Err(e.into());
    }
    let stats = domain_stats(&state.model, &ds, &bank)?;
    let ck = Checkpoint { state, train: Some(cfg), source_stats: Some(stats) };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    ck.save(&out)?;
    let last = ck.state.log.last().map(|r| r.smoothed).unwrap_or(f64::NAN);
    println!("trained to episode {}; smoothed loss {last:.4}", ck.state.episodes_done);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn meta_test_cmd(
    ckpt: PathBuf,
    domain: PathBuf,
    runs: usize,
    episodes: usize,
    episode: EpisodeSpec,
    tsf: TsfConfig,
    combine: Combine,
    dump_masks: Option<PathBuf>,
    jobs: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
) -> Outcome {
    let ck = Checkpoint::load(&ckpt)?;
    let mut model = ck.state.model;
    model.config.combine = combine;
    let ds = load_domain(&domain)?;
    let cfg = TestConfig { seed: resolve_seed(seed, 0)?, runs, episodes, episode, tsf, compare_no_tsf: true };
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Config(e.to_string()))?;
    let report = pool.install(|| -> Result<_, Error> {
        let bank = FeatureBank::build(&model, &ds)?;
        meta_test(&model, &ds, &bank, &cfg, ck.source_stats.as_ref())
    })?;
    write_file(&out.join("report.csv"), &report.csv())?;
    write_file(&out.join("report.json"), &(report.json()? + "\n"))?;
    if let Some(a) = report.ablation_csv() {
        write_file(&out.join("ablation.csv"), &a)?;
    }
    if let Some(dir) = &dump_masks {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for r in &report.records {
            for (i, m) in r.masks.iter().enumerate() {
                netpbm::write_pgm(dir.join(format!("run{}_ep{:04}_q{i}.pgm", r.run, r.episode)), m)?;
            }
        }
    }
    for (name, st) in &report.summary.miou {
        println!("{name}: mIoU {:.4} ± {:.4} over {} runs", st.mean, st.std, st.per_run.len());
    }
    if let Some(d) = &report.summary.feature_distance {
        println!("feature distance to source: pre {:.4}, post {:.4}", d.pre, d.post);
    }
    Ok(())
}

fn inspect_cmd(ckpt: PathBuf, domain: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Outcome {
    let ck = Checkpoint::load(&ckpt)?;
    let source =
        ck.source_stats.ok_or_else(|| Failure::Config(format!("{} carries no source statistics", ckpt.display())))?;
    let model = ck.state.model;
    let ds = load_domain(&domain)?;
    let bank = FeatureBank::build(&model, &ds)?;
    let rows = inspect_transform(&model, &source, &ds, &bank, resolve_seed(seed, 0)?)?;
    let csv = transform_csv(&rows);
    match out {
        Some(p) => write_file(&p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::GenData { spec, out, seed } => gen_data(spec, out, seed),
        Cmd::MetaTrain { config, out, resume, data, episodes, log } => {
            meta_train_cmd(config, out, resume, data, episodes, log)
        }
        Cmd::MetaTest {
            ckpt,
            domain,
            runs,
            episodes,
            shots,
            queries,
            no_tsf,
            combine,
            tsf_steps,
            tsf_lr,
            tsf_group,
            dump_masks,
            jobs,
            seed,
            out,
        } => {
            let mut tsf = TsfConfig::default();
            if let Some(s) = tsf_steps {
                tsf.steps = s;
            }
            if let Some(lr) = tsf_lr {
                tsf.lr = lr;
            }
            if let Some(g) = tsf_group {
                tsf.group = g.into();
            }
            if no_tsf {
                tsf.steps = 0;
            }
            let combine = match combine {
                CombineArg::F => Combine::F,
                CombineArg::Fb => Combine::Fb,
            };
            let episode = EpisodeSpec { ways: 1, shots, queries };
            meta_test_cmd(ckpt, domain, runs, episodes, episode, tsf, combine, dump_masks, jobs, seed, out)
        }
        Cmd::InspectTransform { ckpt, domain, out, seed } => inspect_cmd(ckpt, domain, out, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dmt: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
