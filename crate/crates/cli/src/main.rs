mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use groundkit_core::dataset::{read_dataset, write_dataset};
use groundkit_core::metrics::{self, write_records, BinRow};
use groundkit_core::sampling::PnRatio;
use groundkit_core::synth::{build_dataset, DatasetConfig};
use groundkit_core::VideoSample;
use groundkit_model::checkpoint;
use groundkit_model::pipeline::{self, Ablations, EvalMode, Evaluation, PipelineError, RunConfig};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "groundkit", version, about = "Spatio-temporal video grounding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize scenes, filter them and write a dataset.
    Gen(GenArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Bin and sensitivity tables with plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct Overrides {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set scene.noise=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Index file to write; sample data goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    id_prefix: Option<String>,
    #[arg(long)]
    insert_clips: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    no_eta: bool,
    #[arg(long)]
    naive_eta: bool,
    #[arg(long)]
    no_stsb: bool,
    #[arg(long)]
    single_layer_select: bool,
    /// Positive:negative frame budget, one of 10:0, 8:2, 5:5, 2:8.
    #[arg(long)]
    pn_ratio: Option<PnRatio>,
    #[arg(long)]
    bridge_queries: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    select_k: Option<usize>,
    #[arg(long)]
    equal_loss_weights: bool,
    /// Print a progress line every this many steps; 0 is silent.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Predicted,
    Oracle,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation JSON files written by `eval`.
    #[arg(long = "eval")]
    evals: Vec<PathBuf>,
    /// Dataset for the temporal-noise sensitivity study.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Temporal shifts in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 3.0, 4.0])]
    levels: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            PipelineError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn data_err(e: impl fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("groundkit: {f}");
            ExitCode::from(f.code())
        }
    }
}

/// Config file with `--set` overrides applied, deserialized.
fn load_config<T: DeserializeOwned>(o: &Overrides) -> Result<T, Failure> {
    let mut table = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &o.sets {
        set_path(&mut table, s)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Failure::Usage(format!("config: {e}")))
}

fn set_path(table: &mut toml::Table, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    // Bare words are taken as strings so `--set relevance=mean` works unquoted.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Failure::Usage(format!("--set {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<VideoSample>, Failure> {
    let samples = read_dataset(path).map_err(data_err)?;
    if samples.is_empty() {
        return Err(Failure::Data(format!("{}: dataset is empty", path.display())));
    }
    Ok(samples)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(data_err)?;
    fs::write(path, text).map_err(io_err(path))
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    let mut cfg: DatasetConfig = load_config(&a.overrides)?;
    if let Some(n) = a.count {
        cfg.count = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.id_prefix {
        cfg.id_prefix = p;
    }
    cfg.insert_clips |= a.insert_clips;
    let (kept, dropped) = build_dataset(&cfg).map_err(data_err)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_dataset(&kept, &a.out).map_err(data_err)?;
    println!("wrote {} samples to {}", kept.len(), a.out.display());
    for d in &dropped {
        println!("dropped {} ({})", d.id, d.reason);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg: RunConfig = load_config(&a.overrides)?;
    cfg.seed = a.seed;
    if let Some(n) = a.steps {
        cfg.optim.steps = n;
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr = lr;
    }
    if let Some(w) = a.warmup_frac {
        cfg.optim.warmup_frac = w;
    }
    if a.train_data.is_some() {
        cfg.train_data = a.train_data;
    }
    if a.output_dir.is_some() {
        cfg.output_dir = a.output_dir;
    }
    cfg.apply(&Ablations {
        no_eta: a.no_eta,
        naive_eta: a.naive_eta,
        no_stsb: a.no_stsb,
        single_layer_select: a.single_layer_select,
        pn_ratio: a.pn_ratio,
        bridge_queries: a.bridge_queries,
        encoder_layers: a.encoder_layers,
        select_k: a.select_k,
        equal_loss_weights: a.equal_loss_weights,
    });
    let data = cfg
        .train_data
        .clone()
        .ok_or_else(|| Failure::Usage("no training data (--train-data or train_data)".into()))?;
    if !data.exists() {
        return Err(Failure::Data(format!("{} does not exist", data.display())));
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    let samples = read_samples(&data)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;

    let every = a.log_every;
    let outcome = pipeline::train(&cfg, &samples, |e| {
        if every > 0 && (e.step + 1) % every == 0 {
            println!(
                "step {:>6} loss {:.4} token {:.4} spatial {:.4} lr {:.2e}",
                e.step + 1,
                e.total,
                e.token,
                e.spatial,
                e.lr
            );
        }
    })?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&outcome.model, &ckpt).map_err(data_err)?;
    let log = out.join("log.jsonl");
    pipeline::write_log(&log, &outcome.log).map_err(io_err(&log))?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model = checkpoint::load(&a.checkpoint).map_err(data_err)?;
    let samples = read_samples(&a.data)?;
    let evals = match a.mode {
        ModeArg::Both => {
            let (p, o) = pipeline::evaluate_both(&model, &samples)?;
            vec![p, o]
        }
        ModeArg::Predicted => vec![pipeline::evaluate(&model, &samples, EvalMode::Predicted)?],
        ModeArg::Oracle => vec![pipeline::evaluate(&model, &samples, EvalMode::Oracle)?],
    };
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    for e in &evals {
        let stem = match e.mode {
            EvalMode::Predicted => "predicted",
            EvalMode::Oracle => "oracle",
        };
        write_json(&a.out.join(format!("{stem}.json")), e)?;
        let table = e.to_table();
        let txt = a.out.join(format!("{stem}.txt"));
        fs::write(&txt, &table).map_err(io_err(&txt))?;
        let tubes = a.out.join(format!("{stem}_tubes.jsonl"));
        let file = fs::File::create(&tubes).map_err(io_err(&tubes))?;
        write_records(std::io::BufWriter::new(file), &e.records).map_err(data_err)?;
        println!("{table}");
    }
    Ok(())
}

fn bin_label(b: &BinRow) -> String {
    let close = if b.hi >= 1.0 { ']' } else { ')' };
    format!("[{}, {}{close}", b.lo, b.hi)
}

fn save_png(img: image::RgbImage, path: &Path) -> Result<(), Failure> {
    img.save(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    if a.evals.is_empty() && a.data.is_none() {
        return Err(Failure::Usage("nothing to report: pass --eval and/or --data".into()));
    }
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    if !a.evals.is_empty() {
        let mut evals = Vec::new();
        for p in &a.evals {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let e: Evaluation = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            evals.push((p, e));
        }
        let mut text = String::new();
        for (p, e) in &evals {
            text.push_str(&format!("{} ({:?})\n{}\n", p.display(), e.mode, metrics::bin_table(&e.bins)));
        }
        let mut rows = Vec::new();
        for (_, e) in &evals {
            rows.push(e.bins.iter().map(|b| b.m_viou).collect::<Vec<_>>());
        }
        let legend: Vec<String> = evals
            .iter()
            .enumerate()
            .map(|(i, (p, _))| format!("series {i}: {}", p.display()))
            .collect();
        let labels: Vec<String> = evals[0].1.bins.iter().map(bin_label).collect();
        text.push_str(&format!("bins.png groups: {}\n{}\n", labels.join(" "), legend.join("\n")));
        let path = a.out.join("bins.txt");
        fs::write(&path, &text).map_err(io_err(&path))?;
        save_png(plot::bars(&rows), &a.out.join("bins.png"))?;
        print!("{text}");
    }
    if let Some(data) = &a.data {
        if a.levels.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Failure::Usage("noise levels must be finite and non-negative".into()));
        }
        let samples = read_samples(data)?;
        let rows = pipeline::controlled_noise_study(&samples, &a.levels)?;
        let table = pipeline::noise_table(&rows);
        let path = a.out.join("sensitivity.txt");
        fs::write(&path, &table).map_err(io_err(&path))?;
        write_json(&a.out.join("sensitivity.json"), &rows)?;
        let series = vec![
            rows.iter().map(|r| r.m_viou).collect(),
            rows.iter().map(|r| r.m_tiou).collect(),
        ];
        save_png(plot::lines(&series), &a.out.join("sensitivity.png"))?;
        println!("{table}");
    }
    Ok(())
}
