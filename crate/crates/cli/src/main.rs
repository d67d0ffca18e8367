use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use distana::evaluation::{
    evaluate_suite, export_traces, reference_rollout, rollout, table_csv, table_text, DistanaPredictor, SuiteEntry,
};
use distana::gradcheck::gradcheck_many;
use distana::model::ParamVars;
use distana::store::{load_dataset, save_dataset};
use distana::training::{grid_topology_for, sequence_loss, EpochRecord};
use distana::wavegen::{sample_dataset, DatasetKind, DatasetSpec};
use distana::{
    BaselineKind, BorderMode, Checkpoint, Distana, Error, ErrorClass, EvalProtocol, Field, MeshTopology, ModelConfig,
    Tape, Tensor, TrainConfig, Trainer, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "distana", version, about = "Generate wave data, train and evaluate DISTANA lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (manifest plus train/ and test/ fields).
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score checkpoints and the baselines on a dataset's test split.
    Evaluate(EvaluateArgs),
    /// Roll one checkpoint over one sequence and export the predictions.
    Rollout(RolloutArgs),
    /// Compare backpropagated gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts, or describe a checkpoint or dataset.
    Info(InfoArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_dataset)]
    dataset: DatasetKind,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with dataset overrides (n_train, n_test, ds1, ds2).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// distana, distana-v1, distana-v2 or distana-v3.
    #[arg(long, value_parser = parse_variant)]
    model: Variant,
    #[arg(long, default_value_t = 4)]
    lstm_cells: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Ground-truth steps before predictions are fed back during training.
    #[arg(long)]
    teacher_forcing: Option<usize>,
    /// Seeds both weight initialisation and the shuffling order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, num_args = 0..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 15)]
    teacher: usize,
    #[arg(long, default_value_t = 65)]
    closed: usize,
    #[arg(long)]
    out: PathBuf,
    /// Timed rollouts per model (median reported); 0 leaves the column empty.
    #[arg(long, default_value_t = 5)]
    timing_runs: usize,
    /// Cell whose trace is exported, as ROW,COL.
    #[arg(long, value_parser = parse_cell, default_value = "8,8")]
    trace_cell: (usize, usize),
    /// Reject checkpoints that are not this model.
    #[arg(long, value_parser = parse_variant)]
    model: Option<Variant>,
    #[arg(long, default_value_t = 4)]
    lstm_cells: usize,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    sequence: usize,
    #[arg(long, default_value_t = 15)]
    teacher: usize,
    #[arg(long, default_value_t = 65)]
    closed: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_cell, default_value = "8,8")]
    cell: (usize, usize),
    /// Also write one CSV per predicted frame.
    #[arg(long)]
    csv_frames: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_parser = parse_grid, default_value = "4x4")]
    grid: (usize, usize),
    #[arg(long, default_value_t = 12)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Negative control: corrupt the sigmoid adjoint.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pair(s: &str, sep: char) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(sep).ok_or_else(|| format!("expected A{sep}B, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_cell(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_pair(s, ',')
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_pair(s, 'x')
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("DISTANA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second initialisation only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Info(a) => info(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let mut spec: DatasetSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    spec.kind = a.dataset;
    spec.seed = a.seed;
    if let Some(n) = a.n_train {
        spec.n_train = n;
    }
    if let Some(n) = a.n_test {
        spec.n_test = n;
    }
    spec.validate()?;
    let ds = sample_dataset(&spec)?;
    create_dir(&a.out)?;
    let m = save_dataset(&a.out, &ds)?;
    println!(
        "wrote {} train and {} test sequences of shape {:?} to {}",
        m.train.len(),
        m.test.len(),
        m.shape,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let model_cfg = ModelConfig::preset(a.model.model, a.model.lstm_cells);
    model_cfg.validate()?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.teacher_forcing.is_some() {
        cfg.teacher_forcing = a.teacher_forcing;
    }
    cfg.validate()?;

    let data = load_dataset(&a.data)?;
    let mut train = data.train;
    if let Some(n) = a.n_train {
        if n == 0 || n > train.len() {
            return Err(Error::Config(format!("--n-train must be in 1..={}", train.len())));
        }
        train.truncate(n);
    }
    let topology = grid_topology_for(&train[0])?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load_expecting(p, &model_cfg)?;
            let mut t = Trainer::resume(ckpt, topology, None)?;
            *t.config_mut() = cfg.clone();
            t
        }
        None => Trainer::new(Distana::init(model_cfg.clone(), cfg.seed)?, topology, cfg.clone())?,
    };

    create_dir(&a.out)?;
    let ckpt_path = a.out.join("checkpoint");
    let log_path = a.out.join("losses.jsonl");
    let mut log = String::new();
    let mut on_epoch = |r: &EpochRecord| {
        let line = serde_json::to_string(r).expect("record serializes");
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    };
    let episode = trainer.fit(&train, Some(&ckpt_path), &mut on_epoch)?;
    write_text(&log_path, &log)?;
    let summary = serde_json::json!({
        "model": model_cfg.display_name(),
        "config": model_cfg,
        "params": trainer.model().param_count(),
        "train": episode.config,
        "final_train_mse": episode.losses.last(),
        "seconds": episode.seconds,
        "checkpoint": ckpt_path,
    });
    write_text(
        &a.out.join("episode.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    eprintln!(
        "trained {} for {} epochs, final train MSE {:.4e}",
        model_cfg.display_name(),
        episode.losses.len(),
        episode.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let protocol = EvalProtocol {
        teacher_steps: a.teacher,
        closed_steps: a.closed,
    };
    let expected = a.model.map(|v| ModelConfig::preset(v, a.lstm_cells));
    let mut entries = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for path in &a.checkpoints {
        let ckpt = match &expected {
            Some(cfg) => Checkpoint::load_expecting(path, cfg)?,
            None => Checkpoint::load(path)?,
        };
        let base = ckpt.model.config().display_name();
        let mut name = base.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{base} #{k}");
            k += 1;
        }
        names.push(name.clone());
        entries.push(SuiteEntry::Model {
            name,
            train_error: ckpt.train_error(),
            model: ckpt.model,
        });
    }
    entries.extend(BaselineKind::ALL.map(SuiteEntry::Baseline));

    let data = load_dataset(&a.data)?;
    for seq in &data.test {
        protocol.check(seq.steps())?;
    }
    let (row, col) = a.trace_cell;
    let first = &data.test[0];
    if row >= first.height() || col >= first.width() {
        return Err(Error::Config(format!(
            "trace cell ({row}, {col}) outside {}x{} field",
            first.height(),
            first.width()
        )));
    }
    let rows = evaluate_suite(&entries, &data.test, protocol, a.timing_runs)?;

    create_dir(&a.out)?;
    let traces = a.out.join("traces");
    create_dir(&traces)?;
    let topology = grid_topology_for(first)?;
    for entry in &entries {
        let (name, r) = match entry {
            SuiteEntry::Model { name, model, .. } => (
                name.clone(),
                rollout(&mut DistanaPredictor::new(model, topology.clone())?, first, protocol)?,
            ),
            SuiteEntry::Baseline(kind) => (kind.label().to_string(), reference_rollout(&mut kind.clone(), first, protocol)?),
        };
        let csv = export_traces(&r, first, a.trace_cell)?;
        write_text(&traces.join(format!("{}_test0000.csv", sanitize(&name))), &csv)?;
    }
    write_text(&a.out.join("results.csv"), &table_csv(&rows))?;
    let text = table_text(&rows);
    write_text(&a.out.join("results.txt"), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn rollout_cmd(a: RolloutArgs) -> Result<ExitCode> {
    let protocol = EvalProtocol {
        teacher_steps: a.teacher,
        closed_steps: a.closed,
    };
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let seq: &Field = data.test.get(a.sequence).ok_or_else(|| {
        Error::Config(format!("test split has {} sequences, asked for {}", data.test.len(), a.sequence))
    })?;
    protocol.check(seq.steps())?;
    let topology = grid_topology_for(seq)?;
    let r = rollout(&mut DistanaPredictor::new(&ckpt.model, topology)?, seq, protocol)?;
    let trace = export_traces(&r, seq, a.cell)?;

    create_dir(&a.out)?;
    r.predictions.save(
        &a.out.join("predictions"),
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "sequence": a.sequence,
            "protocol": protocol,
            "frame_offset": 1,
        }),
    )?;
    write_text(&a.out.join("trace.csv"), &trace)?;
    let mut steps = String::from("step,mse,regime\n");
    for (k, e) in r.step_mse.iter().enumerate() {
        let regime = if k + 1 < protocol.teacher_steps { "teacher" } else { "closed" };
        steps.push_str(&format!("{},{e:e},{regime}\n", k + 1));
    }
    write_text(&a.out.join("step_mse.csv"), &steps)?;
    if a.csv_frames {
        let dir = a.out.join("frames");
        create_dir(&dir)?;
        r.predictions.write_csv_frames(&dir, "prediction")?;
    }
    println!("test error {:e} over {} closed-loop steps", r.test_error(), protocol.closed_steps);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = ModelConfig::preset(a.model.model, a.model.lstm_cells);
    let (h, w) = a.grid;
    if a.steps < 2 || h == 0 || w == 0 {
        return Err(Error::Config("gradcheck needs a non-empty grid and at least 2 steps".into()));
    }
    let model = Distana::init(cfg.clone(), a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x9e37_79b9_7f4a_7c15);
    let seq = Field::new(a.steps, h, w, (0..a.steps * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
    let topology = Arc::new(MeshTopology::grid(h, w, BorderMode::ZeroPad)?);
    let lattice = distana::Lattice::new(&cfg, topology)?;
    let points: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let report = gradcheck_many(
        |tape: &mut Tape, vars| sequence_loss(tape, &lattice, &ParamVars::from_slice(&cfg, vars)?, &seq, a.steps),
        &points,
        a.eps,
        a.inject_fault,
    )?;
    println!("{} ({} parameters), {}x{} grid, {} steps", cfg.display_name(), model.param_count(), h, w, a.steps);
    for (name, err) in cfg.param_names().iter().zip(&report.per_input) {
        println!("  {name:<12} max relative error {err:.3e}");
    }
    let pass = report.max <= a.tolerance;
    println!("max relative error {:.3e} ({})", report.max, if pass { "ok" } else { "FAILED" });
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn info(a: InfoArgs) -> Result<ExitCode> {
    if let Some(p) = &a.checkpoint {
        let ckpt = Checkpoint::load(p)?;
        let cfg = ckpt.model.config();
        println!("{}: {} parameters", cfg.display_name(), ckpt.model.param_count());
        println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
        if let Some(t) = &ckpt.training {
            println!("epochs trained: {}, final train MSE: {:?}", t.epoch, t.losses.last());
        }
    }
    if let Some(d) = &a.data {
        let m = distana::store::load_manifest(d)?;
        println!(
            "{:?} dataset: {} train / {} test sequences of shape {:?}, seed {}",
            m.spec.kind,
            m.train.len(),
            m.test.len(),
            m.shape,
            m.spec.seed
        );
    }
    if a.checkpoint.is_none() && a.data.is_none() {
        println!("{:<10} {:>8}", "model", "params");
        for (v, l) in [
            (Variant::Base, 4),
            (Variant::Base, 26),
            (Variant::V1, 4),
            (Variant::V2, 4),
            (Variant::V3, 4),
        ] {
            let m = Distana::zeros(ModelConfig::preset(v, l))?;
            println!("{:<10} {:>8}", m.config().display_name(), m.param_count());
        }
    }
    Ok(ExitCode::SUCCESS)
}
