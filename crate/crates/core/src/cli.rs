//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{ingest_corpus, synthetic_corpus};
use crate::error::{Error, Result};
use crate::eval::heatmap::dump_attention;
use crate::eval::kv::{kv_eval, kv_generate, KvCase};
use crate::eval::{
    direct_extrapolation_probe, scale_for_window, sliding_window_perplexity, unseen_scale_sweep, EvalReport,
};
use crate::model::{Model, Token};
use crate::output::{
    atomic_write, attention_summary_csv, heatmap_pgm, heatmap_values_csv, kv_csv, ppl_csv, telemetry_csv,
};
use crate::train::{run_training, Hooks, Phase, TrainRecord};

#[derive(Parser, Debug)]
#[command(
    name = "e2llm",
    version,
    about = "Train and evaluate scale/offset-augmented RoPE context extension"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration file (`key = value` lines); defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Evaluation window, or the training window for `pretrain`/`extend`.
    #[arg(long)]
    window: Option<usize>,
    /// Interpolation scale; defaults to window / base window.
    #[arg(long)]
    scale: Option<f64>,
    /// Overrides `train.seed`, which also seeds case generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (output prefix for `dump-attn`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Any configuration key, e.g. `--set policy.g_max=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a fresh model at the base window with plain RoPE.
    Pretrain(Common),
    /// Continue training `paths.checkpoint` with scale/offset augmentation.
    Extend(Common),
    /// Sliding-window perplexity at each window, interpolating by window / L.
    EvalPpl(Common),
    /// Perplexity with plain RoPE next to the interpolated scale, per window.
    EvalExtrapolate(Common),
    /// Perplexity across `eval.scales` at window scale · L.
    EvalScales(Common),
    /// Write seeded key/value retrieval cases as JSON lines.
    GenKv(Common),
    /// Greedy retrieval accuracy on key/value cases.
    EvalKv(Common),
    /// Export attention of the generated answer over the prompt.
    DumpAttn(Common),
    /// Print the fully resolved configuration.
    ShowConfig(Common),
    /// Write a seeded synthetic training corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Corpus size in bytes.
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v).map_err(Error::Config)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("`{key}` is not set")))
}

fn load_model(cfg: &RunConfig) -> Result<(Checkpoint, Model<f32>)> {
    let path = &cfg.paths.checkpoint;
    let ck = load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", path.display())),
        e => e,
    })?;
    let model = ck.clone().into_model()?;
    Ok((ck, model))
}

fn eval_text(cfg: &RunConfig) -> Result<Vec<Token>> {
    read_text(required(&cfg.paths.eval_corpus, "paths.eval_corpus")?)
}

fn read_text(path: &Path) -> Result<Vec<Token>> {
    ingest_corpus(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())),
        e => e,
    })
}

fn out_path(common: &Common, cfg: &RunConfig, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.paths.output_dir.join(default))
}

fn emit(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn train_phase(phase: Phase, common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(w) = common.window {
        cfg.set("train.trained_window", &w.to_string()).map_err(Error::Config)?;
        cfg.validate()?;
    }
    let tc = cfg.train_config(phase);
    let corpus = read_text(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let model = match phase {
        Phase::Pretrain => Model::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(tc.seed))?,
        Phase::Extend => load_model(&cfg)?.1,
    };
    let policy = tc.effective_policy(&cfg.policy, model.config().base_window);
    let final_path = out_path(common, &cfg, &format!("{phase}.ckpt"));
    let telemetry_path = cfg.paths.output_dir.join(format!("{phase}-telemetry.csv"));
    let mut logged: Vec<TrainRecord> = Vec::new();
    let total = tc.steps;

    let mut on_record = |r: &TrainRecord| {
        eprintln!(
            "step {:>6}  loss {:.4}  g {:>2}  t {:>5}",
            r.step, r.loss, r.scale, r.offset
        );
        logged.push(r.clone());
        atomic_write(&telemetry_path, telemetry_csv(&logged).as_bytes())
    };
    let mut on_checkpoint = |m: &Model<f32>, step: u64| {
        let path = if step == total {
            final_path.clone()
        } else {
            cfg.paths.output_dir.join(format!("{phase}-step{step}.ckpt"))
        };
        save_checkpoint(&path, &Checkpoint::from_model(m, phase, step, &policy))?;
        Ok(path)
    };
    let out = run_training(
        model,
        &tc,
        &cfg.policy,
        corpus,
        Hooks {
            on_record: Some(&mut on_record),
            on_checkpoint: Some(&mut on_checkpoint),
        },
    )?;
    if let Some(p) = out.last_checkpoint {
        eprintln!("wrote {}", p.display());
    }
    eprintln!("wrote {}", telemetry_path.display());
    Ok(())
}

fn windows(common: &Common, cfg: &RunConfig) -> Vec<usize> {
    common.window.map_or_else(|| cfg.eval.windows.clone(), |w| vec![w])
}

fn eval_ppl(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let (_, model) = load_model(&cfg)?;
    let text = eval_text(&cfg)?;
    let base = model.config().base_window;
    let mut reports = Vec::new();
    for w in windows(common, &cfg) {
        let scale = match common.scale {
            Some(s) => s,
            None => scale_for_window(w, base)?,
        };
        let rope = model.config().rope_at_scale(scale)?;
        reports.push(sliding_window_perplexity(
            &model,
            &text,
            w,
            cfg.eval.stride.min(w),
            &rope,
        )?);
    }
    let csv = ppl_csv(&reports);
    print!("{csv}");
    emit(&out_path(common, &cfg, "ppl.csv"), &csv)
}

fn eval_extrapolate(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let (_, model) = load_model(&cfg)?;
    let text = eval_text(&cfg)?;
    let base = model.config().base_window;
    let mut reports = Vec::new();
    for w in windows(common, &cfg) {
        let stride = cfg.eval.stride.min(w);
        reports.push(direct_extrapolation_probe(&model, &text, w, stride)?);
        let scale = scale_for_window(w.max(base), base)?;
        if scale > 1.0 {
            reports.push(sliding_window_perplexity(
                &model,
                &text,
                w,
                stride,
                &model.config().rope_at_scale(scale)?,
            )?);
        }
    }
    let csv = ppl_csv(&reports);
    print!("{csv}");
    emit(&out_path(common, &cfg, "extrapolate.csv"), &csv)
}

fn eval_scales(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let (_, model) = load_model(&cfg)?;
    let text = eval_text(&cfg)?;
    let scales = common.scale.map_or_else(|| cfg.eval.scales.clone(), |s| vec![s]);
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut failures = Vec::new();
    for (scale, r) in unseen_scale_sweep(&model, &text, &scales, cfg.eval.stride) {
        match r {
            Ok(r) => reports.push(r),
            Err(e) => failures.push(format!("scale {scale}: {e}")),
        }
    }
    let csv = ppl_csv(&reports);
    print!("{csv}");
    emit(&out_path(common, &cfg, "scales.csv"), &csv)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(failures.join("; ")))
    }
}

fn kv_window(common: &Common, cfg: &RunConfig) -> usize {
    common.window.unwrap_or(cfg.eval.kv_window)
}

fn generate_cases(cfg: &RunConfig, window: usize) -> Result<Vec<KvCase>> {
    let target = window
        .checked_sub(cfg.eval.max_new_tokens)
        .ok_or_else(|| Error::Generation(format!("window {window} leaves no room for the prompt")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    (0..cfg.eval.kv_cases)
        .map(|_| kv_generate(cfg.eval.kv_pairs, target, &mut rng))
        .collect()
}

fn read_cases(path: &Path) -> Result<Vec<KvCase>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn cases_for(common: &Common, cfg: &RunConfig) -> Result<Vec<KvCase>> {
    match &cfg.paths.kv_cases {
        Some(p) if p.exists() => read_cases(p),
        _ => generate_cases(cfg, kv_window(common, cfg)),
    }
}

fn gen_kv(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let cases = generate_cases(&cfg, kv_window(common, &cfg))?;
    let mut text = String::new();
    for c in &cases {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    let path = common
        .out
        .clone()
        .or_else(|| cfg.paths.kv_cases.clone())
        .unwrap_or_else(|| cfg.paths.output_dir.join("kv_cases.jsonl"));
    emit(&path, &text)
}

fn eval_kv(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let (_, model) = load_model(&cfg)?;
    let cases = cases_for(common, &cfg)?;
    let window = kv_window(common, &cfg);
    let base = model.config().base_window;
    let scale = match common.scale {
        Some(s) => s,
        None => scale_for_window(window.max(base), base)?,
    };
    let result = kv_eval(
        &model,
        &cases,
        &model.config().rope_at_scale(scale)?,
        cfg.eval.max_new_tokens,
    );
    for o in result.outcomes.iter().filter(|o| o.error.is_some()) {
        eprintln!("case {}: {}", o.case_id, o.error.as_deref().unwrap_or_default());
    }
    println!(
        "accuracy {:.4} ({} cases, window {window}, scale {scale})",
        result.accuracy,
        cases.len()
    );
    emit(
        &out_path(common, &cfg, "kv.csv"),
        &kv_csv(&result.outcomes, window, scale),
    )
}

fn dump_attn(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let (_, model) = load_model(&cfg)?;
    let cases = cases_for(common, &cfg)?;
    let case = cases.get(cfg.eval.case_index).ok_or(Error::Index {
        what: "case",
        index: cfg.eval.case_index,
        bound: cases.len(),
    })?;
    let window = kv_window(common, &cfg);
    let base = model.config().base_window;
    let scale = match common.scale {
        Some(s) => s,
        None => scale_for_window(window.max(base), base)?,
    };
    let dump = dump_attention(
        &model,
        case,
        &model.config().rope_at_scale(scale)?,
        &cfg.dump_layers(),
        cfg.eval.max_new_tokens,
    )?;
    let prefix = out_path(common, &cfg, "attn");
    let with_suffix = |s: &str| {
        let mut p = prefix.clone().into_os_string();
        p.push(s);
        PathBuf::from(p)
    };
    for layer in &dump.layers {
        emit(
            &with_suffix(&format!("-layer{}.pgm", layer.layer)),
            &heatmap_pgm(&layer.rows),
        )?;
        emit(
            &with_suffix(&format!("-layer{}.csv", layer.layer)),
            &heatmap_values_csv(&layer.rows),
        )?;
    }
    let summary = attention_summary_csv(&dump);
    print!("{summary}");
    emit(&with_suffix("-summary.csv"), &summary)
}

fn show_config(common: &Common) -> Result<()> {
    let text = resolve(common)?.show();
    match &common.out {
        Some(p) => emit(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_corpus(common: &Common, bytes: usize) -> Result<()> {
    let cfg = resolve(common)?;
    let path = common
        .out
        .clone()
        .or_else(|| cfg.paths.corpus.clone())
        .ok_or_else(|| Error::Config("give --out or set paths.corpus".into()))?;
    let data = synthetic_corpus(bytes, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    atomic_write(&path, &data)?;
    eprintln!("wrote {} ({} bytes)", path.display(), data.len());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(c) => train_phase(Phase::Pretrain, &c),
        Command::Extend(c) => train_phase(Phase::Extend, &c),
        Command::EvalPpl(c) => eval_ppl(&c),
        Command::EvalExtrapolate(c) => eval_extrapolate(&c),
        Command::EvalScales(c) => eval_scales(&c),
        Command::GenKv(c) => gen_kv(&c),
        Command::EvalKv(c) => eval_kv(&c),
        Command::DumpAttn(c) => dump_attn(&c),
        Command::ShowConfig(c) => show_config(&c),
        Command::GenCorpus { common, bytes } => gen_corpus(&common, bytes),
    }
}
