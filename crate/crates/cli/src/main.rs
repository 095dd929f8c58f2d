use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::mpsc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scb_core::boost::QuantizedScore;
use scb_core::cae::QuantMode;
use scb_core::dataio::{
    build_dataset, generate_synthetic, load_dir, write_recording, PrepConfig, SynthConfig, WindowSet,
};
use scb_core::dsp::{Label, Recording};
use scb_core::pipeline::{evaluate_pipeline, loso_evaluate, train_pipeline, Pipeline, PipelineConfig};
use scb_core::realtime::{
    run_trial_protocol, serve, spawn_actuator, EngineConfig, Mode, ReplaySource, SampleSource, Session,
    SessionConfig, SimulatedPort, SynthLiveSource,
};

/// Motor-intent decoding from EEG: data generation, training, evaluation
/// and live streaming.
#[derive(Debug, Parser)]
#[command(name = "scb", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort as EEG1 recordings with event files.
    Synth(SynthArgs),
    /// Clean, window, train the encoder and ensemble; write model and report.
    Train(TrainArgs),
    /// Score a model on a dataset, or retrain leave-one-subject-out.
    Eval(EvalArgs),
    /// Export a reduced-precision encoder.
    Quantize(QuantizeArgs),
    /// Decode a live or replayed stream.
    Stream(StreamArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    subjects: usize,
    #[arg(long, default_value_t = 15)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    patience: usize,
    /// Boosting rounds; chosen by cross-validation when absent.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    opts: TrainOpts,
    /// Report path; defaults to the model path with a .json extension.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Retrain with each subject held out, using the model's settings.
    #[arg(long)]
    loso: bool,
    /// Also score an INT8 encoder.
    #[arg(long)]
    int8: bool,
    /// Override the model's epoch budget for LOSO retraining.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration recordings.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "int8", value_parser = parse_quant)]
    mode: QuantMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone)]
enum SourceSpec {
    Replay(PathBuf),
    SynthLive,
}

fn parse_source(s: &str) -> std::result::Result<SourceSpec, String> {
    match s.split_once(':') {
        Some(("replay", p)) if !p.is_empty() => Ok(SourceSpec::Replay(PathBuf::from(p))),
        None if s == "synth-live" => Ok(SourceSpec::SynthLive),
        _ => Err("expected replay:<file> or synth-live".into()),
    }
}

fn parse_quant(s: &str) -> std::result::Result<QuantMode, String> {
    s.parse::<QuantMode>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct StreamArgs {
    #[arg(long)]
    model: PathBuf,
    /// replay:<file> or synth-live
    #[arg(long, value_parser = parse_source)]
    source: SourceSpec,
    /// Serve the session over WebSocket at this address.
    #[arg(long)]
    serve: Option<String>,
    #[arg(long, default_value_t = 125)]
    stride: usize,
    #[arg(long, default_value_t = 0.6)]
    theta: f64,
    #[arg(long, default_value_t = 3)]
    debounce: usize,
    /// Artifact limit, peak-to-peak microvolts.
    #[arg(long, default_value_t = 100.0)]
    amp_limit: f64,
    #[arg(long, default_value = "active", value_parser = parse_mode)]
    mode: Mode,
    /// Process samples as fast as possible.
    #[arg(long)]
    max_speed: bool,
    /// Run a cued protocol of this many trials headless and report it.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    cue_s: f64,
    #[arg(long, default_value_t = 6.0)]
    rest_s: f64,
    /// Stop after this many seconds of signal.
    #[arg(long)]
    duration: Option<f64>,
    /// Synthetic participant index.
    #[arg(long, default_value_t = 0)]
    subject: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// host:port of an actuator speaking the line protocol; simulated when absent.
    #[arg(long)]
    actuator: Option<String>,
    /// Acknowledgement delay of the simulated actuator.
    #[arg(long, default_value_t = 20)]
    actuator_delay_ms: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_set(dir: &Path, prep: &PrepConfig) -> Result<(WindowSet, Vec<String>)> {
    let recs = load_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    if recs.is_empty() {
        bail!("no .eeg recordings in {}", dir.display());
    }
    let names = recs.iter().map(|r| r.1.clone()).collect();
    let recs: Vec<(usize, Recording)> = recs.into_iter().map(|(s, _, r)| (s, r)).collect();
    Ok((build_dataset(&recs, prep)?, names))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).context("generator config")?,
        None => SynthConfig::default(),
    };
    cfg.n_subjects = a.subjects;
    cfg.trials = a.trials;
    cfg.seed = a.seed;
    std::fs::create_dir_all(&a.out)?;
    for (s, rec) in generate_synthetic(&cfg)? {
        let path = a.out.join(format!("subject_{s:02}.eeg"));
        write_recording(&path, &rec)?;
        eprintln!("wrote {} ({} samples, {} events)", path.display(), rec.n_samples(), rec.events.len());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let prep = PrepConfig { seed: a.seed, ..Default::default() };
    let (set, _) = load_set(&a.data, &prep)?;
    eprintln!("{} windows from {}", set.len(), a.data.display());
    let mut cfg = PipelineConfig { prep, seed: a.seed, rounds: a.opts.rounds, ..Default::default() };
    cfg.train.max_epochs = a.opts.epochs;
    cfg.train.patience = a.opts.patience;
    let (pipe, summary) = train_pipeline(&set, &cfg, |e| {
        eprintln!("epoch {:3}  train {:.4}  val {:.4}  val_acc {:.3}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy)
    })?;
    pipe.save(&a.out)?;
    let report = evaluate_pipeline(&pipe, &set.subset(&summary.val_idx), a.seed)?;
    let report_path = a.report.unwrap_or_else(|| a.out.with_extension("json"));
    write_json(Some(&report_path), &report)?;
    eprintln!(
        "{} rounds, validation accuracy {:.3}; wrote {} and {}",
        summary.rounds,
        report.accuracy,
        a.out.display(),
        report_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pipe = Pipeline::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (set, names) = load_set(&a.data, &pipe.meta.prep)?;
    let seed = pipe.meta.train.seed;
    let report = if a.loso {
        let mut cfg = PipelineConfig {
            prep: pipe.meta.prep.clone(),
            train: pipe.meta.train.clone(),
            arch: pipe.cae.arch.clone(),
            seed,
            ..Default::default()
        };
        if let Some(e) = a.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(p) = a.patience {
            cfg.train.patience = p;
        }
        let quant = a.int8.then_some(QuantMode::Int8);
        loso_evaluate(&set, &names, &cfg, quant, |f| {
            let correct = f.test_idx.iter().zip(&f.preds).filter(|(&i, &p)| set.labels[i] == p).count();
            eprintln!(
                "held out {}: accuracy {:.3} ({} epochs)",
                names[f.held_out],
                correct as f64 / f.preds.len() as f64,
                f.history.len()
            );
        })?
    } else {
        let mut r = evaluate_pipeline(&pipe, &set, seed)?;
        if a.int8 {
            let views: Vec<_> = set.windows.iter().map(|w| w.view()).collect();
            let q = pipe.quantized(&views, QuantMode::Int8)?;
            let correct = views
                .iter()
                .zip(&set.labels)
                .map(|(w, l)| q.predict(*w).map(|p| p.0 == *l))
                .collect::<std::result::Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|&c| c)
                .count();
            let acc = correct as f64 / set.len() as f64;
            r.quantized = Some(QuantizedScore { mode: "int8".into(), accuracy: acc, accuracy_drop: r.accuracy - acc });
        }
        r
    };
    eprintln!("accuracy {:.3} over {} windows", report.accuracy, report.n);
    write_json(a.out.as_deref(), &report)
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let pipe = Pipeline::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (set, _) = load_set(&a.data, &pipe.meta.prep)?;
    let views: Vec<_> = set.windows.iter().map(|w| w.view()).collect();
    let q = pipe.quantized(&views, a.mode)?;
    let mut agree = 0;
    for w in &views {
        agree += (q.predict(*w)?.0 == pipe.predict(*w)?.0) as usize;
    }
    q.save(&a.out)?;
    eprintln!(
        "wrote {} ({}); agrees with float on {:.1}% of {} windows",
        a.out.display(),
        a.mode.as_str(),
        100.0 * agree as f64 / views.len() as f64,
        views.len()
    );
    Ok(())
}

/// Ends a source after a fixed number of frames.
struct Limited {
    inner: Box<dyn SampleSource>,
    left: usize,
}

impl SampleSource for Limited {
    fn next_frame(&mut self, cue: Option<Label>) -> Option<[f64; 12]> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        self.inner.next_frame(cue)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn timeline(&self) -> Option<Vec<(Label, usize, usize)>> {
        self.inner.timeline()
    }
}

fn stream(a: StreamArgs) -> Result<()> {
    let pipe = Pipeline::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut source: Box<dyn SampleSource> = match &a.source {
        SourceSpec::Replay(p) => Box::new(ReplaySource::from_path(p)?),
        SourceSpec::SynthLive => {
            Box::new(SynthLiveSource::new(&SynthConfig { seed: a.seed, ..Default::default() }, a.subject)?)
        }
    };
    if let Some(d) = a.duration {
        if !(d > 0.0) {
            bail!("--duration must be positive");
        }
        source = Box::new(Limited { inner: source, left: (d * 250.0).round() as usize });
    }
    let cfg = SessionConfig {
        engine: EngineConfig { stride: a.stride, theta: a.theta, amp_limit: a.amp_limit, ..Default::default() },
        debounce: a.debounce,
        mode: a.mode,
        max_speed: a.max_speed,
        report_seed: a.seed,
        ..Default::default()
    };

    if let Some(trials) = a.trials {
        if a.serve.is_some() {
            bail!("--trials runs headless; start protocols from the console when serving");
        }
        let outcome = run_trial_protocol(&pipe, source.as_mut(), trials, a.cue_s, a.rest_s, a.seed, &cfg, None)?;
        eprintln!(
            "{} trials, accuracy {:.3}, TP rate {:.2}, FP rate {:.2}, latency mean {:.2} ms p95 {:.2} ms",
            outcome.ledger.len(),
            outcome.report.accuracy,
            outcome.tp_rate,
            outcome.fp_rate,
            outcome.latency.mean_ms,
            outcome.latency.p95_ms
        );
        return write_json(a.out.as_deref(), &outcome);
    }

    let actuator = match &a.actuator {
        Some(addr) => {
            let s = TcpStream::connect(addr).with_context(|| format!("connecting to actuator {addr}"))?;
            spawn_actuator(s)
        }
        None => spawn_actuator(SimulatedPort::new(Duration::from_millis(a.actuator_delay_ms))),
    };
    let session = Session::new(pipe, cfg, actuator, source.describe(), source.timeline())?;

    let stats = match &a.serve {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            let handle = serve(listener, session, source)?;
            eprintln!("serving session on ws://{}", handle.addr());
            handle.join()?
        }
        None => {
            if matches!(a.source, SourceSpec::SynthLive) && a.duration.is_none() {
                bail!("synth-live without --serve needs --duration or --trials");
            }
            let mut session = session;
            let (_tx, rx) = mpsc::channel();
            let stop = AtomicBool::new(false);
            let mut commands = 0usize;
            let stats = session.run(source, &rx, &stop, &mut |m| {
                if let scb_core::realtime::ServerMessage::Command { line, t_s, .. } = m {
                    commands += 1;
                    eprintln!("{t_s:8.2}s  {line}");
                }
            })?;
            eprintln!("{commands} commands");
            stats
        }
    };
    if let Some(l) = &stats.latency {
        eprintln!("{} decisions, latency mean {:.2} ms p95 {:.2} ms, {} drops", l.n_decisions, l.mean_ms, l.p95_ms, stats.drops);
    }
    write_json(a.out.as_deref(), &stats)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let r = match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Quantize(a) => quantize(a),
        Cmd::Stream(a) => stream(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
