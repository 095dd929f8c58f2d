//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without a test harness so the lines always
//! show up in the output.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use scb_core::boost::{train_adaboost, EvalReport, ALPHA_CAP, TIE_EPS};
use scb_core::cae::{self, ArchDescriptor, CaeParams, Mode as NetMode, Role, TrainConfig};
use scb_core::dataio::read_recording;
use scb_core::dsp::{design_bandpass, Label, TARGET_FS};
use scb_core::ica::{amari_index, fast_ica, whiten};
use scb_core::pipeline::Pipeline;
use scb_core::realtime::{
    offline_decisions, step_state_machine, ActuatorCommand, ActuatorLink, Engine, EngineConfig, Gate,
    GatedDecision, HandMachine, ReplaySource, RunStats, SampleSource, SimulatedPort,
};

const FILTER_LIMIT: Duration = Duration::from_secs(1);
const GRADIENT_LIMIT: Duration = Duration::from_secs(60);
const ICA_LIMIT: Duration = Duration::from_secs(60);
const ORACLE_LIMIT: Duration = Duration::from_secs(30);
const E2E_LIMIT: Duration = Duration::from_secs(15 * 60);

const PASSBAND_TOL_DB: f64 = 0.5;
const STOP_4HZ_DB: f64 = -24.0;
const STOP_EDGE_DB: f64 = -60.0;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SAMPLES: usize = 25;
const AMARI_MAX: f64 = 0.1;
const ICA_MIN_GOOD: usize = 9;
const E2E_MIN_ACC: f64 = 0.85;
const LATENCY_MAX_MS: f64 = 50.0;
const INT8_MAX_DROP: f64 = 0.02;
const SAFETY_SEQUENCES: usize = 3000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn report_line(name: &str, v: &Verdict, secs: f64) {
    use std::io::Write;
    let line = format!("ACCEPT {} {name}: {} [{secs:.1} s]\n", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    let _ = std::io::stdout().write_all(line.as_bytes());
    let _ = std::io::stdout().flush();
}

fn filter_contract() -> Verdict {
    let t0 = Instant::now();
    let f = design_bandpass(8.0, 40.0, 4, TARGET_FS).unwrap();
    let g20 = f.gain_db(20.0);
    let g4 = f.gain_db(4.0);
    let g_dc = f.gain_db(0.0);
    let g_nyq = f.gain_db(TARGET_FS / 2.0);
    let pole = f.max_pole_magnitude();
    let el = t0.elapsed();
    let pass = g20.abs() <= PASSBAND_TOL_DB
        && g4 <= STOP_4HZ_DB
        && g_dc <= STOP_EDGE_DB
        && g_nyq <= STOP_EDGE_DB
        && pole < 1.0
        && el < FILTER_LIMIT;
    verdict(
        pass,
        format!(
            "20 Hz {g20:+.3} dB (|.| <= {PASSBAND_TOL_DB}), 4 Hz {g4:.1} dB (<= {STOP_4HZ_DB}), DC {g_dc:.0} dB, \
             Nyquist {g_nyq:.0} dB (<= {STOP_EDGE_DB}), max |pole| {pole:.4} (< 1), {:.3} s (< 1 s)",
            el.as_secs_f64()
        ),
    )
}

fn objective(p: &CaeParams, x: &Array3<f64>, y: &[Label], cfg: &TrainConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = cae::forward(p, x.view(), NetMode::Train { dropout: 0.0 }, &mut rng).unwrap();
    let l = cae::loss(out.recon.view(), x.view(), out.logits.view(), y, cfg.lambda);
    let penalty: f64 = p
        .slots()
        .iter()
        .zip(p.tensors())
        .filter(|(s, _)| s.role == Role::Weight)
        .map(|(_, t)| t.iter().map(|w| w * w).sum::<f64>())
        .sum();
    l.total + 0.5 * cfg.weight_decay * penalty
}

fn gradient_gate() -> Verdict {
    let t0 = Instant::now();
    let p = CaeParams::init(&ArchDescriptor::default(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array3::from_shape_fn((4, 12, 250), |(_, c, t)| {
        (t as f64 * 0.07 * (c + 1) as f64).sin() + rng.random_range(-1.0..1.0)
    });
    let y: Vec<Label> = (0..4).map(Label::from_index).map(|l| Label::from_index(l.index() % 2)).collect();
    let cfg = TrainConfig { dropout: 0.0, weight_decay: 1e-3, ..TrainConfig::default() };
    let g = cae::grad(&p, x.view(), &y, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().grads;
    let slots = p.slots();
    let trainable: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].role.trainable()).collect();
    let base = cae::activation_pattern(&p, x.view()).unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-4;
    let (mut n, mut kinks, mut fails, mut worst, mut worst_abs) = (0, 0, 0, 0.0f64, 0.0f64);
    while n < GRAD_SAMPLES && kinks < 100 {
        let ti = trainable[n % trainable.len()];
        let j = pick.random_range(0..p.tensors()[ti].len());
        let mut plus = p.clone();
        plus.tensors_mut()[ti][j] += eps;
        let mut minus = p.clone();
        minus.tensors_mut()[ti][j] -= eps;
        if cae::activation_pattern(&plus, x.view()).unwrap() != base
            || cae::activation_pattern(&minus, x.view()).unwrap() != base
        {
            kinks += 1;
            continue;
        }
        n += 1;
        let analytic = g.tensors()[ti][j];
        let numeric = (objective(&plus, &x, &y, &cfg) - objective(&minus, &x, &y, &cfg)) / (2.0 * eps);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        worst_abs = worst_abs.max(abs);
        fails += (abs >= 1e-9 && rel >= GRAD_REL_TOL) as usize;
    }
    let el = t0.elapsed();
    verdict(
        n >= GRAD_SAMPLES && fails == 0 && el < GRADIENT_LIMIT,
        format!(
            "{n} parameters, worst relative error {worst:.2e} (< {GRAD_REL_TOL:e}, abs floor 1e-9), worst abs {worst_abs:.2e}, {kinks} kink redraws, {:.1} s (< 60 s)",
            el.as_secs_f64()
        ),
    )
}

fn ica_recovery() -> Verdict {
    use std::f64::consts::PI;
    let t0 = Instant::now();
    let mut good = 0;
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = 5000;
        let f: Vec<f64> = (0..3).map(|_| rng.random_range(1.0..8.0)).collect();
        let mut s = Array2::zeros((4, n));
        for t in 0..n {
            let tt = t as f64 / 250.0;
            let saw = tt * f[0];
            s[[0, t]] = 2.0 * (saw - saw.floor()) - 1.0;
            s[[1, t]] = (2.0 * PI * f[1] * tt).sin().signum();
            s[[2, t]] = (2.0 * PI * f[2] * tt).sin();
            let u: f64 = rng.random_range(-0.5..0.5);
            s[[3, t]] = -u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
        let a = Array2::from_shape_fn((12, 4), |_| rng.random_range(-1.0..1.0));
        let noise = Array2::from_shape_fn((12, n), |_| { let z: f64 = StandardNormal.sample(&mut rng); 1e-2 * z });
        let x = a.dot(&s) + noise;
        let model = fast_ica(&whiten(x.view()).unwrap(), 4, 1e-8, 1000, seed).unwrap();
        let amari = amari_index(model.full_unmixing().dot(&a).view());
        worst = worst.max(amari);
        good += (amari < AMARI_MAX) as usize;
    }
    let el = t0.elapsed();
    verdict(
        good >= ICA_MIN_GOOD && el < ICA_LIMIT,
        format!(
            "{good}/10 seeds with Amari < {AMARI_MAX} (need >= {ICA_MIN_GOOD}), worst {worst:.3}, {:.1} s (< 60 s)",
            el.as_secs_f64()
        ),
    )
}

fn says_move(x: f64, thr: f64, pol: i8) -> bool {
    if pol > 0 {
        x > thr
    } else {
        x <= thr
    }
}

/// Brute-force AdaBoost: every candidate stump scored by a direct weighted
/// sum over all samples.
fn reference_boost(x: ArrayView2<f64>, y: &[Label], rounds: usize) -> Vec<((usize, f64, i8), f64)> {
    let n = x.nrows();
    let mut w = vec![1.0 / n as f64; n];
    let mut out = vec![];
    for _ in 0..rounds {
        let mut best: Option<((usize, f64, i8), f64)> = None;
        for f in 0..x.ncols() {
            let mut vals: Vec<f64> = x.column(f).to_vec();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for pair in vals.windows(2) {
                let thr = pair[0] + (pair[1] - pair[0]) / 2.0;
                for pol in [1i8, -1] {
                    let err: f64 = (0..n).filter(|&i| says_move(x[[i, f]], thr, pol) != (y[i] == Label::Move)).map(|i| w[i]).sum();
                    if best.is_none_or(|(_, e)| err < e - TIE_EPS) {
                        best = Some(((f, thr, pol), err));
                    }
                }
            }
        }
        let (stump, err) = best.unwrap();
        if err >= 0.5 {
            break;
        }
        let alpha = if err <= 0.0 { ALPHA_CAP } else { ((1.0 - err) / err).ln().min(ALPHA_CAP) };
        out.push((stump, alpha));
        if err <= 0.0 {
            break;
        }
        for i in 0..n {
            if says_move(x[[i, stump.0]], stump.1, stump.2) != (y[i] == Label::Move) {
                w[i] *= alpha.exp();
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn gaussian_set(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<Label> = (0..n).map(|i| Label::from_index(i % 2)).collect();
    let x = Array2::from_shape_fn((n, d), |(i, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z + if y[i] == Label::Move && j % 8 == 0 { 0.6 } else { 0.0 }
    });
    (x, y)
}

fn adaboost_oracle() -> Verdict {
    let t0 = Instant::now();
    let (x, y) = gaussian_set(200, 64, 41);
    let (xt, _) = gaussian_set(200, 64, 42);
    let ens = train_adaboost(x.view(), &y, 50).unwrap();
    let reference = reference_boost(x.view(), &y, 50);
    let predict = |row: &[f64]| {
        let s: f64 = reference.iter().map(|&((f, thr, pol), a)| if says_move(row[f], thr, pol) { a } else { -a }).sum();
        if s > 0.0 {
            Label::Move
        } else {
            Label::Rest
        }
    };
    let mut mismatches = 0;
    let mut total = 0;
    for data in [&x, &xt] {
        for row in data.rows() {
            total += 1;
            mismatches += (ens.predict(row).0 != predict(row.as_slice().unwrap())) as usize;
        }
    }
    let same_stumps = ens.stumps.len() == reference.len()
        && ens.stumps.iter().zip(&reference).all(|(s, r)| (s.feature, s.threshold, s.polarity) == r.0);
    let el = t0.elapsed();
    verdict(
        mismatches == 0 && same_stumps && el < ORACLE_LIMIT,
        format!(
            "200x64, T=50: {mismatches}/{total} prediction mismatches, stump sequence identical: {same_stumps}, {:.1} s (< 30 s)",
            el.as_secs_f64()
        ),
    )
}

fn scb(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_scb")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("scb {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
    report: PathBuf,
    loso: PathBuf,
    root: PathBuf,
}

fn end_to_end(ws: &Workspace) -> (Verdict, Option<EvalReport>) {
    let t0 = Instant::now();
    let steps = scb(&["synth", "--subjects", "5", "--trials", "15", "--seed", "7", "--out", s(&ws.data)])
        .and_then(|_| scb(&["train", "--data", s(&ws.data), "--out", s(&ws.model), "--seed", "7"]))
        .and_then(|_| {
            scb(&["eval", "--data", s(&ws.data), "--model", s(&ws.model), "--loso", "--int8", "--out", s(&ws.loso)])
        });
    let el = t0.elapsed();
    if let Err(e) = steps {
        return (verdict(false, e), None);
    }
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(&ws.loso).unwrap()).unwrap();
    let mean = r.mean_fold_accuracy.unwrap_or(f64::NAN);
    let sep = r.separation.unwrap();
    let pass = mean >= E2E_MIN_ACC && sep.latent_silhouette > sep.raw_silhouette && r.folds.len() == 5 && el < E2E_LIMIT;
    let folds: Vec<String> = r.folds.iter().map(|f| format!("{:.3}", f.accuracy)).collect();
    (
        verdict(
            pass,
            format!(
                "LOSO mean fold accuracy {mean:.4} (>= {E2E_MIN_ACC}) folds [{}], latent silhouette {:.3} > raw {:.3}, \
                 {:.0} s (< 900 s)",
                folds.join(", "),
                sep.latent_silhouette,
                sep.raw_silhouette,
                el.as_secs_f64()
            ),
        ),
        Some(r),
    )
}

fn stream_offline(ws: &Workspace) -> Verdict {
    let pipe = Pipeline::load(&ws.model).unwrap();
    let path = ws.data.join("subject_02.eeg");
    let rec = read_recording(&path).unwrap();
    let cfg = EngineConfig::default();
    let offline = offline_decisions(&pipe, &rec, &cfg).unwrap();
    let mut src = ReplaySource::from_path(&path).unwrap();
    let mut engine = Engine::new(pipe, cfg).unwrap();
    let mut online: Vec<GatedDecision> = vec![];
    while let Some(f) = src.next_frame(None) {
        online.extend(engine.push_frame(&f, Instant::now()).unwrap());
    }
    let mismatches = online
        .iter()
        .zip(&offline)
        .filter(|(a, b)| (a.start_sample, a.raw_label, a.margin.to_bits(), a.gate) != (b.0, b.1, b.2.to_bits(), b.3))
        .count();
    let accepted = online.iter().filter(|d| d.accepted()).count();
    verdict(
        online.len() == offline.len() && mismatches == 0 && !online.is_empty(),
        format!(
            "{} streamed vs {} offline decisions, {mismatches} label/margin/gate mismatches (bitwise), {accepted} accepted",
            online.len(),
            offline.len()
        ),
    )
}

fn latency(ws: &Workspace, loso: Option<&EvalReport>) -> Verdict {
    let stats = ws.root.join("stream.json");
    let replay = format!("replay:{}", s(&ws.data.join("subject_01.eeg")));
    if let Err(e) = scb(&["stream", "--model", s(&ws.model), "--source", &replay, "--max-speed", "--out", s(&stats)]) {
        return verdict(false, e);
    }
    let st: RunStats = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    let Some(l) = st.latency else {
        return verdict(false, "no decisions".into());
    };
    let drop = loso.and_then(|r| r.quantized.as_ref()).map(|q| q.accuracy_drop);
    let pass = l.mean_ms < LATENCY_MAX_MS && l.p95_ms.is_finite() && drop.is_some_and(|d| d.abs() <= INT8_MAX_DROP);
    verdict(
        pass,
        format!(
            "{} decisions, mean {:.2} ms (< {LATENCY_MAX_MS}), p95 {:.2} ms, max {:.2} ms, {:.2e} J/decision, \
             {} bytes decode path; int8 accuracy drop {} (|.| <= {INT8_MAX_DROP})",
            l.n_decisions,
            l.mean_ms,
            l.p95_ms,
            l.max_ms,
            l.energy_j_per_decision,
            l.memory_peak_bytes,
            drop.map_or("n/a".into(), |d| format!("{:+.4}", d))
        ),
    )
}

fn decision(label: Label, gate: Gate) -> GatedDecision {
    GatedDecision {
        raw_label: label,
        margin: 0.0,
        gate,
        start_sample: 0,
        end_sample: 0,
        start_s: 0.0,
        end_s: 0.0,
        latency_ms: 0.0,
        cpu_ms: 0.0,
    }
}

fn safety() -> Verdict {
    let gates = [Gate::Accepted, Gate::LowConfidence, Gate::Artifact];
    let labels = [Label::Rest, Label::Move];
    let mut violations = 0;
    let mut commands = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..SAFETY_SEQUENCES {
        let k = 1 + i % 5;
        let mut m = HandMachine::default();
        let mut link = ActuatorLink::new(SimulatedPort::new(Duration::ZERO));
        let (mut last, mut last_seq) = (None, 0);
        for _ in 0..rng.random_range(1..120) {
            let d = decision(labels[rng.random_range(0..2)], gates[rng.random_range(0..3)]);
            let cmd = step_state_machine(&mut m, &d, k);
            if let Some(c) = cmd {
                commands += 1;
                violations += (!d.accepted()) as usize + (last == Some(c)) as usize;
                let seq = link.send(&c).map(|a| a.seq).unwrap_or(0);
                violations += (seq <= last_seq) as usize;
                last_seq = seq;
                last = Some(c);
            }
        }
    }
    let mut states = 0;
    for k in 1..=5 {
        for closed in [false, true] {
            for ms in 0..=k {
                for rs in 0..=k {
                    let s = HandMachine { closed, move_streak: ms, rest_streak: rs };
                    for l in labels {
                        for g in gates {
                            states += 1;
                            let mut m = s;
                            let cmd = step_state_machine(&mut m, &decision(l, g), k);
                            let ok = match (g, cmd) {
                                (Gate::Accepted, Some(ActuatorCommand::Close)) => !s.closed && m.closed,
                                (Gate::Accepted, Some(ActuatorCommand::Open)) => s.closed && !m.closed,
                                (Gate::Accepted, None) => m.closed == s.closed,
                                (Gate::Accepted, Some(_)) => false,
                                (_, c) => c.is_none() && m == s,
                            };
                            violations += (!ok || m.move_streak > k || m.rest_streak > k) as usize;
                        }
                    }
                }
            }
        }
    }
    verdict(
        violations == 0,
        format!(
            "{SAFETY_SEQUENCES} random decision sequences ({commands} commands) and {states} state/input pairs for k <= 5: \
             {violations} violations (gated command, repeated command, non-increasing seq, bad transition)"
        ),
    )
}

fn determinism(ws: &Workspace) -> Verdict {
    let again = ws.root.join("again");
    std::fs::create_dir_all(&again).unwrap();
    let data2 = again.join("data");
    let model2 = again.join("model.scbm");
    let eval1 = ws.root.join("eval1.json");
    let eval2 = again.join("eval2.json");
    let steps = scb(&["synth", "--subjects", "5", "--trials", "15", "--seed", "7", "--out", s(&data2)])
        .and_then(|_| scb(&["train", "--data", s(&ws.data), "--out", s(&model2), "--seed", "7"]))
        .and_then(|_| scb(&["eval", "--data", s(&ws.data), "--model", s(&ws.model), "--int8", "--out", s(&eval1)]))
        .and_then(|_| scb(&["eval", "--data", s(&ws.data), "--model", s(&model2), "--int8", "--out", s(&eval2)]));
    if let Err(e) = steps {
        return verdict(false, e);
    }
    let same = |a: &Path, b: &Path| std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
    let data_same = (0..5).all(|i| {
        let f = format!("subject_{i:02}");
        same(&ws.data.join(format!("{f}.eeg")), &data2.join(format!("{f}.eeg")))
            && same(&ws.data.join(format!("{f}.csv")), &data2.join(format!("{f}.csv")))
    });
    let model_same = same(&ws.model, &model2);
    let report_same = same(&ws.report, &model2.with_extension("json"));
    let eval_same = same(&eval1, &eval2);
    verdict(
        data_same && model_same && report_same && eval_same,
        format!(
            "second run with seed 7: recordings identical {data_same}, model bytes identical {model_same}, \
             training report identical {report_same}, eval report identical {eval_same}"
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let ws = Workspace {
        data: root.join("data"),
        model: root.join("model.scbm"),
        report: root.join("model.json"),
        loso: root.join("loso.json"),
        root,
        _dir: dir,
    };
    let mut failed = vec![];
    let mut run = |name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        report_line(name, &v, t0.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(name.to_string());
        }
    };
    run("filter-contract", &mut filter_contract);
    run("gradient-gate", &mut gradient_gate);
    run("ica-recovery", &mut ica_recovery);
    run("adaboost-oracle", &mut adaboost_oracle);
    let mut loso = None;
    run("end-to-end-synthetic", &mut || {
        let (v, r) = end_to_end(&ws);
        loso = r;
        v
    });
    let have_model = ws.model.exists();
    run("stream-offline-equivalence", &mut || {
        if have_model { stream_offline(&ws) } else { verdict(false, "no model".into()) }
    });
    run("latency-and-int8", &mut || if have_model { latency(&ws, loso.as_ref()) } else { verdict(false, "no model".into()) });
    run("safety", &mut safety);
    run("determinism", &mut || if have_model { determinism(&ws) } else { verdict(false, "no model".into()) });
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: FAILED {}", failed.join(", "));
        std::process::exit(1);
    }
}
