//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The shared training run takes roughly fifteen
//! minutes on one core.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segproto::data::{generate_dataset, stack, ArtifactLevel, LesionSample, SyntheticSpec};
use segproto::eval::{evaluate, prototypes_for, ConstantEmbedder, EvalReport, Unfused};
use segproto::explain::{episode_around, gradcam};
use segproto::fewshot::{self, ClassSplit, Metric};
use segproto::fusion::{ablate_lambda, ablation_csv, apply_mask, train, train_from, FusedModel, FusionConfig, Mode};
use segproto::gradcheck::{standard_suite, Fault, FD_STEP};
use segproto::tape::BCE_EPS;
use segproto::{Result, Tape, Tensor};

const SEEN: [usize; 4] = [0, 2, 4, 6];
const UNSEEN: [usize; 3] = [1, 3, 5];

/// Desk-scale settings: the encoder learns at 1e-3 and the segmenter trains
/// everything past its first encoder stage.
fn desk_config() -> FusionConfig {
    FusionConfig {
        lr_cls: 1e-3,
        lr_seg: 1e-3,
        seg_trainable: ["seg.mid", "seg.dec1", "seg.dec0", "seg.head"].map(String::from).to_vec(),
        ..FusionConfig::default()
    }
}

fn split() -> ClassSplit {
    ClassSplit::new(SEEN.to_vec(), UNSEEN.to_vec()).unwrap()
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn failed(e: &segproto::Error) -> Result<Verdict> {
    verdict(false, format!("error: {e}"))
}

fn report(id: usize, title: &str, outcome: Result<Verdict>) -> bool {
    let (passed, detail) = match outcome {
        Ok(v) => (v.passed, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {id:>2} {} {title}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn minutes(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

// 1

fn gradient_integrity() -> Result<Verdict> {
    let start = Instant::now();
    let reports = standard_suite(Fault::None)?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.worst_relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    verdict(
        failed.is_empty() && worst < 1e-4 && FD_STEP == 1e-5 && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst relative error {worst:.2e}, {:.1} s{}",
            reports.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
        ),
    )
}

// 2

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn([rows, cols], |_| rng.random_range(-2.0..2.0))
}

fn loop_euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

fn loop_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

fn loop_probabilities(q: &Tensor, p: &Tensor, metric: Metric) -> Vec<Vec<f64>> {
    let (nq, nk) = (q.shape()[0], p.shape()[0]);
    let mut out = Vec::new();
    for i in 0..nq {
        let d: Vec<f64> = (0..nk)
            .map(|j| match metric {
                Metric::Euclidean => loop_euclidean(q.row(i), p.row(j)),
                _ => loop_cosine(q.row(i), p.row(j)),
            })
            .collect();
        let mut z = 0.0;
        for dj in &d {
            z += (-dj).exp();
        }
        out.push(d.iter().map(|dj| (-dj).exp() / z).collect());
    }
    out
}

/// Largest absolute deviation over all instances of one quantity.
struct Worst(f64);

impl Worst {
    fn see(&mut self, a: f64, b: f64) {
        self.0 = self.0.max((a - b).abs());
    }
}

fn oracle_equivalence() -> Result<Verdict> {
    const INSTANCES: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: Vec<(&str, Worst)> = ["euclidean", "cosine", "prototypes", "probabilities", "loss", "bce", "apply_mask"]
        .into_iter()
        .map(|n| (n, Worst(0.0)))
        .collect();
    for _ in 0..INSTANCES {
        let (nq, k, d) = (rng.random_range(1..8), rng.random_range(2..6), rng.random_range(1..10));
        let q = random_matrix(nq, d, &mut rng);
        let p = random_matrix(k, d, &mut rng);
        for (slot, metric) in [(0, Metric::Euclidean), (1, Metric::Cosine)] {
            let mut tape = Tape::new();
            let (qv, pv) = (tape.constant(q.clone()), tape.constant(p.clone()));
            let dist = fewshot::distances(&mut tape, qv, pv, metric)?;
            for i in 0..nq {
                for j in 0..k {
                    let want = match metric {
                        Metric::Euclidean => loop_euclidean(q.row(i), p.row(j)),
                        _ => loop_cosine(q.row(i), p.row(j)),
                    };
                    worst[slot].1.see(tape.value(dist).at(&[i, j]), want);
                }
            }
        }

        let per_class = rng.random_range(1..5);
        let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
        let emb = random_matrix(labels.len(), d, &mut rng);
        let protos = fewshot::compute_prototypes(&emb, &labels, k)?;
        for c in 0..k {
            for j in 0..d {
                let (mut s, mut n) = (0.0, 0.0);
                for (r, &l) in labels.iter().enumerate() {
                    if l == c {
                        s += emb.at(&[r, j]);
                        n += 1.0;
                    }
                }
                worst[2].1.see(protos.vectors.at(&[c, j]), s / n);
            }
        }

        let metric = if rng.random_bool(0.5) { Metric::Euclidean } else { Metric::Cosine };
        let probs = fewshot::classify_queries(&q, &fewshot::PrototypeSet { vectors: p.clone() }, metric)?;
        let want = loop_probabilities(&q, &p, metric);
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                worst[3].1.see(probs.at(&[i, j]), w);
            }
        }
        let truth: Vec<usize> = (0..nq).map(|_| rng.random_range(0..k)).collect();
        let mut nll = 0.0;
        for (i, &t) in truth.iter().enumerate() {
            nll -= want[i][t].ln();
        }
        nll /= nq as f64;
        let mut tape = Tape::new();
        let (qv, pv) = (tape.constant(q.clone()), tape.constant(p.clone()));
        let lp = fewshot::log_probabilities(&mut tape, qv, pv, metric)?;
        let from_log = fewshot::nll_loss(&mut tape, lp, &truth)?;
        let pr = tape.exp(lp);
        let from_probs = fewshot::classification_loss(&mut tape, pr, &truth)?;
        worst[4].1.see(tape.value(from_log).item(), nll);
        worst[4].1.see(tape.value(from_probs).item(), nll);

        let (b, s) = (rng.random_range(1..4), rng.random_range(1..6));
        let pred = Tensor::from_fn([b, 1, s, s], |_| rng.random_range(0.0..1.0));
        let target = Tensor::from_fn([b, 1, s, s], |_| f64::from(u8::from(rng.random_bool(0.4))));
        let mut bce = 0.0;
        for i in 0..pred.numel() {
            let pi = pred.data()[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
            let yi = target.data()[i];
            bce -= yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln();
        }
        bce /= pred.numel() as f64;
        let mut tape = Tape::new();
        let (pv, tv) = (tape.constant(pred.clone()), tape.constant(target));
        let l = tape.bce_loss(pv, tv)?;
        worst[5].1.see(tape.value(l).item(), bce);

        let image = Tensor::from_fn([b, 3, s, s], |_| rng.random_range(0.0..1.0));
        let mut tape = Tape::new();
        let (iv, mv) = (tape.constant(image.clone()), tape.constant(pred.clone()));
        let gated = apply_mask(&mut tape, iv, mv)?;
        for n in 0..b {
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let want = image.at(&[n, c, y, x]) * pred.at(&[n, 0, y, x]);
                        worst[6].1.see(tape.value(gated).at(&[n, c, y, x]), want);
                    }
                }
            }
        }
    }
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, w)| w.0.is_nan() || w.0 > 1e-12)
        .map(|(n, w)| format!("{n} {:.1e}", w.0))
        .collect();
    let max = worst.iter().map(|(_, w)| w.0).fold(0.0, f64::max);
    verdict(
        bad.is_empty(),
        format!(
            "{} quantities x {INSTANCES} instances, worst deviation {max:.1e}{}",
            worst.len(),
            if bad.is_empty() { String::new() } else { format!(", over 1e-12: {bad:?}") }
        ),
    )
}

// shared run for 3, 4, 7, 8, 10

struct MainRun {
    data: Vec<LesionSample>,
    model: FusedModel,
    config: FusionConfig,
    runtime: Duration,
    report: EvalReport,
    bce_before: f64,
    bce_per_epoch: Vec<f64>,
}

/// Mean mask BCE over the unseen-class samples, which training never sees.
fn held_out_bce(model: &FusedModel, data: &[LesionSample]) -> Result<f64> {
    let held: Vec<&LesionSample> = data.iter().filter(|s| UNSEEN.contains(&s.label)).collect();
    let mut total = 0.0;
    for chunk in held.chunks(40) {
        let (images, masks) = stack(chunk)?;
        let pred = model.masks(&images)?;
        let mut tape = Tape::new();
        let (p, y) = (tape.constant(pred), tape.constant(masks));
        let l = tape.bce_loss(p, y)?;
        total += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(total / held.len() as f64)
}

fn main_run() -> Result<MainRun> {
    let data = generate_dataset(&SyntheticSpec::default())?;
    let config = desk_config();
    let start = Instant::now();
    let initial = FusedModel::init(&config)?;
    let bce_before = held_out_bce(&initial, &data)?;
    let mut bce_per_epoch = Vec::new();
    let (model, _) = train_from(initial, &data, &split(), &config, |_, m| {
        bce_per_epoch.push(held_out_bce(m, &data)?);
        Ok(())
    })?;
    let report = evaluate(&model, &data, &UNSEEN, config.k, config.n, config.q, config.metric, 100, config.seed)?;
    Ok(MainRun {
        runtime: start.elapsed(),
        data,
        model,
        config,
        report,
        bce_before,
        bce_per_epoch,
    })
}

fn learnability(run: &MainRun) -> Result<Verdict> {
    let c = &run.config;
    verdict(
        run.report.mean >= 0.90 && run.runtime < Duration::from_secs(30 * 60),
        format!(
            "{}-way {}-shot {}, {} epochs x {} tasks: accuracy {:.4} over {} unseen episodes, {} (includes per-epoch held-out BCE)",
            c.k,
            c.n,
            c.metric,
            c.epochs,
            c.tasks,
            run.report.mean,
            run.report.accuracies.len(),
            minutes(run.runtime)
        ),
    )
}

fn shot_sweep(run: &MainRun) -> Result<Vec<EvalReport>> {
    let c = &run.config;
    [1, 3, 5]
        .iter()
        .map(|&n| evaluate(&run.model, &run.data, &UNSEEN, c.k, n, c.q, c.metric, 1000, c.seed))
        .collect()
}

fn shot_monotonicity(sweep: &[EvalReport]) -> Result<Verdict> {
    let (a1, a3, a5) = (sweep[0].mean, sweep[1].mean, sweep[2].mean);
    verdict(
        a5 >= a3 - 0.02 && a3 >= a1 - 0.02,
        format!("1-shot {a1:.4}, 3-shot {a3:.4}, 5-shot {a5:.4} (1000 episodes each)"),
    )
}

// 5

fn fusion_benefit() -> Result<Verdict> {
    let base = SyntheticSpec::default();
    let spec = SyntheticSpec::preset(base.classes.len(), base.samples_per_class, ArtifactLevel::High, base.seed);
    let data = generate_dataset(&spec)?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut acc = [0.0; 2];
        for (slot, mode) in [Mode::E1, Mode::E2].into_iter().enumerate() {
            let config = FusionConfig {
                mode,
                seed,
                lambda: 2.0,
                epochs: 2,
                tasks: 50,
                ..desk_config()
            };
            let (model, _) = train(&data, &split(), &config)?;
            acc[slot] = evaluate(&model, &data, &UNSEEN, config.k, config.n, config.q, config.metric, 1000, seed)?.mean;
        }
        wins += usize::from(acc[1] >= acc[0]);
        rows.push(format!("seed {seed} E1 {:.4} E2 {:.4}", acc[0], acc[1]));
    }
    verdict(wins >= 2, format!("E2 >= E1 in {wins}/3 seeds on high artifacts, 2 x 50 tasks ({})", rows.join("; ")))
}

// 6

fn ablation_harness() -> Result<Verdict> {
    let data = generate_dataset(&SyntheticSpec::default())?;
    let base = FusionConfig {
        epochs: 1,
        tasks: 5,
        ..desk_config()
    };
    let lambdas = [1.0, 2.0, 3.0, 4.0];
    let first = ablate_lambda(&data, &split(), &base, &lambdas, 100)?;
    let second = ablate_lambda(&data, &split(), &base, &lambdas, 100)?;
    let csv = ablation_csv(&first);
    let rows_ok = first.len() == 4
        && csv.lines().count() == 5
        && first.iter().zip(lambdas).all(|(r, l)| r.lambda == l);
    let same = first == second && csv == ablation_csv(&second);
    let means: Vec<String> = first.iter().map(|r| format!("λ={} {:.4}", r.lambda, r.report.mean)).collect();
    verdict(
        rows_ok && same,
        format!("{} rows ({}), re-run {}", first.len(), means.join(", "), if same { "identical" } else { "differs" }),
    )
}

// 7

fn hand_margin(accuracies: &[f64], z: f64) -> f64 {
    let t = accuracies.len() as f64;
    let mut mean = 0.0;
    for a in accuracies {
        mean += a;
    }
    mean /= t;
    let mut ss = 0.0;
    for a in accuracies {
        ss += (a - mean) * (a - mean);
    }
    z * (ss / (t - 1.0)).sqrt() / t.sqrt()
}

fn ci_protocol(reports: &[&EvalReport]) -> Result<Verdict> {
    let z = [(75, 1.1503), (90, 1.6449), (95, 1.9600)];
    let mut checked = 0;
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for r in reports.iter().filter(|r| hand_margin(&r.accuracies, 1.0) > 0.0) {
        checked += 1;
        ok &= r.margin(75) < r.margin(90) && r.margin(90) < r.margin(95);
        for (level, zv) in z {
            let diff = (r.margin(level) - hand_margin(&r.accuracies, zv)).abs();
            worst = worst.max(diff);
            ok &= diff <= 1e-9;
        }
    }
    let fixture: Vec<f64> = (0..1000).map(|i| f64::from(u8::from(i < 500))).collect();
    let fixture = EvalReport::from_accuracies(fixture, 2, 5, 15, Metric::Cosine, 0)?;
    let m95 = fixture.margin(95);
    verdict(
        ok && checked > 0 && (m95 - 0.0310).abs() <= 1e-4,
        format!("{checked} evaluations ordered, worst deviation from hand margin {worst:.1e}; fixture margin95 {m95:.4}"),
    )
}

// 8

fn segmentation_learning(run: &MainRun) -> Result<Verdict> {
    let last = *run.bce_per_epoch.last().unwrap_or(&f64::NAN);
    let ratio = last / run.bce_before;
    let trace: Vec<String> = run.bce_per_epoch.iter().map(|b| format!("{b:.3}")).collect();
    verdict(
        ratio < 0.5,
        format!(
            "held-out BCE {:.4} before training, {last:.4} after ({:.1}%); per epoch [{}]",
            run.bce_before,
            100.0 * ratio,
            trace.join(" ")
        ),
    )
}

// 9

fn chance_control() -> Result<Verdict> {
    let data = generate_dataset(&SyntheticSpec::default())?;
    let r = evaluate(&ConstantEmbedder { dim: 8 }, &data, &UNSEEN, 2, 5, 15, Metric::Cosine, 1000, 0)?;
    verdict((0.45..=0.55).contains(&r.mean), format!("constant embedding scores {:.4} over 1000 episodes", r.mean))
}

// 10

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compares the fused model against a separately trained baseline (same
/// seed and episodes, encoder only, raw images). The fused encoder applied to
/// raw images is reported alongside.
fn gradcam_contract(run: &MainRun) -> Result<Verdict> {
    let c = &run.config;
    let (baseline, _) = train(&run.data, &split(), &FusionConfig { mode: Mode::Baseline, ..c.clone() })?;
    let mut fused = Vec::new();
    let mut base = Vec::new();
    let mut raw = Vec::new();
    let mut table = String::from("id,class,fused_in_mask,baseline_in_mask,fused_encoder_raw_in_mask\n");
    let mut in_range = true;
    for (idx, sample) in run.data.iter().enumerate().filter(|(_, s)| UNSEEN.contains(&s.label)) {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(idx as u64);
        let ep = episode_around(&run.data, &UNSEEN, idx, c.k, c.n, &mut rng)?;
        let support: Vec<&LesionSample> = ep.support.iter().map(|&i| &run.data[i]).collect();
        let fp = prototypes_for(&run.model, &support, &ep.support_labels, c.k)?;
        let bp = prototypes_for(&Unfused(&baseline), &support, &ep.support_labels, c.k)?;
        let rp = prototypes_for(&Unfused(&run.model), &support, &ep.support_labels, c.k)?;
        let f = gradcam(&run.model, sample, 0, &fp, c.metric, true)?;
        let b = gradcam(&baseline, sample, 0, &bp, c.metric, false)?;
        let r = gradcam(&run.model, sample, 0, &rp, c.metric, false)?;
        for map in [&f, &b, &r] {
            let max = map.heatmap.data().iter().copied().fold(0.0, f64::max);
            in_range &= map.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)) && (max == 1.0 || max == 0.0);
        }
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            sample.id, sample.label, f.in_mask_fraction, b.in_mask_fraction, r.in_mask_fraction
        );
        fused.push(f.in_mask_fraction);
        base.push(b.in_mask_fraction);
        raw.push(r.in_mask_fraction);
    }
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_overlap.csv");
    std::fs::write(&path, &table).map_err(|e| segproto::Error::Io { path: path.clone(), source: e })?;

    let mut silent = run.model.clone();
    silent.encoder.get_mut("enc.fc.w").expect("encoder head").data_mut().fill(0.0);
    let probe = run.data.iter().find(|s| UNSEEN.contains(&s.label)).expect("unseen sample");
    let support: Vec<&LesionSample> = run.data.iter().filter(|s| UNSEEN[..2].contains(&s.label)).take(80).collect();
    let labels: Vec<usize> = support.iter().map(|s| usize::from(s.label == UNSEEN[1])).collect();
    let protos = prototypes_for(&run.model, &support, &labels, 2)?;
    let zero = gradcam(&silent, probe, 0, &protos, c.metric, true)?;
    let zero_ok = zero.heatmap.data().iter().all(|&v| v == 0.0) && zero.in_mask_fraction == 0.0;

    let (mf, mb, mr) = (median(&mut fused), median(&mut base), median(&mut raw));
    let margin = mf - mb;
    let direction = if margin >= 0.05 {
        "fused ahead"
    } else if margin > -0.05 {
        "margin under 0.05, report-only"
    } else {
        "fused behind"
    };
    verdict(
        in_range && zero_ok && margin > -0.05,
        format!(
            "{} samples, maps in range {in_range}, zero-gradient map zero {zero_ok}; median in-mask fused {mf:.3} vs baseline {mb:.3} ({margin:+.3}, {direction}); fused encoder on raw images {mr:.3}; per-sample table {}",
            fused.len(),
            path.display()
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut all = true;
    all &= report(1, "gradient integrity", gradient_integrity());
    all &= report(2, "oracle equivalence", oracle_equivalence());
    match main_run() {
        Ok(run) => {
            all &= report(3, "learnability", learnability(&run));
            let sweep = shot_sweep(&run);
            match &sweep {
                Ok(s) => all &= report(4, "shot monotonicity", shot_monotonicity(s)),
                Err(e) => all &= report(4, "shot monotonicity", failed(e)),
            }
            all &= report(5, "fusion benefit", fusion_benefit());
            all &= report(6, "lambda ablation harness", ablation_harness());
            let mut evals = vec![&run.report];
            if let Ok(s) = &sweep {
                evals.extend(s);
            }
            all &= report(7, "confidence intervals", ci_protocol(&evals));
            all &= report(8, "segmentation learning", segmentation_learning(&run));
            all &= report(9, "chance-level control", chance_control());
            all &= report(10, "grad-cam contract", gradcam_contract(&run));
        }
        Err(e) => {
            for (id, title) in [(3, "learnability"), (4, "shot monotonicity"), (8, "segmentation learning"), (10, "grad-cam contract")] {
                report(id, title, failed(&e));
            }
            all = false;
            all &= report(5, "fusion benefit", fusion_benefit());
            all &= report(6, "lambda ablation harness", ablation_harness());
            all &= report(7, "confidence intervals", ci_protocol(&[]));
            all &= report(9, "chance-level control", chance_control());
        }
    }
    println!("acceptance: {} in {}", if all { "all criteria PASS" } else { "FAILED" }, minutes(start.elapsed()));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
