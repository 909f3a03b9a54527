use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segproto::checkpoint;
use segproto::data::{export_dataset, generate_dataset, load_directory_dataset, LesionSample};
use segproto::eval::{evaluate, prototypes_for, Unfused};
use segproto::explain::{episode_around, export_heatmap, gradcam};
use segproto::fewshot::SplitSide;
use segproto::fusion::{train_from, FusedModel, Mode};
use segproto::gradcheck::{standard_suite, Fault};
use segproto::kv;
use segproto::{Error, Result};

use crate::config::RunConfig;

pub const RESOLVED_CONFIG: &str = "config.txt";
pub const SPEC_FILE: &str = "spec.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const MODEL_FILE: &str = "model.pfv1";
pub const OVERLAP_CSV: &str = "overlap.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes via a sibling temporary file so readers never see partial output.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp, contents)?;
    fs::rename(&tmp, path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn persist_config(config: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    write(&out.join(RESOLVED_CONFIG), &kv::format(&config.to_key_values()))
}

fn load_model(config: &RunConfig, checkpoint_path: &Path) -> Result<FusedModel> {
    let stored = checkpoint::load(checkpoint_path)?;
    let mut model = FusedModel::init(&config.fusion)?;
    model.load_registry(&stored)?;
    Ok(model)
}

fn load_data(dir: &Path) -> Result<Vec<LesionSample>> {
    let data = load_directory_dataset(dir)?;
    for s in &data {
        s.validate()?;
    }
    Ok(data)
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let samples = generate_dataset(&config.data)?;
    create_dir(out)?;
    export_dataset(&samples, out)?;
    write(&out.join(SPEC_FILE), &kv::format(&config.data.to_key_values()))?;
    persist_config(config, out)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn train(config: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let split = config.split()?;
    let data = load_data(data_dir)?;
    persist_config(config, out)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let model = FusedModel::init(&config.fusion)?;
    let (model, log) = train_from(model, &data, &split, &config.fusion, |epoch, m| {
        let path = ckpt_dir.join(format!("epoch_{epoch:02}.pfv1"));
        checkpoint::save(&m.to_registry()?, &path)?;
        eprintln!(
            "epoch {epoch}: checkpoint {}",
            path.file_name().unwrap_or_default().to_string_lossy()
        );
        Ok(())
    })?;
    checkpoint::save(&model.to_registry()?, &out.join(MODEL_FILE))?;
    write(&out.join(TRAIN_LOG), &log.to_csv())?;
    if let Some(last) = log.last_epoch() {
        println!(
            "trained {} tasks; final-epoch accuracy {:.4}",
            log.records.len(),
            log.epoch_mean_accuracy(last).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

pub fn eval(config: &RunConfig, checkpoint_path: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let model = load_model(config, checkpoint_path)?;
    let split = config.split()?;
    let data = load_data(data_dir)?;
    let f = &config.fusion;
    let mut reports = Vec::with_capacity(config.shots.len());
    let classes = split.side(SplitSide::Unseen);
    for &n in &config.shots {
        // a baseline checkpoint never saw masks, so it embeds raw images
        let report = if f.mode == Mode::Baseline {
            evaluate(&Unfused(&model), &data, classes, f.k, n, f.q, f.metric, config.episodes, f.seed)?
        } else {
            evaluate(&model, &data, classes, f.k, n, f.q, f.metric, config.episodes, f.seed)?
        };
        reports.push(report);
    }
    persist_config(config, out)?;
    for r in &reports {
        let name = format!("eval_k{}_n{}_{}_T{}.csv", r.k, r.n, r.metric, r.accuracies.len());
        write_atomic(&out.join(&name), &r.to_csv())?;
        println!(
            "k={} n={} {}: mean {:.4} ± {:.4} (95%) over {} episodes",
            r.k,
            r.n,
            r.metric,
            r.mean,
            r.margin(95),
            r.accuracies.len()
        );
    }
    Ok(())
}

/// Fused and raw heatmaps per sample. The raw map comes from `baseline`
/// when given, otherwise from the fused model's own encoder.
pub fn gradcam_cmd(
    config: &RunConfig,
    checkpoint_path: &Path,
    baseline: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    ids: &[String],
) -> Result<()> {
    if config.fusion.mode == Mode::Baseline {
        return Err(Error::Config(
            "gradcam needs a fused checkpoint; pass the baseline with --baseline".into(),
        ));
    }
    let model = load_model(config, checkpoint_path)?;
    let raw_model = match baseline {
        Some(path) => load_model(config, path)?,
        None => model.clone(),
    };
    let split = config.split()?;
    let data = load_data(data_dir)?;
    let indices: Vec<usize> = ids
        .iter()
        .map(|id| {
            data.iter()
                .position(|s| &s.id == id)
                .ok_or_else(|| Error::Dataset(format!("unknown sample id `{id}`")))
        })
        .collect::<Result<_>>()?;
    persist_config(config, out)?;
    let f = &config.fusion;
    let mut csv = String::from("id,class,fused_in_mask,raw_in_mask\n");
    for (&idx, id) in indices.iter().zip(ids) {
        let sample = &data[idx];
        let side = if split.unseen().contains(&sample.label) {
            split.unseen()
        } else {
            split.seen()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
        rng.set_stream(idx as u64);
        let ep = episode_around(&data, side, idx, f.k, f.n, &mut rng)?;
        let support: Vec<&LesionSample> = ep.support.iter().map(|&i| &data[i]).collect();
        let fused_p = prototypes_for(&model, &support, &ep.support_labels, f.k)?;
        let raw_p = prototypes_for(&Unfused(&raw_model), &support, &ep.support_labels, f.k)?;
        let fused = gradcam(&model, sample, 0, &fused_p, f.metric, true)?;
        let raw = gradcam(&raw_model, sample, 0, &raw_p, f.metric, false)?;
        let stem = format!("{id}_{}_{}", f.mode, f.metric);
        export_heatmap(&fused, &out.join(format!("{stem}_fused.pgm")))?;
        export_heatmap(&raw, &out.join(format!("{stem}_raw.pgm")))?;
        let _ = writeln!(
            csv,
            "{id},{},{:?},{:?}",
            sample.label, fused.in_mask_fraction, raw.in_mask_fraction
        );
    }
    write_atomic(&out.join(OVERLAP_CSV), &csv)?;
    println!("wrote {} heatmap pairs to {}", ids.len(), out.display());
    Ok(())
}

/// Returns whether every check passed.
pub fn gradcheck(out: Option<&PathBuf>, inject_fault: bool) -> Result<bool> {
    let fault = if inject_fault { Fault::FlipSign } else { Fault::None };
    let reports = standard_suite(fault)?;
    let mut csv = String::from("check,parameters,worst_relative_error,worst_at,tolerance,passed\n");
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!(
            "{:<4} {:<42} {:>5} params  worst {:.3e} at {}",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.checked,
            r.worst_relative_error,
            r.worst_at
        );
        worst = worst.max(r.worst_relative_error);
        let _ = writeln!(
            csv,
            "{},{},{:e},{},{:e},{}",
            r.name,
            r.checked,
            r.worst_relative_error,
            r.worst_at,
            r.tolerance,
            r.passed()
        );
    }
    let passed = reports.iter().all(|r| r.passed());
    println!(
        "gradcheck: {} checks, worst relative error {worst:.3e}: {}",
        reports.len(),
        if passed { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("gradcheck.csv"), &csv)?;
    }
    Ok(passed)
}
