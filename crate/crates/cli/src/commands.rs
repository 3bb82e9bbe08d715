use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dfenet::data::{self, extract_samples, load_volume, make_folds, preprocess, synth_dataset, SynthOptions};
use dfenet::kv;
use dfenet::metrics::{binarize, confusion};
use dfenet::model::{Model, ModelConfig, Variant};
use dfenet::train::experiment::{cross_validate, run_ablation, CvOptions};
use dfenet::train::verify::{grad_check, Block, VerifyOptions};
use dfenet::train::{
    evaluate, load_checkpoint, predict_samples, train_fold, write_json, Evaluation, FoldData, RunOptions,
};
use serde_json::json;

use crate::config::{parse_assignments, CliConfig};
use crate::run::{load_dataset, subject_ids, RunDir};
use crate::{ConfigArgs, CvArgs, EvalArgs, GradcheckArgs, ParamsArgs, PredictArgs, SynthArgs, TrainArgs};

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<CliConfig> {
        let mut overrides = parse_assignments(&self.set)?;
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        flag("data", self.data.as_ref().map(|p| p.display().to_string()));
        flag("variant", self.variant.clone());
        flag("channels", self.channels.clone());
        flag("max_epochs", self.max_epochs.map(|v| v.to_string()));
        flag("lr0", self.lr.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("train_seed", self.seed.map(|v| v.to_string()));
        flag("loss_reduction", self.loss_reduction.clone());
        for (k, v) in extra {
            overrides.push((k.to_string(), v.clone()));
        }
        CliConfig::load(self.config.as_deref(), &overrides)
    }
}

fn mean_line(label: &str, m: &dfenet::metrics::MetricRecord) -> String {
    format!("{label}: DSC {:.4}  IoU {:.4}  Precision {:.4}  Recall {:.4}", m.dsc, m.iou, m.precision, m.recall)
}

fn evaluation_csv(e: &Evaluation) -> String {
    let mut s = String::from("subject,dsc,iou,precision,recall\n");
    for (id, m) in &e.per_subject {
        s.push_str(&format!("{id},{},{},{},{}\n", m.dsc, m.iou, m.precision, m.recall));
    }
    let m = e.mean;
    s.push_str(&format!("mean,{},{},{},{}\n", m.dsc, m.iou, m.precision, m.recall));
    s
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let size = kv::parse_usize_list(&a.size)?;
    let [z, h, w] = size[..] else {
        bail!("--size expects Z,H,W, got `{}`", a.size);
    };
    let mut opts = SynthOptions { size: [z, h, w], ..SynthOptions::default() };
    if let Some(n) = a.noise {
        opts.noise = n;
    }
    if let Some(c) = a.contrast {
        opts.contrast = c;
    }
    let volumes = synth_dataset(a.subjects as usize, a.seed, &opts)?;
    data::synth::write_dataset(&volumes, &a.out)?;
    println!("wrote {} subjects of {z}x{h}x{w} to {}", volumes.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve(&[])?;
    let run = RunDir::create(&a.cfg.runs_dir, "train", &cfg.to_text(), a.cfg.verbose)?;
    let volumes = load_dataset(cfg.data_dir()?, cfg.data.target_size, &run.log)?;
    let plan = make_folds(&subject_ids(&volumes), cfg.data.k, cfg.data.ratios, cfg.data.split_seed)?;
    ensure!(a.fold < plan.folds.len(), "--fold {} out of range: the plan has {} fold(s)", a.fold, plan.folds.len());
    let fold = &plan.folds[a.fold];
    write_json(fold, &run.file("fold.json"))?;
    let data = FoldData::build(&volumes, fold, cfg.model.context_depth, cfg.train.balance, cfg.train.seed)?;
    let opts = RunOptions {
        label: format!("{}/fold{}", cfg.model.variant, a.fold),
        checkpoint: Some(run.file("best.ckpt")),
        eval_train: true,
    };
    let (record, _) = train_fold(&cfg.model, &cfg.train, &cfg.loss, &data, &opts, &run.log)?;
    run.write("report.csv", &record.epochs_csv())?;
    write_json(&record, &run.file("run.json"))?;
    println!(
        "{} fold {}: {} epochs ({:?}), best epoch {}, lr {:e}",
        cfg.model.variant,
        a.fold,
        record.epochs.len(),
        record.stop_reason,
        record.best_epoch,
        record.final_lr
    );
    println!("{}", mean_line("validation", &record.best_val));
    if let Some(t) = &record.test {
        println!("{}", mean_line("test", &t.mean));
    }
    println!("run directory: {}", run.path.display());
    Ok(())
}

pub fn cv(a: CvArgs, ablate: bool) -> Result<()> {
    let extra: Vec<(&str, String)> = a.k.map(|k| ("k", k.to_string())).into_iter().collect();
    let cfg = a.cfg.resolve(&extra)?;
    let run = RunDir::create(&a.cfg.runs_dir, if ablate { "ablate" } else { "cv" }, &cfg.to_text(), a.cfg.verbose)?;
    let volumes = load_dataset(cfg.data_dir()?, cfg.data.target_size, &run.log)?;
    let plan = make_folds(&subject_ids(&volumes), cfg.data.k, cfg.data.ratios, cfg.data.split_seed)?;
    write_json(&plan, &run.file("folds.json"))?;
    let ckpt = run.file("checkpoints");
    std::fs::create_dir_all(&ckpt).with_context(|| format!("creating {}", ckpt.display()))?;
    let opts = CvOptions { parallel: a.parallel_folds, checkpoint_dir: Some(ckpt), eval_train: true };
    if ablate {
        let report = run_ablation(&volumes, &cfg.model, &cfg.train, &cfg.loss, &plan, &opts, &run.log)?;
        run.write("report.csv", &report.csv())?;
        run.write("table.txt", &report.table())?;
        for row in &report.rows {
            run.write(&format!("curves-{}.csv", row.variant), &row.cv.curves_csv())?;
        }
        write_json(&report, &run.file("ablation.json"))?;
        print!("{}", report.table());
    } else {
        let report = cross_validate(&volumes, &cfg.model, &cfg.train, &cfg.loss, &plan, &opts, &run.log)?;
        run.write("report.csv", &report.folds_csv())?;
        run.write("curves.csv", &report.curves_csv())?;
        write_json(&report, &run.file("cv.json"))?;
        println!("{} over {} fold(s)", cfg.model.variant, report.per_fold.len());
        println!("{}", mean_line("mean", &report.mean));
        println!("{}", mean_line("std", &report.std));
        for r in &report.runs {
            if let Some(t) = &r.train_eval {
                println!("{}: train DSC {:.4}", r.label, t.mean.dsc);
            }
        }
    }
    println!("run directory: {}", run.path.display());
    Ok(())
}

/// Loads a checkpoint, requiring it to match the model configuration when
/// one was given explicitly.
fn load_model(path: &Path, cfg: &CliConfig) -> Result<Model<f32>> {
    let expected = cfg.model_explicit.then_some(&cfg.model);
    Ok(load_checkpoint::<f32>(path, expected)?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.cfg.resolve(&[])?;
    let model = load_model(&a.checkpoint, &cfg)?;
    let run = RunDir::create(&a.cfg.runs_dir, "eval", &cfg.to_text(), a.cfg.verbose)?;
    let volumes = load_dataset(cfg.data_dir()?, cfg.data.target_size, &run.log)?;
    let depth = model.config().context_depth;
    let volumes = match a.fold {
        None => volumes,
        Some(f) => {
            let plan = make_folds(&subject_ids(&volumes), cfg.data.k, cfg.data.ratios, cfg.data.split_seed)?;
            ensure!(f < plan.folds.len(), "--fold {f} out of range: the plan has {} fold(s)", plan.folds.len());
            volumes.into_iter().filter(|v| plan.folds[f].test.contains(&v.subject_id)).collect()
        }
    };
    let mut samples = Vec::new();
    for v in &volumes {
        samples.extend(extract_samples(v, depth)?);
    }
    let e = evaluate(&model, &samples, cfg.train.batch_size, cfg.train.threshold)?;
    run.log.emit("eval", json!({"checkpoint": a.checkpoint, "subjects": volumes.len(), "mean": e.mean}));
    run.write("report.csv", &evaluation_csv(&e))?;
    println!("{} on {} subject(s)", model.config().variant, volumes.len());
    println!("{}", mean_line("mean", &e.mean));
    println!("run directory: {}", run.path.display());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let cfg = a.cfg.resolve(&[])?;
    let model = load_model(&a.checkpoint, &cfg)?;
    let run = RunDir::create(&a.cfg.runs_dir, "predict", &cfg.to_text(), a.cfg.verbose)?;
    let dir = cfg.data_dir()?.join(&a.subject);
    ensure!(dir.is_dir(), "subject `{}` not found under {}", a.subject, cfg.data_dir()?.display());
    let raw = load_volume(&dir)?;
    let volume = preprocess(&raw, cfg.data.target_size)?.volume;
    let samples = extract_samples(&volume, model.config().context_depth)?;
    let probs = predict_samples(&model, &samples, cfg.train.batch_size)?;

    let out = a.overlay_out.clone().unwrap_or_else(|| run.file("overlays"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let [_, h, w] = volume.dims;
    let mut pred_volume = Vec::with_capacity(volume.mask.len());
    let mut report = String::from("slice,dsc,gt_pixels,pred_pixels,overlay\n");
    let mut overlays = 0;
    for (s, p) in samples.iter().zip(&probs) {
        let pred: Vec<u8> = binarize(p, cfg.train.threshold).into_iter().map(u8::from).collect();
        let gt: Vec<bool> = s.mask.iter().map(|&m| m != 0).collect();
        let pred_bool: Vec<bool> = pred.iter().map(|&v| v != 0).collect();
        let c = confusion(&pred_bool, &gt)?;
        let (gt_px, pred_px) = (c.tp + c.fn_, c.tp + c.fp);
        let name = if a.all_slices || gt_px + pred_px > 0 {
            let name = format!("slice-{:03}.png", s.z);
            data::preview::write_overlay(&out.join(&name), &s.slice, &s.mask, &pred, h, w, c.dsc())?;
            overlays += 1;
            name
        } else {
            String::new()
        };
        report.push_str(&format!("{},{},{gt_px},{pred_px},{name}\n", s.z, c.dsc()));
        pred_volume.extend_from_slice(&pred);
    }
    let [z, _, _] = volume.dims;
    let spacing = [volume.spacing[2], volume.spacing[1], volume.spacing[0]];
    data::nifti::write(&run.file("prediction.nii.gz"), [w, h, z], spacing, data::nifti::Voxels::U8(&pred_volume))?;
    run.write("report.csv", &report)?;
    run.log.emit("predict", json!({"subject": a.subject, "slices": samples.len(), "overlays": overlays, "out": out}));
    println!("{}: {} slices, {overlays} overlay(s) in {}", a.subject, samples.len(), out.display());
    println!("run directory: {}", run.path.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let blocks = Block::parse_list(&a.block)?;
    let opts = VerifyOptions { eps: a.eps, seed: a.seed, corrupt: false };
    let echo = format!("block = {}\neps = {}\nseed = {}\n", a.block, a.eps.map_or("default".into(), |e| e.to_string()), a.seed);
    let run = RunDir::create(&a.runs_dir, "gradcheck", &echo, false)?;
    let mut report = String::from("block,max_rel_error,tolerance,checked,passed,seconds\n");
    let mut failed = Vec::new();
    for b in blocks {
        let r = grad_check(b, &opts)?;
        println!(
            "{:<20} max rel err {:.3e}  (tol {:.0e}, {} entries, {:.1}s)  {}",
            b.name(),
            r.max_rel_error,
            r.tolerance,
            r.checked,
            r.seconds,
            if r.passed() { "ok" } else { "FAILED" }
        );
        report.push_str(&format!("{},{},{},{},{},{}\n", b, r.max_rel_error, r.tolerance, r.checked, r.passed(), r.seconds));
        run.log.emit("gradcheck", json!(r));
        if !r.passed() {
            failed.push(format!("{b} (worst {})", r.worst));
        }
    }
    run.write("report.csv", &report)?;
    ensure!(failed.is_empty(), "gradient check failed for {}", failed.join(", "));
    Ok(())
}

pub fn params(a: ParamsArgs) -> Result<()> {
    let variants = match &a.variant {
        Some(v) => vec![v.parse::<Variant>()?],
        None => Variant::ALL.to_vec(),
    };
    let mut base = if a.paper_scale { ModelConfig::paper_scale(Variant::Dfenet) } else { ModelConfig::default() };
    if let Some(c) = &a.channels {
        base.channels = kv::parse_usize_list(c)?;
    }
    if let Some(d) = a.context_depth {
        base.context_depth = d;
    }
    for v in variants {
        let cfg = base.with_variant(v);
        cfg.validate()?;
        let n = Model::<f32>::build(&cfg)?.count_parameters();
        println!("{:<12} channels {:<20} {:>12} ({:.2}M)", v.name(), kv::join_usize_list(&cfg.channels), n, n as f64 / 1e6);
    }
    Ok(())
}
