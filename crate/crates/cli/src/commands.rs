use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use vessel_core::metrics::{
    evaluate_case, extract_surface, render_csv, render_markdown, EvaluationReport, SurfaceOptions,
};
use vessel_core::par::ExecPolicy;
use vessel_core::phantom::{phantom_suite, PhantomSpec, MANIFEST_FILE};
use vessel_core::preprocess::{preprocess_case, resample_to_spacing_with, CaseCache};
use vessel_core::trainer::{
    fit, load_inference_network, predict_volume, FitOptions, InferenceNetwork, InputKind, Provenance,
    TeacherStudentState, TrainerConfig, TrainingData,
};
use vessel_core::volume::{load_volume, save_mask, save_volume, split_dataset, AnnotationExtent, CaseRecord, DatasetManifest, Volume};

use crate::run::{absolute, RunRecord, RUN_FILE};
use crate::{
    EvaluateArgs, Format, GtArg, MeshFormat, NetworkArg, PhantomArgs, PredictArgs, PreprocessArgs, ReportArgs, RoiArg,
    TrainArgs,
};

fn read_config(path: Option<&Path>) -> Result<(TrainerConfig, Option<String>)> {
    match path {
        None => Ok((TrainerConfig::default(), None)),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg = TrainerConfig::from_toml_str(&text).with_context(|| format!("config {}", p.display()))?;
            Ok((cfg, Some(text)))
        }
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("manifest {}", path.display()))
}

pub fn phantom(a: PhantomArgs, argv: &[String]) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<PhantomSpec>(&text).with_context(|| format!("phantom spec {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    spec.size = a.size;
    spec.validate()?;
    let ratios = (a.split[0], a.split[1], a.split[2]);
    let suite = phantom_suite(a.n, &spec, a.seed, &a.out)?;
    let manifest = if a.n >= 3 {
        split_dataset(&suite, ratios, a.seed)?
    } else {
        log::warn!("fewer than 3 cases; all go to the train split");
        let mut m = suite;
        m.splits.train = m.cases.iter().map(|c| c.id.clone()).collect();
        m
    };
    let mpath = a.out.join(MANIFEST_FILE);
    manifest.save(&mpath)?;
    let mut run = RunRecord::new("phantom", argv, json!({ "n": a.n, "spec": spec, "split": a.split }));
    run.seed = Some(a.seed);
    run.outputs = json!({ "manifest": absolute(&mpath) });
    run.save(&a.out)?;
    println!("wrote {} phantom cases to {}", a.n, a.out.display());
    Ok(())
}

pub fn preprocess(a: PreprocessArgs, argv: &[String]) -> Result<()> {
    let (cfg, user) = read_config(a.config.as_deref())?;
    let manifest = load_manifest(&a.manifest)?;
    let pre = cfg.preprocess_config();
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut records = Vec::with_capacity(manifest.cases.len());
    for case in &manifest.cases {
        log::info!("preprocessing {}", case.id);
        records.push(preprocess_case(&manifest, case, &pre, &a.out).with_context(|| format!("case {}", case.id))?);
    }
    let mut out = DatasetManifest::new(records)?;
    out.splits = manifest.splits.clone();
    let mpath = a.out.join(MANIFEST_FILE);
    out.save(&mpath)?;
    let mut run = RunRecord::new("preprocess", argv, serde_json::to_value(&pre)?);
    run.manifest = Some(absolute(&a.manifest));
    run.user_config = user;
    run.outputs = json!({ "manifest": absolute(&mpath) });
    run.save(&a.out)?;
    println!("preprocessed {} cases into {}", out.cases.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let (mut cfg, user, manifest_path) = match &a.from_run {
        Some(p) => {
            let rec = RunRecord::load(p)?;
            if rec.command != "train" {
                bail!("{} records a `{}` run, not `train`", p.display(), rec.command);
            }
            let cfg: TrainerConfig = serde_json::from_value(rec.config).context("config in run record")?;
            let m = a.manifest.clone().or(rec.manifest).ok_or_else(|| anyhow!("run record has no manifest"))?;
            (cfg, rec.user_config, m)
        }
        None => {
            let (cfg, user) = read_config(a.config.as_deref())?;
            (cfg, user, a.manifest.clone().expect("required by clap"))
        }
    };
    // Command-line overrides count as user-set keys.
    let mut user_table: toml::Table = match &user {
        Some(t) => toml::from_str(t)?,
        None => toml::Table::new(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        user_table.insert("epochs".into(), toml::Value::Integer(e as i64));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        user_table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let user = (!user_table.is_empty()).then(|| toml::to_string(&user_table)).transpose()?;
    cfg.validate()?;
    let manifest = load_manifest(&manifest_path)?;
    let data = TrainingData::load(&manifest, &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), cfg.to_annotated_toml()?)?;

    let mut run = RunRecord::new("train", argv, serde_json::to_value(&cfg)?);
    run.seed = Some(cfg.seed);
    run.manifest = Some(absolute(&manifest_path));
    run.user_config = user;
    run.save(&a.out)?;

    let mut state = TeacherStudentState::new(&cfg.network_config(), cfg.seed)?;
    let opts = FitOptions {
        resume: a.resume,
        policy: ExecPolicy::default(),
    };
    let summary = fit(&mut state, &data, &cfg, &a.out, &opts)?;
    run.outputs = json!({
        "epochs_completed": summary.records.len(),
        "best_epoch": summary.best_epoch,
        "best_val_dsc": summary.best_val_dsc,
        "best_checkpoint": absolute(&summary.best_checkpoint),
        "last_checkpoint": absolute(&summary.last_checkpoint),
        "final_loss": summary.records.last().map(|r| r.total),
    });
    run.save(&a.out)?;
    if let Some(r) = summary.records.last() {
        println!("epoch {}: loss {:.4}, val dsc {:?}", r.epoch, r.total, r.val_dsc);
    }
    Ok(())
}

/// Case volume at the network's spacing.
fn network_volume(manifest: &DatasetManifest, case: &CaseRecord, cfg: &TrainerConfig) -> Result<Volume> {
    if let Some(dir) = &case.cache {
        return Ok(CaseCache::load(&manifest.resolve(dir))?.image);
    }
    let vol = load_volume(manifest.resolve(&case.volume))?;
    Ok(resample_to_spacing_with(&vol, None, [cfg.spacing_mm; 3], cfg.mask_interpolation)?.0)
}

pub fn predict(a: PredictArgs, argv: &[String]) -> Result<()> {
    let which = a.network.map(|n| match n {
        NetworkArg::Student => InferenceNetwork::Student,
        NetworkArg::Teacher => InferenceNetwork::Teacher,
    });
    let (net, mut cfg) = load_inference_network(&a.checkpoint, which)
        .with_context(|| format!("checkpoint {}", a.checkpoint.display()))?;
    if let Some(w) = which {
        cfg.inference.network = w;
    }
    let manifest = load_manifest(&a.manifest)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let vessel_like = cfg.inference.input == InputKind::VesselLike;
    let mut written = Vec::new();
    for case in manifest.split_cases(&a.split)? {
        let vol = network_volume(&manifest, case, &cfg).with_context(|| format!("case {}", case.id))?;
        let p = predict_volume(&net, &vol, cfg.patch_size, cfg.stride, vessel_like, &cfg.aha, ExecPolicy::default())?;
        let path = a.out.join(format!("{}.nii.gz", case.id));
        save_mask(&p.mask, &path)?;
        if a.save_prob {
            save_volume(&p.probability, a.out.join(format!("{}_prob.nii.gz", case.id)))?;
        }
        if let Some(fmt) = a.mesh {
            let ext = match fmt {
                MeshFormat::Stl => "stl",
                MeshFormat::Obj => "obj",
            };
            match extract_surface(&p.mask) {
                Ok(m) => m.save(&a.out.join(format!("{}.{ext}", case.id)))?,
                Err(e) => log::warn!("case {}: no mesh ({e})", case.id),
            }
        }
        log::info!("case {}: {} vessel voxels", case.id, p.mask.count());
        written.push(case.id.clone());
    }
    let mut run = RunRecord::new("predict", argv, serde_json::to_value(&cfg)?);
    run.seed = Some(cfg.seed);
    run.manifest = Some(absolute(&a.manifest));
    run.outputs = json!({ "checkpoint": absolute(&a.checkpoint), "cases": written });
    run.save(&a.out)?;
    println!("wrote {} predictions to {}", written.len(), a.out.display());
    Ok(())
}

fn evaluation_config(a: &EvaluateArgs) -> Result<TrainerConfig> {
    if let Some(p) = &a.config {
        return Ok(read_config(Some(p))?.0);
    }
    let rec = a.pred_dir.join(RUN_FILE);
    if rec.exists() {
        let r = RunRecord::load(&rec)?;
        if let Ok(cfg) = serde_json::from_value::<TrainerConfig>(r.config) {
            return Ok(cfg);
        }
    }
    log::warn!("no config found for {}; using defaults", a.pred_dir.display());
    Ok(TrainerConfig::default())
}

pub fn evaluate(a: EvaluateArgs, argv: &[String]) -> Result<()> {
    let cfg = evaluation_config(&a)?;
    let manifest = load_manifest(&a.manifest)?;
    let pre = cfg.preprocess_config();
    let opts = SurfaceOptions {
        symmetric: a.symmetric,
        policy: ExecPolicy::default(),
    };
    let mut rows = Vec::new();
    for case in manifest.split_cases(&a.split)? {
        let path = a.pred_dir.join(format!("{}.nii.gz", case.id));
        let pred = vessel_core::volume::load_mask(&path).with_context(|| format!("prediction {}", path.display()))?;
        let cache = CaseCache::for_case(&manifest, case, &pre).with_context(|| format!("case {}", case.id))?;
        let gt = match a.gt {
            GtArg::Mask => cache.mask,
            GtArg::Full => cache
                .full_mask
                .ok_or_else(|| anyhow!("case {} has no full_mask in the manifest", case.id))?,
        };
        if gt.shape() != pred.shape() {
            bail!("case {}: prediction {:?} vs ground truth {:?}", case.id, pred.shape(), gt.shape());
        }
        let roi = match a.roi {
            RoiArg::Extent => cache.index.extent,
            RoiArg::Full => AnnotationExtent::full(gt.shape()),
        };
        rows.push(evaluate_case(&case.id, &pred, &gt, &roi, opts)?);
    }
    if rows.is_empty() {
        bail!("split `{}` has no cases", a.split);
    }
    let mut report = EvaluationReport::new(&a.name, rows);
    if let Some(b) = &a.baseline {
        let base = EvaluationReport::load(b)?;
        let t = report.compare_with(&base)?;
        log::info!("paired test vs {}: p = {:.4}", base.name, t.p_value);
    }
    report.save(&a.out)?;
    let mut run = RunRecord::new(
        "evaluate",
        argv,
        json!({ "gt": format!("{:?}", a.gt), "roi": format!("{:?}", a.roi), "symmetric": a.symmetric, "split": a.split }),
    );
    run.manifest = Some(absolute(&a.manifest));
    run.outputs = json!({ "report": absolute(&a.out) });
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    run.save(&dir)?;
    print!("{}", render_markdown(std::slice::from_ref(&report)));
    Ok(())
}

fn provenance_listing(path: &Path) -> Result<String> {
    let (cfg, user) = if path.extension().is_some_and(|e| e == "json") {
        let rec = RunRecord::load(path)?;
        let cfg: TrainerConfig = serde_json::from_value(rec.config).context("run record holds no training config")?;
        (cfg, rec.user_config)
    } else {
        read_config(Some(path))?
    };
    let mut out = String::from("| Key | Value | Source |\n|---|---|---|\n");
    for (k, v, p) in cfg.provenance(user.as_deref())? {
        let src = match p {
            Provenance::Published => "published training setting",
            Provenance::ArtifactDefault => "implementation default",
            Provenance::User => "user",
        };
        out.push_str(&format!("| {k} | {v} | {src} |\n"));
    }
    Ok(out)
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut text = String::new();
    if !a.inputs.is_empty() {
        let reports = a
            .inputs
            .iter()
            .map(|p| EvaluationReport::load(p).with_context(|| format!("report {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        text = match a.format {
            Format::Md => render_markdown(&reports),
            Format::Csv => render_csv(&reports)?,
        };
    }
    if let Some(p) = &a.provenance {
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&provenance_listing(p)?);
    }
    match &a.out {
        Some(p) => std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
