use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::checkpoint::{load_state, save_state, CheckpointMeta, CHECKPOINT_VERSION};
use super::config::{InferenceNetwork, TrainerConfig};
use super::step::{network_input, train_step, StepReport, TeacherStudentState};
use crate::error::{invalid, Error, Result};
use crate::par::{self, ExecPolicy};
use crate::preprocess::{CaseCache, Patch, PatchIndexEntry};
use crate::rng::SeedTree;
use crate::volume::DatasetManifest;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Preprocessed training and validation cases.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: Vec<CaseCache>,
    pub val: Vec<CaseCache>,
}

impl TrainingData {
    pub fn load(manifest: &DatasetManifest, cfg: &TrainerConfig) -> Result<Self> {
        let pre = cfg.preprocess_config();
        let load = |split: &str| -> Result<Vec<CaseCache>> {
            manifest
                .split_cases(split)?
                .into_iter()
                .map(|c| CaseCache::for_case(manifest, c, &pre))
                .collect()
        };
        Ok(Self {
            train: load("train")?,
            val: load("val")?,
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub iteration: u64,
    pub total: f64,
    pub sup: f64,
    pub ce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub semi: f64,
    pub semi_mse: f64,
    pub semi_sim: f64,
    pub val_dsc: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Continue from `last.ckpt` in the output directory if present.
    pub resume: bool,
    pub policy: ExecPolicy,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn pool(cases: &[CaseCache], labeled: bool) -> Vec<(usize, PatchIndexEntry)> {
    cases
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            let entries = if labeled { c.labeled() } else { c.unlabeled() };
            entries.into_iter().map(move |e| (i, e))
        })
        .collect()
}

/// Hard-mask DSC of the inference network over evenly spaced labeled
/// patches of the validation cases.
pub fn validation_dsc(state: &TeacherStudentState, val: &[CaseCache], cfg: &TrainerConfig, policy: ExecPolicy) -> Result<Option<f64>> {
    let net = match cfg.inference.network {
        InferenceNetwork::Student => &state.student,
        InferenceNetwork::Teacher => &state.teacher,
    };
    let mut patches: Vec<Patch> = Vec::new();
    for case in val {
        let entries = case.labeled();
        let k = cfg.val_patches_per_case.min(entries.len());
        for i in 0..k {
            patches.push(case.patch(&entries[i * entries.len() / k]));
        }
    }
    if patches.is_empty() {
        return Ok(None);
    }
    let counts = par::map_range(policy, patches.len(), |i| -> Result<[u64; 3]> {
        let p = &patches[i];
        let pred = net.forward(network_input(p, cfg.inference.input))?;
        let mask = p.mask.as_ref().expect("labeled patch");
        let mut c = [0u64; 3];
        for (&q, &y) in pred.vessel().iter().zip(mask.iter()) {
            match (q > 0.5, y != 0) {
                (true, true) => c[0] += 1,
                (true, false) => c[1] += 1,
                (false, true) => c[2] += 1,
                _ => {}
            }
        }
        Ok(c)
    });
    let mut tot = [0u64; 3];
    for c in counts {
        let c = c?;
        (0..3).for_each(|i| tot[i] += c[i]);
    }
    let den = 2 * tot[0] + tot[1] + tot[2];
    Ok(Some(if den == 0 { 1.0 } else { 2.0 * tot[0] as f64 / den as f64 }))
}

fn append_log(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Train for `cfg.epochs` epochs, writing the log and checkpoints to `out_dir`.
///
/// Patch draws depend only on the seed and the epoch index, so a resumed run
/// follows the same trajectory as an uninterrupted one.
pub fn fit(state: &mut TeacherStudentState, data: &TrainingData, cfg: &TrainerConfig, out_dir: &Path, opts: &FitOptions) -> Result<FitSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let last = out_dir.join(LAST_CHECKPOINT);
    let best = out_dir.join(BEST_CHECKPOINT);

    let labeled = pool(&data.train, true);
    if labeled.is_empty() {
        return Err(invalid("no labeled patches in the training split"));
    }
    let unlabeled = pool(&data.train, false);
    if unlabeled.is_empty() && cfg.loss.semi_weight > 0.0 {
        log::warn!("no unlabeled patches; the consistency term is skipped");
    }
    if cfg.loss.cosine_form != crate::losses::CosineForm::ExpNegativeCos {
        log::warn!("cosine consistency form {:?} selected", cfg.loss.cosine_form);
    }
    let mask = if cfg.loss.boundary {
        Some(cfg.loss.spectral_mask([cfg.patch_size; 3])?)
    } else {
        None
    };

    let mut start = 0;
    let mut best_val: Option<f64> = None;
    let mut best_epoch = None;
    let mut records = Vec::new();
    if opts.resume && last.exists() {
        let (s, meta) = load_state(&last)?;
        if meta.config != *cfg {
            return Err(invalid("checkpoint was written with a different configuration"));
        }
        *state = s;
        start = meta.epoch;
        best_val = meta.best_val_dsc;
        best_epoch = meta.best_epoch;
        records = read_log(&log_path)?.into_iter().filter(|r| r.epoch < start).collect();
        log::info!("resuming at epoch {start}");
    }
    // Rewrite the log so it holds exactly the completed epochs.
    std::fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
    for r in &records {
        append_log(&log_path, r)?;
    }

    let seeds = SeedTree::new(cfg.seed).fork("fit");
    let steps = (cfg.patches_per_case * data.train.len()).div_ceil(cfg.batch_size).max(1);
    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let mut rng = seeds.rng(&format!("epoch{epoch}"));
        let mut sum = StepReport::default();
        for _ in 0..steps {
            let draw = |pool: &[(usize, PatchIndexEntry)], rng: &mut crate::rng::Rng| -> Vec<Patch> {
                (0..cfg.batch_size)
                    .map(|_| {
                        let (c, e) = pool[rng.random_range(0..pool.len())];
                        augment(&data.train[c].patch(&e), rng)
                    })
                    .collect()
            };
            let lab = draw(&labeled, &mut rng);
            let unl = if cfg.loss.semi_weight > 0.0 && !unlabeled.is_empty() {
                draw(&unlabeled, &mut rng)
            } else {
                Vec::new()
            };
            let r = train_step(state, &lab, &unl, cfg, lr, mask.as_ref())?;
            if !r.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            sum.total += r.total;
            sum.sup.total += r.sup.total;
            sum.sup.ce += r.sup.ce;
            sum.sup.dice += r.sup.dice;
            sum.sup.boundary += r.sup.boundary;
            sum.semi += r.semi;
            sum.semi_mse += r.semi_mse;
            sum.semi_sim += r.semi_sim;
        }
        let n = steps as f64;
        let val_dsc = validation_dsc(state, &data.val, cfg, opts.policy)?;
        let rec = EpochRecord {
            epoch,
            lr,
            steps,
            iteration: state.iteration,
            total: sum.total / n,
            sup: sum.sup.total / n,
            ce: sum.sup.ce / n,
            dice: sum.sup.dice / n,
            boundary: sum.sup.boundary / n,
            semi: sum.semi / n,
            semi_mse: sum.semi_mse / n,
            semi_sim: sum.semi_sim / n,
            val_dsc,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (sup {:.4}, semi {:.4}) val_dsc {:?}",
            rec.total,
            rec.sup,
            rec.semi,
            rec.val_dsc
        );
        // Without validation data the latest epoch counts as best.
        let improved = match (val_dsc, best_val) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best_val = val_dsc;
            best_epoch = Some(epoch);
        }
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            iteration: state.iteration,
            epoch: epoch + 1,
            best_val_dsc: best_val,
            best_epoch,
            optimizer_step: state.optimizer.step,
        };
        if improved {
            save_state(&best, state, &meta)?;
        }
        save_state(&last, state, &meta)?;
        append_log(&log_path, &rec)?;
        records.push(rec);
    }
    Ok(FitSummary {
        records,
        best_epoch,
        best_val_dsc: best_val,
        best_checkpoint: best,
        last_checkpoint: last,
    })
}
