//! Dataset manifest (JSON) with patient-wise splits and cross-validation folds.
//!
//! ```json
//! {
//!   "cases": [{"id": "c01", "patient": "p01", "volume": "c01/image.nii.gz",
//!              "mask": "c01/mask.nii.gz", "center": "A"}],
//!   "splits": {"train": ["c01"], "val": [], "test": []}
//! }
//! ```
//! Relative paths resolve against the manifest's directory. `full_mask` and
//! `cache` are optional per-case fields used by phantoms and the preprocessing
//! cache respectively.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnnotationExtent;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub id: String,
    pub patient: String,
    pub volume: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub center: String,
    /// Annotated region; derived from the mask's bounding box when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<AnnotationExtent>,
    /// Complete ground truth, when known (synthetic phantoms).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_mask: Option<PathBuf>,
    /// Preprocessed cache directory for this case.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cases: Vec<CaseRecord>,
    #[serde(default)]
    pub splits: Splits,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(cases: Vec<CaseRecord>) -> Result<Self> {
        let m = Self {
            cases,
            splits: Splits::default(),
            base_dir: PathBuf::new(),
        };
        m.check_ids()?;
        Ok(m)
    }

    /// Parse and validate; every referenced file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_ids()?;
        for c in &m.cases {
            for p in [Some(&c.volume), Some(&c.mask), c.full_mask.as_ref()].into_iter().flatten() {
                let full = m.resolve(p);
                if !full.exists() {
                    return Err(Error::Manifest(format!("case {}: missing file {}", c.id, full.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Cases of a named split (`train`, `val`, `test`); all cases for `all`.
    pub fn split_cases(&self, split: &str) -> Result<Vec<&CaseRecord>> {
        let ids = match split {
            "all" => return Ok(self.cases.iter().collect()),
            "train" => &self.splits.train,
            "val" => &self.splits.val,
            "test" => &self.splits.test,
            other => return Err(Error::Manifest(format!("unknown split {other}"))),
        };
        ids.iter()
            .map(|id| self.case(id).ok_or_else(|| Error::Manifest(format!("split references unknown case {id}"))))
            .collect()
    }

    pub fn patients(&self) -> Vec<String> {
        self.cases
            .iter()
            .map(|c| c.patient.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !seen.insert(&c.id) {
                return Err(Error::Manifest(format!("duplicate case id {}", c.id)));
            }
        }
        Ok(())
    }

    fn assign(&self, train: &[String], val: &[String], test: &[String], fold: Option<usize>) -> Self {
        let by_patient = |ps: &[String]| -> Vec<String> {
            let set: HashSet<&String> = ps.iter().collect();
            self.cases
                .iter()
                .filter(|c| set.contains(&c.patient))
                .map(|c| c.id.clone())
                .collect()
        };
        let mut out = self.clone();
        out.splits = Splits {
            train: by_patient(train),
            val: by_patient(val),
            test: by_patient(test),
            fold,
        };
        out
    }

    fn shuffled_patients(&self, seed: u64) -> Vec<String> {
        let mut patients = self.patients();
        patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        patients
    }
}

/// Patient-wise train/val/test split. Counts are `floor(n * ratio)`; leftover
/// patients go to train, then test, then val.
pub fn split_dataset(manifest: &DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(*x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios must be positive and sum to 1, got {r:?}")));
    }
    let patients = manifest.shuffled_patients(seed);
    let n = patients.len();
    // [train, val, test]
    let mut counts = r.map(|x| (n as f64 * x + 1e-9).floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    for slot in [0, 2, 1].into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[slot] += 1;
        left -= 1;
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "{n} patients cannot populate train/val/test with ratios {r:?}"
        )));
    }
    let (train, rest) = patients.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    Ok(manifest.assign(train, val, test, None))
}

/// `k` folds whose test sets partition the patients; sizes differ by at most one.
/// Each fold trains on the remaining patients and has no validation split.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<DatasetManifest>> {
    let patients = manifest.shuffled_patients(seed);
    let n = patients.len();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("cannot make {k} folds from {n} patients")));
    }
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = n / k + usize::from(i < n % k);
        let test = &patients[start..start + len];
        let train: Vec<String> = patients[..start].iter().chain(&patients[start + len..]).cloned().collect();
        folds.push(manifest.assign(&train, &[], test, Some(i)));
        start += len;
    }
    Ok(folds)
}

/// Patient → split name lookup, used to check split integrity.
pub fn patient_assignment(m: &DatasetManifest) -> BTreeMap<String, BTreeSet<&'static str>> {
    let mut out: BTreeMap<String, BTreeSet<&'static str>> = BTreeMap::new();
    for (name, ids) in [("train", &m.splits.train), ("val", &m.splits.val), ("test", &m.splits.test)] {
        for id in ids {
            if let Some(c) = m.case(id) {
                out.entry(c.patient.clone()).or_default().insert(name);
            }
        }
    }
    out
}
