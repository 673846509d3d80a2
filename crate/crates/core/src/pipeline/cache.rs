use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use crate::data::TabularDataset;
use crate::rng;
use crate::train::{self, ModelKind, TrainConfig, TrainError};
use crate::TabularMlp;

pub const CACHE_ENV: &str = "RULER_CACHE_DIR";

/// Identity of a trained model: any field change is a different model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelKey {
    pub dataset: u64,
    pub train_idx: u64,
    pub init_seed: u64,
    pub config: u64,
}

impl ModelKey {
    pub fn new(
        ds: &TabularDataset,
        train_idx: &[usize],
        init_seed: u64,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            dataset: ds.fingerprint(),
            train_idx: rng::fingerprint_indices(train_idx),
            init_seed,
            config: cfg.fingerprint(),
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "{:016x}-{:016x}-{}-{:016x}.rulm",
            self.dataset, self.train_idx, self.init_seed, self.config
        )
    }
}

type Slot = Arc<OnceLock<Result<Arc<TabularMlp>, String>>>;

/// Trained-model cache shared by all workers. The first caller for a key
/// trains (or loads from disk) while later callers for that key block on
/// the same slot, so each model is produced exactly once per process.
#[derive(Debug, Default)]
pub struct ModelCache {
    slots: Mutex<HashMap<ModelKey, Slot>>,
    dir: Option<PathBuf>,
}

impl ModelCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            slots: Mutex::default(),
            dir: Some(dir.into()),
        }
    }

    /// Disk-backed when `RULER_CACHE_DIR` is set.
    pub fn from_env() -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => Self::with_dir(PathBuf::from(d)),
            _ => Self::in_memory(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the model trained on `train_idx` from `init_seed`, tagged with
    /// `kind`. Original and oracle models share the cache: they differ only
    /// in their index set.
    pub fn get_or_train(
        &self,
        ds: &TabularDataset,
        train_idx: &[usize],
        init_seed: u64,
        cfg: &TrainConfig,
        kind: ModelKind,
    ) -> Result<TabularMlp, TrainError> {
        let key = ModelKey::new(ds, train_idx, init_seed, cfg);
        let slot = Arc::clone(self.slots.lock().unwrap().entry(key).or_default());
        let res = slot.get_or_init(|| {
            self.produce(&key, ds, train_idx, init_seed, cfg)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        });
        match res {
            Ok(m) => Ok(TabularMlp::clone(m).with_kind(kind)),
            Err(e) => Err(TrainError::Format(format!("cached training failure: {e}"))),
        }
    }

    fn produce(
        &self,
        key: &ModelKey,
        ds: &TabularDataset,
        train_idx: &[usize],
        init_seed: u64,
        cfg: &TrainConfig,
    ) -> Result<TabularMlp, TrainError> {
        let Some(dir) = &self.dir else {
            return train::train(ds, train_idx, cfg, init_seed);
        };
        let path = dir.join(key.file_name());
        if path.exists() {
            if let Ok(m) = TabularMlp::load(&path, ModelKind::Loaded, init_seed) {
                if m.n_features() == ds.n_features() {
                    return Ok(m);
                }
            }
        }
        let model = train::train(ds, train_idx, cfg, init_seed)?;
        std::fs::create_dir_all(dir)?;
        // Write-then-rename keeps concurrent processes from reading a torn file.
        let tmp = dir.join(format!(
            "{}.{}.{:?}.tmp",
            key.file_name(),
            std::process::id(),
            std::thread::current().id()
        ));
        model.save(&tmp)?;
        std::fs::rename(&tmp, &path)?;
        Ok(model)
    }
}
