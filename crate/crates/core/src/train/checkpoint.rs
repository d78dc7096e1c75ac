//! Checkpoint directories:
//!
//! ```text
//! model_config.json   the model configuration, verbatim
//! run_config.json     the full run configuration
//! state.json          step counters
//! params/<name>       tensor dumps of the live weights
//! ema/<name>          tensor dumps of the shadow weights
//! optimizer/{m,v}.<name>
//! ```
//!
//! A checkpoint is written to a sibling temporary directory and renamed into
//! place, so an interrupted write never replaces a good checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use diffkit::dump::{self, DType};
use diffkit::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Result, ZigmaError};
use crate::model::{ModelConfig, ZigMa};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub optimizer_steps: u64,
    pub rejected: u64,
    pub ema_updates: u64,
}

pub struct CheckpointData<'a> {
    pub run: &'a RunConfig,
    pub params: &'a ParamStore,
    pub ema: &'a ParamStore,
    pub moments: (&'a [Tensor], &'a [Tensor]),
    pub state: TrainState,
}

pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (_, name, t) in store.iter() {
        dump::save(&dir.join(name), t, DType::F64)?;
    }
    Ok(())
}

/// Fills `store` (whose names and shapes come from the model definition)
/// from the dumps in `dir`.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let mut loaded = ParamStore::new();
    for (_, name, _) in store.iter() {
        loaded.add(name, dump::load(&dir.join(name))?);
    }
    store.load_from(&loaded)?;
    Ok(())
}

fn save_moments(dir: &Path, store: &ParamStore, m: &[Tensor], v: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (((_, name, _), m), v) in store.iter().zip(m).zip(v) {
        dump::save(&dir.join(format!("m.{name}")), m, DType::F64)?;
        dump::save(&dir.join(format!("v.{name}")), v, DType::F64)?;
    }
    Ok(())
}

pub fn load_moments(dir: &Path, store: &ParamStore) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for (_, name, _) in store.iter() {
        m.push(dump::load(&dir.join(format!("m.{name}")))?);
        v.push(dump::load(&dir.join(format!("v.{name}")))?);
    }
    Ok((m, v))
}

pub fn save(dir: &Path, data: &CheckpointData<'_>) -> Result<()> {
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join("model_config.json"), serde_json::to_string_pretty(&data.run.model)?)?;
    fs::write(tmp.join("run_config.json"), data.run.to_json()?)?;
    fs::write(tmp.join("state.json"), serde_json::to_string_pretty(&data.state)?)?;
    save_params(&tmp.join("params"), data.params)?;
    save_params(&tmp.join("ema"), data.ema)?;
    save_moments(&tmp.join("optimizer"), data.params, data.moments.0, data.moments.1)?;
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "checkpoint".into());
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

/// A checkpoint opened for inference.
pub struct Loaded {
    pub run: RunConfig,
    pub model: ZigMa,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub state: TrainState,
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name)).map_err(|e| ZigmaError::Config(format!("{}: {e}", dir.join(name).display())))
    };
    let model_cfg: ModelConfig = serde_json::from_str(&read("model_config.json")?)?;
    let run: RunConfig = serde_json::from_str(&read("run_config.json")?)?;
    if run.model != model_cfg {
        return Err(ZigmaError::Config("model_config.json disagrees with run_config.json".into()));
    }
    let state: TrainState = serde_json::from_str(&read("state.json")?)?;
    let (model, mut params) = ZigMa::init(&model_cfg, 0)?;
    let mut ema = params.clone();
    load_params(&dir.join("params"), &mut params)?;
    load_params(&dir.join("ema"), &mut ema)?;
    Ok(Loaded {
        run,
        model,
        params,
        ema,
        state,
    })
}
