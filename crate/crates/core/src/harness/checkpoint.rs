//! JSON checkpoint: parameters by group, config echo, fold, optimizer and
//! shuffling state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::nn::ParamStore;
use crate::optim::AdamWState;

pub const CHECKPOINT_FORMAT: &str = "ichscnet-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Where the batch-order generator stands; batches of epoch `e` are drawn
/// from stream `e` of the run seed, so `(epoch, step)` resumes exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub fold: usize,
    pub next_epoch: usize,
    pub steps_taken: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: RunConfig,
    pub fold: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// group -> parameter name -> tensor
    pub params: BTreeMap<String, BTreeMap<String, StoredTensor>>,
    pub optimizer: AdamWState,
    pub rng: RngState,
}

pub fn archive_params<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, BTreeMap<String, StoredTensor>> {
    let mut out: BTreeMap<String, BTreeMap<String, StoredTensor>> = BTreeMap::new();
    for (_, p) in store.iter() {
        out.entry(p.group.clone()).or_default().insert(
            p.name.clone(),
            StoredTensor {
                shape: p.value.shape().to_vec(),
                data: p.value.to_f64(),
            },
        );
    }
    out
}

/// Copies archived values into `store`; the group sets and every
/// parameter's name and shape must match.
pub fn restore_params<T: Scalar>(
    store: &mut ParamStore<T>,
    params: &BTreeMap<String, BTreeMap<String, StoredTensor>>,
) -> Result<()> {
    let expected = store.groups();
    if let Some(g) = expected.iter().find(|g| !params.contains_key(*g)) {
        return Err(Error::Checkpoint(format!("missing parameter group {g:?}")));
    }
    if let Some(g) = params.keys().find(|g| !expected.contains(*g)) {
        return Err(Error::Checkpoint(format!("unexpected parameter group {g:?}")));
    }
    let mut seen = 0usize;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        let stored = params[&p.group]
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("group {:?} lacks parameter {:?}", p.group, p.name)))?;
        if stored.shape != p.value.shape() || stored.data.len() != p.value.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has shape {:?}, expected {:?}",
                p.name,
                stored.shape,
                p.value.shape()
            )));
        }
        if let Some(v) = stored.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("parameter {:?} holds non-finite value {v}", p.name)));
        }
        store.get_mut(id).value = Tensor::from_f64(&stored.shape, &stored.data);
        seen += 1;
    }
    let total: usize = params.values().map(BTreeMap::len).sum();
    if total != seen {
        return Err(Error::Checkpoint(format!("{} stored parameters, model has {seen}", total)));
    }
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{} is not a valid checkpoint: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", ck.format)));
        }
        Ok(ck)
    }
}
