//! Named freeze configurations and the trainability masks they induce.
//!
//! A [`FreezeConfig`] names a subset of the six freezable shared groups
//! (Emb, Enc_LN, Dec_LN, Dec_Att, Dec_CrossAtt, Dec_FFN). Encoder attention
//! and encoder feed-forward are always fine-tuned; adapter modules are
//! always frozen during fine-tuning, independent of the config. The named
//! configs s1..s14 are a fixed table.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::TrainMask;
use crate::params::{ParamGroup, ParamStore};
use std::collections::BTreeSet;

/// Which training phase a mask is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Everything trains jointly, modules included.
    Pretrain,
    /// Modules frozen; shared groups frozen according to the config.
    Finetune,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeConfig {
    pub name: String,
    pub frozen_groups: BTreeSet<ParamGroup>,
}

pub const FREEZE_CONFIG_NAMES: [&str; 15] = [
    "none", "s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "s12", "s13",
    "s14",
];

impl FreezeConfig {
    /// Looks up a named row of the freezing table. `"none"` and `"s1"` both
    /// freeze nothing beyond the always-frozen modules.
    pub fn from_name(name: &str) -> Result<FreezeConfig> {
        use ParamGroup::*;
        let groups: &[ParamGroup] = match name {
            "none" | "s1" => &[],
            "s2" => &[EncLn, DecLn],
            "s3" => &[Emb],
            "s4" => &[Emb, EncLn, DecLn],
            "s5" => &[Emb, DecLn, DecAtt, DecCrossAtt, DecFfn],
            "s6" => &[Emb, DecLn, DecCrossAtt, DecFfn],
            "s7" => &[Emb, DecLn, DecFfn],
            "s8" => &[EncLn, DecLn, DecCrossAtt, DecFfn],
            "s9" => &[EncLn, DecLn, DecFfn],
            "s10" => &[Emb, EncLn, DecLn, DecCrossAtt, DecFfn],
            "s11" => &[DecLn, DecCrossAtt, DecFfn],
            "s12" => &[DecLn, DecAtt, DecFfn],
            "s13" => &[DecLn, DecFfn],
            "s14" => &[Emb, EncLn, DecLn, DecFfn],
            _ => {
                return Err(Error::UnknownFreezeConfig {
                    name: name.to_string(),
                    valid: FREEZE_CONFIG_NAMES.join(", "),
                })
            }
        };
        Ok(FreezeConfig {
            name: name.to_string(),
            frozen_groups: groups.iter().copied().collect(),
        })
    }

    /// The fourteen named table rows, in order.
    pub fn table() -> Vec<FreezeConfig> {
        (1..=14)
            .map(|i| FreezeConfig::from_name(&format!("s{i}")).expect("table name"))
            .collect()
    }
}

/// Trainable-parameter mask for a model under a freeze config and phase.
///
/// Pretrain: everything. Finetune: shared parameters whose group is not
/// frozen; adapters excluded unconditionally.
pub fn build_mask(model: &Model, cfg: &FreezeConfig, phase: Phase) -> Result<TrainMask> {
    for g in &cfg.frozen_groups {
        if !ParamGroup::FREEZABLE.contains(g) {
            return Err(Error::Labeling(format!(
                "group {} cannot be named by a freeze config",
                g.label()
            )));
        }
    }
    let store = model.store();
    Ok(match phase {
        Phase::Pretrain => TrainMask::all(store),
        Phase::Finetune => TrainMask::from_fn(store, |id| {
            let group = store.get(id).group;
            !group.is_adapter() && !cfg.frozen_groups.contains(&group)
        }),
    })
}

/// Outcome of comparing parameter snapshots around a training run.
#[derive(Debug, Clone, Default)]
pub struct FreezeReport {
    /// Masked-out parameters that changed. Must be empty.
    pub violations: Vec<String>,
    /// Trainable parameters that did not move. Informational only.
    pub unchanged_trainable: Vec<String>,
}

impl FreezeReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that nothing outside the mask moved between two snapshots taken
/// from the same store (as produced by [`ParamStore::snapshot`]).
pub fn verify_frozen(
    store: &ParamStore,
    before: &[Vec<f64>],
    after: &[Vec<f64>],
    mask: &TrainMask,
) -> Result<FreezeReport> {
    if before.len() != store.len() || after.len() != store.len() || mask.len() != store.len() {
        return Err(Error::Contract(format!(
            "snapshot mismatch: store has {} params, snapshots have {}/{}",
            store.len(),
            before.len(),
            after.len()
        )));
    }
    let mut report = FreezeReport::default();
    for (id, param) in store.iter() {
        let (b, a) = (&before[id.index()], &after[id.index()]);
        if b.len() != a.len() || b.len() != param.value.numel() {
            return Err(Error::Contract(format!(
                "snapshot mismatch for {}: element counts differ",
                param.name
            )));
        }
        // bit-exact comparison
        let changed = b
            .iter()
            .zip(a)
            .any(|(x, y)| x.to_bits() != y.to_bits());
        if mask.is_trainable(id) {
            if !changed {
                report.unchanged_trainable.push(param.name.clone());
            }
        } else if changed {
            report.violations.push(param.name.clone());
        }
    }
    Ok(report)
}
