//! Named, group-labeled parameter storage.
//!
//! Every trainable tensor in a model lives in a [`ParamStore`] under a unique
//! name, exactly one group label, and (for adapter parameters) a language
//! index. Group labels drive the freeze masks; names and order are stable so
//! checkpoints round-trip bit-exactly.

use crate::error::{Error, Result};
use crate::tape::{Tape, TapeId};
use crate::tensor::Tensor;

/// Parameter group labels. Shared groups follow the usual encoder/decoder
/// split; `EncMod`/`DecMod` are the per-language adapter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Emb,
    EncAtt,
    EncFfn,
    EncLn,
    DecAtt,
    DecCrossAtt,
    DecFfn,
    DecLn,
    EncMod,
    DecMod,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Emb,
        ParamGroup::EncAtt,
        ParamGroup::EncFfn,
        ParamGroup::EncLn,
        ParamGroup::DecAtt,
        ParamGroup::DecCrossAtt,
        ParamGroup::DecFfn,
        ParamGroup::DecLn,
        ParamGroup::EncMod,
        ParamGroup::DecMod,
    ];

    /// The six shared groups a freeze config may name.
    pub const FREEZABLE: [ParamGroup; 6] = [
        ParamGroup::Emb,
        ParamGroup::EncLn,
        ParamGroup::DecLn,
        ParamGroup::DecAtt,
        ParamGroup::DecCrossAtt,
        ParamGroup::DecFfn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Emb => "Emb",
            ParamGroup::EncAtt => "Enc_Att",
            ParamGroup::EncFfn => "Enc_FFN",
            ParamGroup::EncLn => "Enc_LN",
            ParamGroup::DecAtt => "Dec_Att",
            ParamGroup::DecCrossAtt => "Dec_CrossAtt",
            ParamGroup::DecFfn => "Dec_FFN",
            ParamGroup::DecLn => "Dec_LN",
            ParamGroup::EncMod => "Enc_Mod",
            ParamGroup::DecMod => "Dec_Mod",
        }
    }

    pub fn from_label(label: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.label() == label)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, ParamGroup::EncMod | ParamGroup::DecMod)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    /// Language index for adapter parameters, `None` for shared ones.
    pub lang: Option<usize>,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        lang: Option<usize>,
        mut value: Tensor,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        debug_assert_eq!(group.is_adapter(), lang.is_some());
        value.set_requires_grad(true);
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name,
            group,
            lang,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Ordered copy of all raw values, for freeze verification.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.data().to_vec()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Memoizes one tape leaf per parameter per forward pass, so every use of a
/// parameter shares a node and gradients from multiple uses accumulate.
pub struct ParamBinder {
    bound: Vec<Option<TapeId>>,
}

impl ParamBinder {
    pub fn new(store: &ParamStore) -> Self {
        ParamBinder {
            bound: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, store: &ParamStore, tape: &mut Tape, id: ParamId) -> TapeId {
        if let Some(existing) = self.bound[id.0] {
            return existing;
        }
        let leaf = tape.leaf(&store.get(id).value);
        self.bound[id.0] = Some(leaf);
        leaf
    }

    /// Copies tape gradients back into the bound parameters (accumulating).
    pub fn write_grads(&self, store: &mut ParamStore, tape: &Tape) -> Result<()> {
        for (i, bound) in self.bound.iter().enumerate() {
            let Some(leaf) = bound else { continue };
            if let Some(grad) = tape.grad(*leaf) {
                store
                    .get_mut(ParamId(i))
                    .value
                    .accumulate_grad(grad)
                    .map_err(|e| {
                        Error::Contract(format!(
                            "gradient write-back for {}: {e}",
                            store.get(ParamId(i)).name
                        ))
                    })?;
            }
        }
        Ok(())
    }
}
