//! The full parameter set: interaction stack, co-visible head and refinement
//! attention, stored together in one tensor container.

use std::collections::BTreeMap;
use std::path::Path;

use crate::cfi::{AttentionKind, CfiWeights};
use crate::container;
use crate::covisible::CovisibleHeadWeights;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::refine::RefineWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub cfi: CfiWeights,
    pub covisible: CovisibleHeadWeights,
    pub refine: RefineWeights,
}

impl ModelWeights {
    /// Deterministic initialisation; each part draws from its own stream.
    pub fn seeded(seed: u64, kind: AttentionKind) -> Self {
        let cfi = CfiWeights::seeded(seed, kind);
        let covisible = CovisibleHeadWeights::seeded(cfi.dim, seed);
        Self { cfi, covisible, refine: RefineWeights::seeded(seed) }
    }

    /// Zero projections everywhere: features pass through unchanged.
    pub fn identity(coarse_dim: usize, fine_dim: usize, kind: AttentionKind) -> Self {
        Self {
            cfi: CfiWeights::identity(coarse_dim, kind),
            covisible: CovisibleHeadWeights::zeros(coarse_dim),
            refine: RefineWeights::identity(fine_dim),
        }
    }

    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.cfi.export(&mut out);
        self.covisible.export(&mut out);
        self.refine.export(&mut out);
        out
    }

    /// Rebuilds the weights; unknown or missing parameters are format errors.
    pub fn import(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in entries {
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
        }
        let cfi = CfiWeights::import(&mut params)?;
        let covisible = CovisibleHeadWeights::import(cfi.dim, &mut params)?;
        let refine = RefineWeights::import(&mut params)?;
        if let Some(name) = params.keys().next() {
            return Err(Error::Format(format!("unexpected parameter {name}")));
        }
        Ok(Self { cfi, covisible, refine })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save(path, &self.export())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::import(container::load(path)?)
    }
}
