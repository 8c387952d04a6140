//! Meta-source/meta-target task construction: pick a subset of the training
//! domains as the meta-source, keep the complement as the meta-target.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::DomainDataset;
use crate::error::{CasaError, Result};

/// Which domains form the meta-source. Bit j covers the j-th training domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceMask(pub Vec<bool>);

impl SourceMask {
    /// Parse from the config encoding: a binary string, leftmost bit = domain 0.
    pub fn parse(s: &str) -> Result<SourceMask> {
        let mut bits = Vec::with_capacity(s.len());
        for ch in s.chars() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                _ => {
                    return Err(CasaError::Policy(format!(
                        "mask {s:?} contains invalid character {ch:?}"
                    )))
                }
            }
        }
        if bits.is_empty() {
            return Err(CasaError::Policy("empty mask".into()));
        }
        Ok(SourceMask(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Order key: domain j contributes 2^j.
    fn value(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .map(|(j, &b)| if b { 1u64 << j } else { 0 })
            .sum()
    }
}

impl fmt::Display for SourceMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// How the set of meta-tasks is enumerated from d training domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSetPolicy {
    /// All 2^d - 1 nonempty source subsets (7 tasks for d = 3).
    AllNonemptySubsets,
    /// The d singletons, the d leave-one-out masks, and the full mask
    /// (11 tasks for d = 5).
    SingletonPlusLeaveoneoutPlusFull,
    /// Explicit masks as binary strings, leftmost bit = domain 0.
    ExplicitMasks { masks: Vec<String> },
}

/// Enumerate source masks for `d` training domains under a policy.
/// Output is duplicate-free and sorted by (popcount, bit value).
pub fn enumerate_meta_tasks(d: usize, policy: &TaskSetPolicy) -> Result<Vec<SourceMask>> {
    if d < 2 {
        return Err(CasaError::Policy(format!(
            "need at least 2 training domains, got {d}"
        )));
    }
    let mut masks: Vec<SourceMask> = match policy {
        TaskSetPolicy::AllNonemptySubsets => {
            if d >= 63 {
                return Err(CasaError::Policy(format!("subset enumeration of {d} domains")));
            }
            (1u64..(1 << d))
                .map(|bits| SourceMask((0..d).map(|j| bits >> j & 1 == 1).collect()))
                .collect()
        }
        TaskSetPolicy::SingletonPlusLeaveoneoutPlusFull => {
            let mut out = Vec::with_capacity(2 * d + 1);
            for j in 0..d {
                out.push(SourceMask((0..d).map(|i| i == j).collect()));
            }
            for j in 0..d {
                out.push(SourceMask((0..d).map(|i| i != j).collect()));
            }
            out.push(SourceMask(vec![true; d]));
            out
        }
        TaskSetPolicy::ExplicitMasks { masks } => {
            if masks.is_empty() {
                return Err(CasaError::Policy("explicit_masks: no masks given".into()));
            }
            let parsed: Vec<SourceMask> =
                masks.iter().map(|s| SourceMask::parse(s)).collect::<Result<_>>()?;
            let mut seen = std::collections::HashSet::new();
            for m in &parsed {
                if m.len() != d {
                    return Err(CasaError::Policy(format!(
                        "mask {m} has length {} but there are {d} training domains",
                        m.len()
                    )));
                }
                if m.popcount() == 0 {
                    return Err(CasaError::Policy(format!("mask {m} selects no domains")));
                }
                if !seen.insert(m.clone()) {
                    return Err(CasaError::Policy(format!("duplicate mask {m}")));
                }
            }
            parsed
        }
    };
    masks.sort_by_key(|m| (m.popcount(), m.value()));
    masks.dedup();
    Ok(masks)
}

/// One meta-generalization episode: the pooled meta-source domains and the
/// per-domain meta-target complement.
#[derive(Debug, Clone)]
pub struct MetaTask {
    pub task_id: usize,
    pub source_mask: SourceMask,
    /// Domains selected by the mask. Pooled at batch-sampling time.
    pub source: Vec<DomainDataset>,
    /// Complement domains, kept separate so meta-target batches can be
    /// drawn domain-pure.
    pub target: Vec<DomainDataset>,
}

impl MetaTask {
    /// A full-mask task has no meta-target; only the preserve objective
    /// applies to it.
    pub fn is_preserve_only(&self) -> bool {
        self.target.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source.iter().map(|d| d.len()).sum()
    }

    pub fn target_len(&self) -> usize {
        self.target.iter().map(|d| d.len()).sum()
    }
}

/// Split `domains` into meta-source and meta-target per the mask.
pub fn build_task(domains: &[DomainDataset], mask: &SourceMask, task_id: usize) -> Result<MetaTask> {
    if mask.len() != domains.len() {
        return Err(CasaError::Policy(format!(
            "mask {mask} has length {} but there are {} training domains",
            mask.len(),
            domains.len()
        )));
    }
    if mask.popcount() == 0 {
        return Err(CasaError::Policy(format!("mask {mask} selects no domains")));
    }
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (ds, &selected) in domains.iter().zip(&mask.0) {
        if selected {
            source.push(ds.clone());
        } else {
            target.push(ds.clone());
        }
    }
    Ok(MetaTask {
        task_id,
        source_mask: mask.clone(),
        source,
        target,
    })
}

/// Enumerate and build all tasks in one go.
pub fn build_task_set(domains: &[DomainDataset], policy: &TaskSetPolicy) -> Result<Vec<MetaTask>> {
    let masks = enumerate_meta_tasks(domains.len(), policy)?;
    masks
        .iter()
        .enumerate()
        .map(|(id, mask)| build_task(domains, mask, id))
        .collect()
}
