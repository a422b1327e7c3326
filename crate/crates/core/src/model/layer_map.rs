use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// How encoder levels were aligned to decoder injection slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMapMode {
    Identity,
    Duplicate,
    Average,
}

/// For each decoder injection slot, the encoder levels it draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub mode: LayerMapMode,
    pub assignment: Vec<Vec<usize>>,
}

impl LayerMap {
    /// Rule-based mapping of `n_sources` encoder levels onto `n_slots`
    /// decoder slots: identity when equal, nearest duplication when there are
    /// fewer sources, contiguous averaging groups when there are more.
    pub fn build(n_sources: usize, n_slots: usize) -> Self {
        assert!(n_sources >= 1 && n_slots >= 1, "layer map needs at least one source and slot");
        if n_sources == n_slots {
            return Self {
                mode: LayerMapMode::Identity,
                assignment: (0..n_slots).map(|j| alloc::vec![j]).collect(),
            };
        }
        if n_sources < n_slots {
            return Self {
                mode: LayerMapMode::Duplicate,
                assignment: (0..n_slots).map(|j| alloc::vec![j * n_sources / n_slots]).collect(),
            };
        }
        // Group sizes differ by at most one; larger groups come first.
        let base = n_sources / n_slots;
        let extra = n_sources % n_slots;
        let mut start = 0;
        let assignment = (0..n_slots)
            .map(|j| {
                let size = base + usize::from(j < extra);
                let group = (start..start + size).collect();
                start += size;
                group
            })
            .collect();
        Self {
            mode: LayerMapMode::Average,
            assignment,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.assignment.len()
    }
}
