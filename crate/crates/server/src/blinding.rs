//! Deterministic A/B assignment. The console only ever sees slots A and B;
//! which slot holds the treatment is recomputed from (seed, task_id) and never
//! leaves the server.

use contextcrop_core::assessment::Score;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

/// Which slot carries the treatment response for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub treatment: Slot,
}

pub fn assignment(seed: u64, task_id: &str) -> Assignment {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task_id.as_bytes());
    let digest = h.finalize();
    Assignment {
        treatment: if digest[0] & 1 == 0 { Slot::A } else { Slot::B },
    }
}

impl Assignment {
    /// Places the two responses into (A, B).
    pub fn randomize<T>(self, treatment: T, reference: T) -> (T, T) {
        match self.treatment {
            Slot::A => (treatment, reference),
            Slot::B => (reference, treatment),
        }
    }

    /// Maps scores given to (A, B) back to (treatment, reference).
    pub fn derandomize(self, score_a: Score, score_b: Score) -> (Score, Score) {
        match self.treatment {
            Slot::A => (score_a, score_b),
            Slot::B => (score_b, score_a),
        }
    }
}
