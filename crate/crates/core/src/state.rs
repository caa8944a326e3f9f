use crate::grid::{GridSpec, MacVelocity, ScalarField};
use sha2::{Digest, Sha256};

/// Snapshot of the three unknowns at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub n: ScalarField,
    pub c: ScalarField,
    pub u: MacVelocity,
}

impl SimState {
    pub fn grid(&self) -> &GridSpec {
        self.n.grid()
    }

    /// SHA-256 over the bit patterns of `t`, `n`, `c` and `u`, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.t.to_bits().to_le_bytes());
        let faces = self.u.faces();
        for v in self.n.values().iter().chain(self.c.values()).chain(&faces.x).chain(&faces.y) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
