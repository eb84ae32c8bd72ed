//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so load followed by save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetaError, MetaState};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the training episode stream stood when the checkpoint was taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub batches_done: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub state: MetaState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(state: MetaState, rng: RngState) -> Self {
        Self { version: CHECKPOINT_VERSION, state, rng }
    }

    pub fn to_json(&self) -> Result<String, MetaError> {
        if !self.state.theta.is_finite() || !self.state.psi.is_finite() {
            return Err(MetaError::Invalid("refusing to checkpoint non-finite parameters".into()));
        }
        let mut s = serde_json::to_string_pretty(self).map_err(|e| MetaError::Invalid(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, MetaError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| MetaError::Invalid(format!("bad checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(MetaError::Invalid(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), MetaError> {
        fs::write(path, self.to_json()?).map_err(|e| MetaError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, MetaError> {
        let text = fs::read_to_string(path).map_err(|e| MetaError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::GraphContext;
    use crate::metalearner::testutil::*;
    use crate::metalearner::{HyperParams, Variant};

    #[test]
    fn round_trip_is_bit_exact() {
        let g = toy_graph(2);
        let ctx = GraphContext::new(&g, Default::default(), 2).unwrap();
        let mut state = MetaState::init(&ctx, toy_arch(), Variant::default(), HyperParams::default(), 8).unwrap();
        // Values that do not survive a naive decimal print.
        state.theta.get_mut("head.bias").unwrap().values_mut()[0] = 0.1 + 0.2;
        state.theta.get_mut("head.bias").unwrap().values_mut()[1] = -5e-324;
        let ck = Checkpoint::new(state, RngState { seed: 3, batches_done: 17 });
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        for ((_, a), (_, b)) in ck.state.theta.iter().zip(back.state.theta.iter()) {
            let bits = |t: &crate::adcore::Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_other_versions() {
        let g = toy_graph(2);
        let ctx = GraphContext::new(&g, Default::default(), 2).unwrap();
        let state = MetaState::init(&ctx, toy_arch(), Variant::default(), HyperParams::default(), 8).unwrap();
        let mut ck = Checkpoint::new(state, RngState::default());
        ck.version = 99;
        let text = serde_json::to_string(&ck).unwrap();
        assert!(Checkpoint::from_json(&text).is_err());
    }
}
