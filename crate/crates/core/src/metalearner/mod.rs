//! Prototype-guided meta-learning: class prototypes drive the head
//! initialization, in-task contrastive and out-of-task self-training terms
//! regularize the encoder, and a per-task scale/shift modulates the prior
//! parameters before inner adaptation.

mod checkpoint;
mod contrastive;
mod evaluate;
mod head;
mod modulation;
mod objective;
mod selftrain;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::{AdError, Order, ParamSet, Tensor};
use crate::encoder::{EncoderKind, GraphContext};
use crate::episodes::EpisodeError;
use crate::graph::{Graph, GraphError};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use contrastive::{contrastive_loss, contrastive_masks};
pub use evaluate::{evaluate_episode, meta_test, EvalOptions, MetricsReport, TaskOutcome, TaskRecord};
pub use head::{adapt_phi, cross_entropy, logits, mlp, proto_init, prototype_matrix, prototypes, score};
pub use modulation::{inner_update, s2_modulate, task_embedding};
pub use objective::{
    batch_gradients, batch_loss_single_tape, episode_objective, Breakdown, EpisodeLoss, TrainView,
};
pub use selftrain::{select_high_confidence, self_training_loss, sharpen, soft_assign, st_loss, StTarget};
pub use train::{meta_train, LogRecord, Optimizer, Schedule, TrainOutcome};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("non-finite {component} loss in episode {episode} of batch {batch}")]
    NonFinite { batch: u64, episode: usize, component: &'static str },
    #[error("{0}")]
    Invalid(String),
}

/// Step sizes, loss weights and inner-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Inner-loop step size.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub beta: f64,
    /// Contrastive loss weight.
    pub xi: f64,
    /// Self-training loss weight.
    pub zeta: f64,
    /// Penalty on the squared norm of the modulation networks.
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// High-confidence nodes kept per class for self-training.
    pub topk: usize,
    pub phi_steps: usize,
    pub theta_steps: usize,
    pub order: Order,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.001,
            xi: 0.1,
            zeta: 0.1,
            gamma: 0.001,
            tau: 0.5,
            topk: 30,
            phi_steps: 1,
            theta_steps: 5,
            order: Order::First,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), MetaError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("xi", self.xi), ("zeta", self.zeta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MetaError::Invalid(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(MetaError::Invalid(format!("tau = {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// Network sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub n_way: usize,
    /// Embedding width d′.
    pub embed_dim: usize,
    /// Hidden width of the prototype and modulation MLPs.
    pub hidden: usize,
    /// Hop count ℓ (or propagation power for the SGC encoder).
    pub hops: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { n_way: 5, embed_dim: 16, hidden: 16, hops: 2 }
    }
}

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    pub no_st: bool,
    pub no_s2: bool,
    pub sgc_encoder: bool,
    pub no_cl: bool,
    pub no_pi: bool,
}

impl Variant {
    pub fn encoder_kind(&self) -> EncoderKind {
        if self.sgc_encoder {
            EncoderKind::Sgc
        } else {
            EncoderKind::Hetero
        }
    }

    /// The full model followed by the five single-component ablations.
    pub fn ablations() -> [(&'static str, Variant); 6] {
        let off = Variant::default();
        [
            ("full", off),
            ("w/o ST", Variant { no_st: true, ..off }),
            ("w/o S²", Variant { no_s2: true, ..off }),
            ("w/o SGC", Variant { sgc_encoder: true, ..off }),
            ("w/o CL", Variant { no_cl: true, ..off }),
            ("w/o PI", Variant { no_pi: true, ..off }),
        ]
    }
}

pub const PROTO: &str = "proto";
pub const HEAD_BIAS: &str = "head.bias";
pub const HEAD_PHI: &str = "head.phi";
pub const SCALE: &str = "scale";
pub const SHIFT: &str = "shift";

/// Prior parameters Θ (encoder, prototype MLP, head bias), modulation
/// parameters Ψ and the settings they were built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub theta: ParamSet,
    pub psi: ParamSet,
    pub hyper: HyperParams,
    pub arch: Architecture,
    pub variant: Variant,
}

fn mlp_params(prefix: &str, d_in: usize, hidden: usize, d_out: usize, zero_out: bool, rng: &mut ChaCha8Rng) -> ParamSet {
    let w2 = if zero_out { Tensor::zeros(&[hidden, d_out]) } else { Tensor::glorot(hidden, d_out, rng) };
    ParamSet::new()
        .with(format!("{prefix}.w1"), Tensor::glorot(d_in, hidden, rng))
        .with(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden]))
        .with(format!("{prefix}.w2"), w2)
        .with(format!("{prefix}.b2"), Tensor::zeros(&[1, d_out]))
}

fn extend(into: &mut ParamSet, from: ParamSet) {
    for (name, t) in from.iter() {
        into.insert(name, t.clone());
    }
}

impl MetaState {
    /// Fresh parameters: Glorot-uniform weights, zero biases, and zero final
    /// layers in both modulation networks so that modulation starts as the identity.
    pub fn init(ctx: &GraphContext, arch: Architecture, variant: Variant, hyper: HyperParams, seed: u64) -> Result<Self, MetaError> {
        if ctx.kind() != variant.encoder_kind() {
            return Err(MetaError::Invalid("graph context encoder does not match the variant".into()));
        }
        if arch.n_way == 0 || arch.embed_dim == 0 || arch.hidden == 0 {
            return Err(MetaError::Invalid("n_way, embed_dim and hidden must be positive".into()));
        }
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.embed_dim;
        let mut theta = ctx.init_params(d, &mut rng);
        if variant.no_pi {
            theta.insert(HEAD_PHI, Tensor::glorot(arch.n_way, d, &mut rng));
        } else {
            extend(&mut theta, mlp_params(PROTO, d, arch.hidden, d, false, &mut rng));
        }
        theta.insert(HEAD_BIAS, Tensor::zeros(&[1, arch.n_way]));

        let mut psi = ParamSet::new();
        if !variant.no_s2 {
            let len = theta.total_len();
            extend(&mut psi, mlp_params(SCALE, d, arch.hidden, len, true, &mut rng));
            extend(&mut psi, mlp_params(SHIFT, d, arch.hidden, len, true, &mut rng));
        }
        Ok(Self { theta, psi, hyper, arch, variant })
    }

    /// Builds the encoder context this state expects for `g`.
    pub fn context(&self, g: &Graph) -> Result<GraphContext, MetaError> {
        Ok(GraphContext::new(g, self.variant.encoder_kind(), self.arch.hops)?)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::episodes::{sample_episode, Episode, TaskShape};
    use crate::graph::{generate_sbm, SbmSpec, Split};

    /// 12-node graph with 4 training classes of 3 nodes each.
    pub fn toy_graph(seed: u64) -> Graph {
        generate_sbm(&SbmSpec {
            classes: 4,
            per_class: 3,
            p_in: 0.6,
            p_out: 0.2,
            feature_dim: 4,
            feature_noise: 0.4,
            seed,
            split: Some([4, 0, 0]),
        })
        .unwrap()
    }

    pub fn toy_arch() -> Architecture {
        Architecture { n_way: 2, embed_dim: 4, hidden: 4, hops: 2 }
    }

    pub fn toy_episode(g: &Graph, seed: u64) -> Episode {
        let shape = TaskShape { n_way: 2, k_shot: 1, m_query: 1, pool_cap: 100 };
        sample_episode(g, Split::Train, shape, seed).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use testutil::*;

    #[test]
    fn psi_final_layers_start_at_zero() {
        let g = toy_graph(0);
        let ctx = GraphContext::new(&g, EncoderKind::Hetero, 2).unwrap();
        let s = MetaState::init(&ctx, toy_arch(), Variant::default(), HyperParams::default(), 1).unwrap();
        let len = s.theta.total_len();
        for net in [SCALE, SHIFT] {
            let w2 = s.psi.get(&format!("{net}.w2")).unwrap();
            assert_eq!(w2.shape(), &[4, len]);
            assert!(w2.values().iter().all(|&v| v == 0.0));
            assert!(s.psi.get(&format!("{net}.b2")).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn variants_shape_the_parameters() {
        let g = toy_graph(0);
        let ctx = GraphContext::new(&g, EncoderKind::Hetero, 2).unwrap();
        let v = Variant { no_pi: true, no_s2: true, ..Variant::default() };
        let s = MetaState::init(&ctx, toy_arch(), v, HyperParams::default(), 1).unwrap();
        assert!(s.psi.is_empty());
        assert!(s.theta.contains(HEAD_PHI));
        assert!(!s.theta.contains("proto.w1"));
        assert_eq!(Variant::ablations().len(), 6);
    }
}
