//! Pluggable approximate posteriors over the network parameters: the MAP
//! point mass, MC-dropout (independent masks for the velocity and score
//! nets), and a finite ensemble whose members are resolved by the consumer
//! (explicit weight vectors for nets, analytic samplers in estimator tests).
//!
//! A draw fully determines deterministic forwards of both networks.

use crate::error::{Error, Result};
use crate::nets::{sample_mask, DropoutMask, MlpConfig, ModelPair};
use crate::numkit::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorKind {
    Map,
    McDropout,
    FiniteEnsemble,
}

#[derive(Clone, Debug)]
pub enum DrawDetail {
    /// The point estimate itself; deterministic forwards.
    MapPoint,
    /// Fixed dropout masks, one per network.
    DropoutMasks {
        velocity: DropoutMask,
        score: DropoutMask,
    },
    /// Index into the ensemble member list.
    EnsembleMember(usize),
}

/// One realization of the network parameters.
#[derive(Clone, Debug)]
pub struct PosteriorDraw {
    pub draw_id: u64,
    pub detail: DrawDetail,
}

#[derive(Clone, Debug)]
pub enum PosteriorSampler {
    Map,
    McDropout {
        velocity_config: MlpConfig,
        score_config: MlpConfig,
    },
    FiniteEnsemble {
        members: usize,
    },
}

impl PosteriorSampler {
    /// MC-dropout sampler over a trained pair; a zero dropout rate makes
    /// every draw the all-ones mask, i.e. the MAP forward.
    pub fn mc_dropout(pair: &ModelPair) -> Self {
        Self::McDropout {
            velocity_config: pair.velocity.config.clone(),
            score_config: pair.score.config.clone(),
        }
    }

    pub fn finite_ensemble(members: usize) -> Result<Self> {
        if members == 0 {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        Ok(Self::FiniteEnsemble { members })
    }

    pub fn kind(&self) -> PosteriorKind {
        match self {
            Self::Map => PosteriorKind::Map,
            Self::McDropout { .. } => PosteriorKind::McDropout,
            Self::FiniteEnsemble { .. } => PosteriorKind::FiniteEnsemble,
        }
    }

    /// Draw one parameter realization. The MAP sampler never touches the
    /// stream; MC-dropout draws independent masks for the two networks;
    /// the ensemble picks a member uniformly.
    pub fn draw(&self, rng: &mut RngStream, draw_id: u64) -> PosteriorDraw {
        let detail = match self {
            Self::Map => DrawDetail::MapPoint,
            Self::McDropout {
                velocity_config,
                score_config,
            } => DrawDetail::DropoutMasks {
                velocity: sample_mask(rng, velocity_config),
                score: sample_mask(rng, score_config),
            },
            Self::FiniteEnsemble { members } => {
                DrawDetail::EnsembleMember(rng.next_index(*members))
            }
        };
        PosteriorDraw { draw_id, detail }
    }
}
