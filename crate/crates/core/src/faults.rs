//! Fault injectors for honest-but-faulty clients and the schedule of which
//! clients misbehave in which round.
//!
//! Upload faults (`gaussian`, `sign_flip`, `same_value`) replace the update
//! after it was computed honestly. `label_flip` corrupts the training
//! labels of a copy of the local data before the gradient steps.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("fault sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("faulty client id {id} out of range for {clients} clients")]
    UnknownClient { id: usize, clients: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultKind {
    #[default]
    None,
    Gaussian {
        sigma: f64,
    },
    SignFlip,
    SameValue {
        sigma: f64,
    },
    LabelFlip,
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::None => "none",
            FaultKind::Gaussian { .. } => "gaussian",
            FaultKind::SignFlip => "sign_flip",
            FaultKind::SameValue { .. } => "same_value",
            FaultKind::LabelFlip => "label_flip",
        }
    }

    pub fn validate(&self) -> Result<(), FaultError> {
        match *self {
            FaultKind::Gaussian { sigma } | FaultKind::SameValue { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(FaultError::InvalidSigma(sigma))
            }
            _ => Ok(()),
        }
    }

    /// Whether the fault acts on training data rather than on the upload.
    pub fn corrupts_training(&self) -> bool {
        matches!(self, FaultKind::LabelFlip)
    }

    /// The uploaded message of a faulty client whose honest update is `honest`.
    pub fn corrupt_upload<R: Rng + ?Sized>(&self, honest: ParamVector, rng: &mut R) -> ParamVector {
        match *self {
            FaultKind::None | FaultKind::LabelFlip => honest,
            FaultKind::Gaussian { sigma } => inject_gaussian(honest.len(), sigma, rng),
            FaultKind::SignFlip => inject_sign_flip(&honest),
            FaultKind::SameValue { sigma } => inject_same_value(honest.len(), sigma),
        }
    }
}

/// Which clients are faulty, and how.
///
/// The faulty set is static unless `schedule` overrides it for specific
/// rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FaultSpec {
    pub kind: FaultKind,
    #[serde(default)]
    pub faulty_ids: BTreeSet<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<BTreeMap<usize, BTreeSet<usize>>>,
}

impl FaultSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(kind: FaultKind, faulty_ids: impl IntoIterator<Item = usize>, seed: u64) -> Self {
        Self {
            kind,
            faulty_ids: faulty_ids.into_iter().collect(),
            seed,
            schedule: None,
        }
    }

    pub fn validate(&self, clients: usize) -> Result<(), FaultError> {
        self.kind.validate()?;
        let scheduled = self.schedule.iter().flat_map(|s| s.values().flatten());
        if let Some(&id) = self.faulty_ids.iter().chain(scheduled).find(|&&id| id >= clients) {
            return Err(FaultError::UnknownClient { id, clients });
        }
        Ok(())
    }

    /// `F` for round `round` before intersecting with the selected clients.
    pub fn faulty_in_round(&self, round: usize) -> BTreeSet<usize> {
        if matches!(self.kind, FaultKind::None) {
            return BTreeSet::new();
        }
        self.schedule
            .as_ref()
            .and_then(|s| s.get(&round))
            .unwrap_or(&self.faulty_ids)
            .clone()
    }
}

/// i.i.d. `N(0, sigma^2)` entries.
pub fn inject_gaussian<R: Rng + ?Sized>(d: usize, sigma: f64, rng: &mut R) -> ParamVector {
    let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
    ParamVector::new((0..d).map(|_| normal.sample(rng)).collect())
}

pub fn inject_sign_flip(update: &ParamVector) -> ParamVector {
    update.neg()
}

pub fn inject_same_value(d: usize, sigma: f64) -> ParamVector {
    ParamVector::filled(d, sigma)
}

/// `c -> classes - 1 - c`.
pub fn flip_label(label: usize, classes: usize) -> usize {
    debug_assert!(label < classes);
    classes - 1 - label
}

/// A relabelled copy; the input dataset is untouched.
pub fn flip_labels(batch: &Dataset) -> Dataset {
    let classes = batch.num_classes();
    batch.map_labels(|l| flip_label(l, classes))
}

/// A client's uploaded message `z_j` for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub payload: ParamVector,
}
