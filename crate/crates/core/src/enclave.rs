//! Simulated trusted enclave.
//!
//! Clients seal their representative sample once and their update every
//! round. The enclave keeps the samples in a private vault, computes a
//! guiding update per client, filters uploads by direction and length
//! similarity, and applies the mean of the surviving updates to the global
//! model it owns. Nothing that leaves [`Enclave`] carries a plaintext update
//! or sample.
//!
//! Sealed blob layout, little-endian:
//! `[owner u32][round u32][nonce u64][len u64][ciphertext; len]`.
//! The plaintext is a `u64` element count followed by that many `f64`s.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, SampleBatch};
use crate::nn::{sgd_step, BatchView, Model, NnError, ParamVector};
use crate::seeding::{derive_seed, mix64, Purpose};

/// Norms at or below this are treated as zero by [`similarity`].
pub const ZERO_NORM: f64 = 1e-12;

const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnclaveError {
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("client {0} already provisioned a sample")]
    DuplicateProvision(usize),
    #[error("client {0} has no provisioned sample")]
    UnknownClient(usize),
    #[error("client {0} has no channel with the enclave")]
    NoChannel(usize),
    #[error("blob from client {owner} failed to decrypt")]
    Decryption { owner: usize },
    #[error("malformed blob: {0}")]
    Malformed(String),
    #[error("blob from client {owner} is for round {found}, expected {expected}")]
    WrongRound {
        owner: usize,
        expected: usize,
        found: usize,
    },
    #[error("client {0} sent more than one update this round")]
    DuplicateUpdate(usize),
    #[error("no updates submitted")]
    NoUpdates,
    #[error("vectors have lengths {left} and {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("local steps must be at least 1")]
    ZeroSteps,
    #[error("every client was flagged in round {round}; model left unchanged")]
    NoSurvivors {
        round: usize,
        decisions: Vec<FilterDecision>,
    },
    #[error(transparent)]
    Model(#[from] NnError),
}

/// An encrypted envelope addressed to the enclave.
#[derive(Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub owner: u32,
    pub round: u32,
    pub nonce: u64,
    pub ciphertext: Vec<u8>,
}

impl fmt::Debug for SealedBlob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedBlob")
            .field("owner", &self.owner)
            .field("round", &self.round)
            .field("nonce", &self.nonce)
            .field("len", &self.ciphertext.len())
            .finish()
    }
}

impl SealedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.owner.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.nonce.to_le_bytes());
        out.extend_from_slice(&(self.ciphertext.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveError> {
        if bytes.len() < HEADER_LEN {
            return Err(EnclaveError::Malformed(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let len = u64_at(16);
        let body = &bytes[HEADER_LEN..];
        if body.len() as u64 != len {
            return Err(EnclaveError::Malformed(format!(
                "header declares {len} ciphertext bytes, found {}",
                body.len()
            )));
        }
        Ok(Self {
            owner: u32_at(0),
            round: u32_at(4),
            nonce: u64_at(8),
            ciphertext: body.to_vec(),
        })
    }
}

/// `u64` count followed by the values, all little-endian.
pub fn encode_payload(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * values.len());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_payload`]; `None` when the count disagrees with the length.
pub fn decode_payload(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() < 8 || !(bytes.len() - 8).is_multiple_of(8) {
        return None;
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if count != ((bytes.len() - 8) / 8) as u64 {
        return None;
    }
    Some(
        bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

fn keystream_xor(key: u64, owner: u32, round: u32, nonce: u64, data: &mut [u8]) {
    let seed = mix64(mix64(key ^ nonce) ^ ((u64::from(owner) << 32) | u64::from(round)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pad = vec![0u8; data.len()];
    rng.fill_bytes(&mut pad);
    for (b, p) in data.iter_mut().zip(pad) {
        *b ^= p;
    }
}

pub fn seal(key: u64, owner: u32, round: u32, nonce: u64, values: &[f64]) -> SealedBlob {
    let mut ciphertext = encode_payload(values);
    keystream_xor(key, owner, round, nonce, &mut ciphertext);
    SealedBlob {
        owner,
        round,
        nonce,
        ciphertext,
    }
}

/// Fails when `key` is not the key the blob was sealed with, detected by
/// the embedded element count no longer matching the ciphertext length.
pub fn unseal(key: u64, blob: &SealedBlob) -> Result<Vec<f64>, EnclaveError> {
    let mut plain = blob.ciphertext.clone();
    keystream_xor(key, blob.owner, blob.round, blob.nonce, &mut plain);
    decode_payload(&plain).ok_or(EnclaveError::Decryption {
        owner: blob.owner as usize,
    })
}

/// Flattens a sample as `[input_dim, classes, n, features..., labels...]`.
fn sample_to_values(data: &Dataset) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 + data.features().len() + data.len());
    v.extend([data.input_dim() as f64, data.num_classes() as f64, data.len() as f64]);
    v.extend_from_slice(data.features());
    v.extend(data.labels().iter().map(|&l| l as f64));
    v
}

fn sample_from_values(values: &[f64]) -> Result<Dataset, EnclaveError> {
    let bad = |m: &str| EnclaveError::Malformed(format!("sample payload: {m}"));
    if values.len() < 3 {
        return Err(bad("missing header"));
    }
    let as_count = |x: f64| -> Result<usize, EnclaveError> {
        if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
            Ok(x as usize)
        } else {
            Err(bad("non-integral header"))
        }
    };
    let (dim, classes, n) = (as_count(values[0])?, as_count(values[1])?, as_count(values[2])?);
    if values.len() != 3 + n * dim + n {
        return Err(bad("length disagrees with header"));
    }
    let features = values[3..3 + n * dim].to_vec();
    let labels = values[3 + n * dim..]
        .iter()
        .map(|&l| as_count(l))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(features, labels, dim, classes).map_err(|e| bad(&e.to_string()))
}

/// A client's sealing endpoint. It can seal but never unseal.
#[derive(Clone)]
pub struct ClientChannel {
    client: usize,
    key: u64,
}

impl fmt::Debug for ClientChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientChannel")
            .field("client", &self.client)
            .finish_non_exhaustive()
    }
}

impl ClientChannel {
    pub fn client(&self) -> usize {
        self.client
    }

    pub fn seal_sample(&self, sample: &SampleBatch, nonce: u64) -> SealedBlob {
        seal(self.key, self.client as u32, 0, nonce, &sample_to_values(&sample.data))
    }

    pub fn seal_update(&self, round: usize, update: &ParamVector, nonce: u64) -> SealedBlob {
        seal(self.key, self.client as u32, round as u32, nonce, update.as_slice())
    }
}

/// Filter thresholds `(eps1, eps2, eps3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eps1: 0.0,
            eps2: 0.5,
            eps3: 2.0,
        }
    }
}

impl Thresholds {
    pub fn new(eps1: f64, eps2: f64, eps3: f64) -> Result<Self, EnclaveError> {
        let t = Self { eps1, eps2, eps3 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), EnclaveError> {
        if ![self.eps1, self.eps2, self.eps3].iter().all(|x| x.is_finite()) {
            return Err(EnclaveError::InvalidThresholds("thresholds must be finite".into()));
        }
        if !(self.eps2 > 0.0 && self.eps2 < self.eps3) {
            return Err(EnclaveError::InvalidThresholds(format!(
                "need 0 < eps2 < eps3, got eps2 = {}, eps3 = {}",
                self.eps2, self.eps3
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedCondition {
    None,
    Direction,
    Length,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub client_id: usize,
    pub c1: f64,
    /// `f64::INFINITY` when the guiding update vanishes but the upload does not.
    pub c2: f64,
    pub passed: bool,
    pub failed_condition: FailedCondition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidingUpdate {
    pub client_id: usize,
    pub round: usize,
    pub payload: ParamVector,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(sign(z . guide), |z| / |guide|)`, with `sign(0) = 0`.
///
/// When `|guide| <= ZERO_NORM < |z|` the ratio is infinite; when both norms
/// are at most [`ZERO_NORM`] the result is `(1, 1)`.
pub fn similarity(z: &ParamVector, guide: &ParamVector) -> Result<(f64, f64), EnclaveError> {
    if z.len() != guide.len() {
        return Err(EnclaveError::LengthMismatch {
            left: z.len(),
            right: guide.len(),
        });
    }
    let (nz, ng) = (z.norm(), guide.norm());
    // Two vanishing vectors count as coincident so a converged client passes.
    if nz <= ZERO_NORM && ng <= ZERO_NORM {
        return Ok((1.0, 1.0));
    }
    let c1 = sign(z.dot(guide));
    let c2 = if ng <= ZERO_NORM { f64::INFINITY } else { nz / ng };
    Ok((c1, c2))
}

/// Applies both similarity conditions.
pub fn filter(
    client_id: usize,
    z: &ParamVector,
    guide: &ParamVector,
    t: &Thresholds,
) -> Result<FilterDecision, EnclaveError> {
    let (c1, c2) = similarity(z, guide)?;
    Ok(decide(client_id, c1, c2, t))
}

/// Verdict for precomputed similarity values.
pub fn decide(client_id: usize, c1: f64, c2: f64, t: &Thresholds) -> FilterDecision {
    let direction_ok = c1 > t.eps1;
    let length_ok = c2 > t.eps2 && c2 < t.eps3;
    let failed_condition = match (direction_ok, length_ok) {
        (true, true) => FailedCondition::None,
        (false, true) => FailedCondition::Direction,
        (true, false) => FailedCondition::Length,
        (false, false) => FailedCondition::Both,
    };
    FilterDecision {
        client_id,
        c1,
        c2,
        passed: direction_ok && length_ok,
        failed_condition,
    }
}

/// `theta_prev - theta_E` after `steps` full-batch gradient steps on `sample`.
pub fn guiding_update(
    model: &dyn Model,
    theta_prev: &ParamVector,
    sample: BatchView<'_>,
    l2: f64,
    alpha: f64,
    steps: usize,
) -> Result<ParamVector, EnclaveError> {
    if steps == 0 {
        return Err(EnclaveError::ZeroSteps);
    }
    let mut theta = theta_prev.clone();
    for _ in 0..steps {
        let g = model.loss_and_grad(&theta, sample, l2)?;
        theta = sgd_step(&theta, &g.gradient, alpha)?;
    }
    Ok(theta_prev.sub(&theta))
}

/// What the untrusted side learns from a successful round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub theta: ParamVector,
    pub decisions: Vec<FilterDecision>,
    pub accepted: BTreeSet<usize>,
    pub flagged: BTreeSet<usize>,
    /// Norm of the applied mean update.
    pub aggregate_norm: f64,
}

/// The enclave: vault, channel keys, thresholds and the global model.
pub struct Enclave {
    model: Arc<dyn Model>,
    theta: ParamVector,
    l2: f64,
    thresholds: Thresholds,
    secret: u64,
    keys: BTreeMap<usize, u64>,
    vault: BTreeMap<usize, Dataset>,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("params", &self.theta.len())
            .field("thresholds", &self.thresholds)
            .field("provisioned", &self.vault.len())
            .finish_non_exhaustive()
    }
}

impl Enclave {
    pub fn new(
        model: Arc<dyn Model>,
        theta0: ParamVector,
        l2: f64,
        thresholds: Thresholds,
        secret: u64,
    ) -> Result<Self, EnclaveError> {
        thresholds.validate()?;
        if theta0.len() != model.param_count() {
            return Err(EnclaveError::LengthMismatch {
                left: theta0.len(),
                right: model.param_count(),
            });
        }
        Ok(Self {
            model,
            theta: theta0,
            l2,
            thresholds,
            secret,
            keys: BTreeMap::new(),
            vault: BTreeMap::new(),
        })
    }

    /// Agrees a key with `client`; repeated calls return the same channel.
    pub fn establish_channel(&mut self, client: usize) -> ClientChannel {
        let secret = self.secret;
        let key = *self
            .keys
            .entry(client)
            .or_insert_with(|| derive_seed(secret, client as u64, 0, Purpose::ChannelKey));
        ClientChannel { client, key }
    }

    /// Stores a client's sample. Allowed once per client.
    pub fn provision_sample(&mut self, blob: &SealedBlob) -> Result<(), EnclaveError> {
        let owner = blob.owner as usize;
        if self.vault.contains_key(&owner) {
            return Err(EnclaveError::DuplicateProvision(owner));
        }
        let key = *self.keys.get(&owner).ok_or(EnclaveError::NoChannel(owner))?;
        let data = sample_from_values(&unseal(key, blob)?)?;
        if data.input_dim() != self.model.input_dim() {
            return Err(EnclaveError::Malformed(format!(
                "sample dimension {} does not match model input {}",
                data.input_dim(),
                self.model.input_dim()
            )));
        }
        self.vault.insert(owner, data);
        Ok(())
    }

    pub fn is_provisioned(&self, client: usize) -> bool {
        self.vault.contains_key(&client)
    }

    pub fn provisioned_count(&self) -> usize {
        self.vault.len()
    }

    pub fn sample_size(&self, client: usize) -> Option<usize> {
        self.vault.get(&client).map(Dataset::len)
    }

    pub fn global_model(&self) -> &ParamVector {
        &self.theta
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    /// Guiding update for a provisioned client at the current model.
    fn guiding_update(
        &self,
        client: usize,
        round: usize,
        alpha: f64,
        steps: usize,
    ) -> Result<GuidingUpdate, EnclaveError> {
        let sample = self.vault.get(&client).ok_or(EnclaveError::UnknownClient(client))?;
        let payload = guiding_update(self.model.as_ref(), &self.theta, sample.view(), self.l2, alpha, steps)?;
        Ok(GuidingUpdate {
            client_id: client,
            round,
            payload,
        })
    }

    /// Decrypts the round's updates, filters each against its guiding
    /// update and applies the mean of the accepted ones.
    ///
    /// With no survivors the model is left unchanged and
    /// [`EnclaveError::NoSurvivors`] carries the decisions.
    pub fn secure_round(
        &mut self,
        blobs: &[SealedBlob],
        alpha: f64,
        steps: usize,
        round: usize,
    ) -> Result<RoundOutcome, EnclaveError> {
        if blobs.is_empty() {
            return Err(EnclaveError::NoUpdates);
        }
        if steps == 0 {
            return Err(EnclaveError::ZeroSteps);
        }
        let mut seen = BTreeSet::new();
        for b in blobs {
            let owner = b.owner as usize;
            if b.round as usize != round {
                return Err(EnclaveError::WrongRound {
                    owner,
                    expected: round,
                    found: b.round as usize,
                });
            }
            if !seen.insert(owner) {
                return Err(EnclaveError::DuplicateUpdate(owner));
            }
            if !self.vault.contains_key(&owner) {
                return Err(EnclaveError::UnknownClient(owner));
            }
        }
        let mut ordered: Vec<&SealedBlob> = blobs.iter().collect();
        ordered.sort_by_key(|b| b.owner);

        let this = &*self;
        let results: Vec<Result<(usize, ParamVector, FilterDecision), EnclaveError>> = ordered
            .par_iter()
            .map(|blob| {
                let owner = blob.owner as usize;
                let key = *this.keys.get(&owner).ok_or(EnclaveError::NoChannel(owner))?;
                let z = ParamVector::new(unseal(key, blob)?);
                let guide = this.guiding_update(owner, round, alpha, steps)?;
                let decision = filter(owner, &z, &guide.payload, &this.thresholds)?;
                Ok((owner, z, decision))
            })
            .collect();

        let mut decisions = Vec::with_capacity(results.len());
        let mut accepted_updates = Vec::new();
        for r in results {
            let (owner, z, decision) = r?;
            if decision.passed {
                accepted_updates.push((owner, z));
            }
            decisions.push(decision);
        }
        let flagged: BTreeSet<usize> = decisions.iter().filter(|d| !d.passed).map(|d| d.client_id).collect();
        if accepted_updates.is_empty() {
            return Err(EnclaveError::NoSurvivors { round, decisions });
        }
        let mut mean = ParamVector::zeros(self.theta.len());
        for (_, z) in &accepted_updates {
            if z.len() != mean.len() {
                return Err(EnclaveError::LengthMismatch {
                    left: z.len(),
                    right: mean.len(),
                });
            }
            mean.axpy(1.0, z);
        }
        let mean = mean.scaled(1.0 / accepted_updates.len() as f64);
        self.theta = self.theta.sub(&mean);
        Ok(RoundOutcome {
            theta: self.theta.clone(),
            decisions,
            accepted: accepted_updates.iter().map(|(id, _)| *id).collect(),
            flagged,
            aggregate_norm: mean.norm(),
        })
    }
}
