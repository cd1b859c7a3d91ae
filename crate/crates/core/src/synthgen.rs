//! Synthetic flow corpora with controllable heterogeneity between
//! environments.
//!
//! Each [`EnvironmentProfile`] describes, per class, log-normal
//! distributions for duration, packet and byte counts together with
//! categorical distributions for protocol, TCP flags and both ports. A
//! profile is obtained by moving from a base parameter set toward an
//! alternative one by the divergence knob `λ`: log-space means move
//! linearly in `λ` (and keep moving past 1), spreads and categorical
//! probabilities interpolate linearly with `min(λ, 1)`.
//!
//! The shipped alternative parameter set relabels the base classes
//! (normal traffic of the alternative environment resembles attacker
//! traffic of the base one, and so on), so at `λ = 1` a classifier trained
//! for one environment is actively wrong for the other.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use thiserror::Error;

use crate::dataset::{FlowClass, LabeledDataset, NUM_CLASSES};
use crate::flow_data::{apportion, EncodingMap, RawFlowRecord};
use crate::rng::{derive_seed, seeded_rng, stream};
use PortChoice::{Ephemeral, Fixed};

/// Lowest port drawn for the ephemeral outcome of a [`PortChoice`].
pub const EPHEMERAL_LOW: u16 = 32_768;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("profile {id}: {reason}")]
    Profile { id: String, reason: String },
    #[error("worker {worker} refers to profile {profile}, but only {available} profiles exist")]
    Assignment { worker: usize, profile: usize, available: usize },
    #[error("{workers} workers but {sizes} sizes")]
    Sizes { workers: usize, sizes: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalSpec {
    /// Mean of the underlying normal.
    pub mu: f64,
    /// Standard deviation of the underlying normal.
    pub sigma: f64,
}

impl LogNormalSpec {
    pub const fn new(mu: f64, sigma: f64) -> Self {
        Self { mu, sigma }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PortChoice {
    Fixed(u16),
    /// Uniform over `EPHEMERAL_LOW..=65535`.
    Ephemeral,
}

/// Finite distribution over labelled outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical<T> {
    outcomes: Vec<(T, f64)>,
}

impl<T: Clone + Ord> Categorical<T> {
    pub fn new(outcomes: Vec<(T, f64)>) -> Self {
        Self { outcomes }
    }

    pub fn outcomes(&self) -> &[(T, f64)] {
        &self.outcomes
    }

    pub fn probability(&self, value: &T) -> f64 {
        self.outcomes.iter().filter(|(v, _)| v == value).map(|(_, p)| p).sum()
    }

    fn check(&self) -> Result<(), String> {
        if self.outcomes.is_empty() {
            return Err("empty categorical distribution".into());
        }
        if self.outcomes.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err("negative categorical probability".into());
        }
        let sum: f64 = self.outcomes.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("categorical probabilities sum to {sum}"));
        }
        Ok(())
    }

    /// `(1 - t) * self + t * other` over the union of outcomes.
    fn lerp(&self, other: &Self, t: f64) -> Self {
        let keys: BTreeSet<T> = self.outcomes.iter().chain(&other.outcomes).map(|(v, _)| v.clone()).collect();
        let outcomes = keys
            .into_iter()
            .map(|k| {
                let p = (1.0 - t) * self.probability(&k) + t * other.probability(&k);
                (k, p)
            })
            .filter(|(_, p)| *p > 0.0)
            .collect();
        Self { outcomes }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> T {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (v, p) in &self.outcomes {
            acc += p;
            if u < acc {
                return v.clone();
            }
        }
        self.outcomes.last().expect("validated non-empty").0.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub duration: LogNormalSpec,
    pub packets: LogNormalSpec,
    pub bytes_per_packet: LogNormalSpec,
    pub protocol: Categorical<String>,
    pub flags: Categorical<String>,
    pub src_port: Categorical<PortChoice>,
    pub dst_port: Categorical<PortChoice>,
}

fn cat<T: Clone + Ord>(items: &[(T, f64)]) -> Categorical<T> {
    Categorical::new(items.to_vec())
}

fn strings(items: &[(&str, f64)]) -> Categorical<String> {
    Categorical::new(items.iter().map(|(s, p)| (s.to_string(), *p)).collect())
}

impl ClassProfile {
    fn normal() -> Self {
        Self {
            duration: LogNormalSpec::new(-1.0, 0.6),
            packets: LogNormalSpec::new(1.8, 0.5),
            bytes_per_packet: LogNormalSpec::new(4.8, 0.4),
            protocol: strings(&[("TCP", 0.95), ("UDP", 0.05)]),
            flags: strings(&[(".AP...", 0.6), (".AP.S.", 0.4)]),
            src_port: cat(&[(Fixed(80), 0.2), (Fixed(443), 0.2), (Ephemeral, 0.6)]),
            dst_port: cat(&[(Fixed(80), 0.2), (Fixed(443), 0.2), (Ephemeral, 0.6)]),
        }
    }

    fn attacker() -> Self {
        Self {
            duration: LogNormalSpec::new(-2.0, 0.5),
            packets: LogNormalSpec::new(1.0, 0.4),
            bytes_per_packet: LogNormalSpec::new(4.0, 0.3),
            protocol: strings(&[("TCP", 0.95), ("ICMP", 0.05)]),
            flags: strings(&[("....S.", 0.67), ("...RS.", 0.28), (".A....", 0.05)]),
            src_port: cat(&[(Ephemeral, 0.9), (Fixed(80), 0.1)]),
            dst_port: cat(&[(Fixed(22), 0.3), (Fixed(80), 0.3), (Fixed(443), 0.1), (Fixed(8080), 0.1), (Ephemeral, 0.2)]),
        }
    }

    fn victim() -> Self {
        Self {
            duration: LogNormalSpec::new(-1.4, 0.5),
            packets: LogNormalSpec::new(1.5, 0.4),
            bytes_per_packet: LogNormalSpec::new(4.5, 0.35),
            protocol: strings(&[("TCP", 0.95), ("UDP", 0.05)]),
            flags: strings(&[(".A.R..", 0.6), (".A..S.", 0.4)]),
            src_port: cat(&[(Fixed(22), 0.2), (Fixed(80), 0.25), (Fixed(443), 0.15), (Ephemeral, 0.4)]),
            dst_port: cat(&[(Ephemeral, 0.7), (Fixed(80), 0.3)]),
        }
    }

    fn check(&self) -> Result<(), String> {
        for spec in [self.duration, self.packets, self.bytes_per_packet] {
            if !(spec.sigma > 0.0) || !spec.mu.is_finite() || !spec.sigma.is_finite() {
                return Err(format!("log-normal parameters ({}, {}) need finite mu and sigma > 0", spec.mu, spec.sigma));
            }
        }
        self.protocol.check()?;
        self.flags.check()?;
        self.src_port.check()?;
        self.dst_port.check()
    }

    fn blend(&self, other: &Self, lambda: f64) -> Self {
        let t = lambda.min(1.0);
        let ln = |a: LogNormalSpec, b: LogNormalSpec| LogNormalSpec {
            mu: a.mu + lambda * (b.mu - a.mu),
            sigma: a.sigma + t * (b.sigma - a.sigma),
        };
        Self {
            duration: ln(self.duration, other.duration),
            packets: ln(self.packets, other.packets),
            bytes_per_packet: ln(self.bytes_per_packet, other.bytes_per_packet),
            protocol: self.protocol.lerp(&other.protocol, t),
            flags: self.flags.lerp(&other.flags, t),
            src_port: self.src_port.lerp(&other.src_port, t),
            dst_port: self.dst_port.lerp(&other.dst_port, t),
        }
    }
}

/// Per-class parameters of the base environment, indexed by class code.
pub fn base_classes() -> [ClassProfile; NUM_CLASSES] {
    [ClassProfile::normal(), ClassProfile::attacker(), ClassProfile::victim()]
}

/// Alternative environment: class `c` is drawn like base class `(c + 1) % 3`.
pub fn alternative_classes() -> [ClassProfile; NUM_CLASSES] {
    [ClassProfile::attacker(), ClassProfile::victim(), ClassProfile::normal()]
}

/// Raw class proportions of the CIDDS traffic, normal : attacker : victim.
pub const CIDDS_CLASS_MIX: [f64; NUM_CLASSES] = [17.0, 1.2, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentProfile {
    pub id: String,
    pub classes: [ClassProfile; NUM_CLASSES],
    /// Class proportions, summing to 1.
    pub class_mix: [f64; NUM_CLASSES],
    pub divergence: f64,
}

impl EnvironmentProfile {
    /// Profile at divergence `λ` between `base` and `alternative`. The class
    /// mix is normalised to sum to 1.
    pub fn interpolated(
        id: impl Into<String>,
        base: &[ClassProfile; NUM_CLASSES],
        alternative: &[ClassProfile; NUM_CLASSES],
        class_mix: [f64; NUM_CLASSES],
        divergence: f64,
    ) -> Result<Self, SynthError> {
        let id = id.into();
        let err = |reason: String| SynthError::Profile { id: id.clone(), reason };
        if !(divergence >= 0.0) || !divergence.is_finite() {
            return Err(err(format!("divergence {divergence} must be finite and >= 0")));
        }
        let total: f64 = class_mix.iter().sum();
        if class_mix.iter().any(|&m| !(m >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(err(format!("class mix {class_mix:?} must be non-negative with a positive sum")));
        }
        let classes = [0, 1, 2].map(|c| base[c].blend(&alternative[c], divergence));
        let profile = Self { classes, class_mix: class_mix.map(|m| m / total), divergence, id: id.clone() };
        profile.validate()?;
        Ok(profile)
    }

    /// CIDDS-like profile with the default class mix `17 : 1.2 : 1`.
    pub fn cidds_like(id: impl Into<String>, divergence: f64) -> Result<Self, SynthError> {
        Self::with_mix(id, divergence, CIDDS_CLASS_MIX)
    }

    pub fn with_mix(id: impl Into<String>, divergence: f64, class_mix: [f64; NUM_CLASSES]) -> Result<Self, SynthError> {
        Self::interpolated(id, &base_classes(), &alternative_classes(), class_mix, divergence)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |reason: String| SynthError::Profile { id: self.id.clone(), reason };
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|&m| m < 0.0) {
            return Err(err(format!("class mix sums to {sum}")));
        }
        for (c, class) in self.classes.iter().enumerate() {
            class.check().map_err(|r| err(format!("class {c}: {r}")))?;
        }
        Ok(())
    }
}

fn draw_port(choice: &Categorical<PortChoice>, rng: &mut ChaCha8Rng) -> u16 {
    match choice.sample(rng) {
        Fixed(p) => p,
        Ephemeral => rng.random_range(EPHEMERAL_LOW..=u16::MAX),
    }
}

fn draw_record(class: FlowClass, p: &ClassProfile, rng: &mut ChaCha8Rng) -> RawFlowRecord {
    let lognormal = |s: LogNormalSpec| LogNormal::new(s.mu, s.sigma).expect("validated spread");
    let duration = lognormal(p.duration).sample(rng);
    // Three decimals, like NetFlow exports.
    let duration = (duration * 1000.0).round() / 1000.0;
    let packets = lognormal(p.packets).sample(rng).round().max(1.0) as u64;
    let per_packet = lognormal(p.bytes_per_packet).sample(rng).max(20.0);
    let bytes = (per_packet * packets as f64).round() as u64;
    let protocol = p.protocol.sample(rng);
    let flags = if protocol == "TCP" { p.flags.sample(rng) } else { "......".to_string() };
    let src_port = draw_port(&p.src_port, rng);
    let dst_port = draw_port(&p.dst_port, rng);
    RawFlowRecord { duration, protocol, src_port, dst_port, packets, bytes, flags, label: class }
}

/// `n` records drawn from `profile`. Class counts follow the mix exactly
/// (largest-remainder rounding); record order is shuffled.
pub fn generate_records(profile: &EnvironmentProfile, n: usize, seed: u64) -> Result<Vec<RawFlowRecord>, SynthError> {
    if n == 0 {
        return Err(SynthError::NoSamples);
    }
    profile.validate()?;
    let counts = apportion(n, &profile.class_mix);
    let mut labels: Vec<FlowClass> = FlowClass::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&c, &k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = seeded_rng(seed);
    labels.shuffle(&mut rng);
    Ok(labels.into_iter().map(|c| draw_record(c, &profile.classes[c.code()], &mut rng)).collect())
}

/// Encoded (unscaled) dataset drawn from `profile`.
pub fn generate(profile: &EnvironmentProfile, n: usize, seed: u64) -> Result<LabeledDataset, SynthError> {
    let records = generate_records(profile, n, seed)?;
    Ok(EncodingMap::cidds_default().encode(&records).expect("generated tokens are in the default vocabulary"))
}

/// Records for each worker; worker `i` draws `sizes[i]` samples from
/// `profiles[assignment[i]]` with its own derived seed.
pub fn make_scenario_records(
    profiles: &[EnvironmentProfile],
    assignment: &[usize],
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Vec<RawFlowRecord>>, SynthError> {
    if assignment.len() != sizes.len() {
        return Err(SynthError::Sizes { workers: assignment.len(), sizes: sizes.len() });
    }
    assignment
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(w, (&p, &n))| {
            let profile = profiles.get(p).ok_or(SynthError::Assignment {
                worker: w,
                profile: p,
                available: profiles.len(),
            })?;
            generate_records(profile, n, derive_seed(seed, &[stream::DATA, w as u64]))
        })
        .collect()
}

pub fn make_scenario(
    profiles: &[EnvironmentProfile],
    assignment: &[usize],
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<LabeledDataset>, SynthError> {
    let encoding = EncodingMap::cidds_default();
    Ok(make_scenario_records(profiles, assignment, sizes, seed)?
        .iter()
        .map(|r| encoding.encode(r).expect("generated tokens are in the default vocabulary"))
        .collect())
}
