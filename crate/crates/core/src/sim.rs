//! Admission-control scenarios.
//!
//! A run draws a stream of download attempts from per-peer behaviour
//! profiles. An attempt only goes through when the consumer's current index
//! is strictly above the admission threshold. Indices are recomputed from the
//! accumulated ledger every `recompute_every` attempts; until its first
//! recompute every peer holds the neutral value, so newcomers can bootstrap.

use std::io::Write;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{PeerId, ShareMatrix};
use crate::numfmt;
use crate::solver::{self, BciParams, BciVector, SolverError, Stopping};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeerProfile {
    /// Uploads and downloads; `generosity` in (0, 1] weights how often it is picked to upload.
    Cooperative { generosity: f64 },
    /// Downloads, never uploads.
    FreeRider,
    /// Uploads, never downloads.
    PureContributor,
}

impl PeerProfile {
    fn upload_weight(self) -> f64 {
        match self {
            PeerProfile::Cooperative { generosity } => generosity,
            PeerProfile::FreeRider => 0.0,
            PeerProfile::PureContributor => 1.0,
        }
    }

    fn downloads(self) -> bool {
        !matches!(self, PeerProfile::PureContributor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SimConfigFile")]
pub struct SimConfig {
    pub n: usize,
    pub alpha: f64,
    /// A consumer must have an index strictly above this to download.
    pub threshold: f64,
    pub recompute_every: u64,
    /// Number of attempted transactions.
    pub duration: u64,
    pub peer_profiles: Vec<PeerProfile>,
    pub rng_seed: u64,
}

#[derive(Deserialize)]
struct SimConfigFile {
    n: usize,
    alpha: f64,
    threshold: Option<f64>,
    recompute_every: u64,
    duration: u64,
    peer_profiles: Vec<PeerProfile>,
    rng_seed: u64,
}

impl From<SimConfigFile> for SimConfig {
    fn from(f: SimConfigFile) -> Self {
        Self {
            n: f.n,
            alpha: f.alpha,
            threshold: f.threshold.unwrap_or_else(|| default_threshold(f.alpha)),
            recompute_every: f.recompute_every,
            duration: f.duration,
            peer_profiles: f.peer_profiles,
            rng_seed: f.rng_seed,
        }
    }
}

/// `1 − α + 0.05·α`: just above the free-rider floor, well below neutral.
pub fn default_threshold(alpha: f64) -> f64 {
    1.0 - alpha + 0.05 * alpha
}

impl SimConfig {
    /// All-cooperative network with the default threshold.
    pub fn cooperative(n: usize, alpha: f64, duration: u64, seed: u64) -> Self {
        Self {
            n,
            alpha,
            threshold: default_threshold(alpha),
            recompute_every: 50,
            duration,
            peer_profiles: vec![PeerProfile::Cooperative { generosity: 1.0 }; n],
            rng_seed: seed,
        }
    }

    /// Nine cooperative peers and one free rider (the last peer), α = 0.8,
    /// threshold 0.25, 5000 attempts.
    pub fn free_rider_scenario(seed: u64) -> Self {
        let mut config = Self::cooperative(10, 0.8, 5000, seed);
        config.threshold = 0.25;
        config.peer_profiles[9] = PeerProfile::FreeRider;
        config
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n < 2 {
            return Err(invalid("n", format!("need at least 2 peers, got {}", self.n)));
        }
        if self.peer_profiles.len() != self.n {
            return Err(invalid(
                "peer_profiles",
                format!("{} profiles for {} peers", self.peer_profiles.len(), self.n),
            ));
        }
        if solver::check_alpha(self.alpha).is_err() {
            return Err(invalid("alpha", format!("{} is outside (0, 1)", self.alpha)));
        }
        let floor = 1.0 - self.alpha;
        if !(self.threshold >= floor && self.threshold <= 1.0) {
            return Err(invalid(
                "threshold",
                format!("{} is outside [{floor}, 1]", self.threshold),
            ));
        }
        if self.duration == 0 {
            return Err(invalid("duration", "must be at least 1"));
        }
        if self.recompute_every == 0 {
            return Err(invalid("recompute_every", "must be at least 1"));
        }
        for p in &self.peer_profiles {
            if let PeerProfile::Cooperative { generosity } = p {
                if !(*generosity > 0.0 && *generosity <= 1.0) {
                    return Err(invalid(
                        "peer_profiles",
                        format!("generosity {generosity} is outside (0, 1]"),
                    ));
                }
            }
        }
        let uploaders: Vec<usize> = (0..self.n)
            .filter(|&i| self.peer_profiles[i].upload_weight() > 0.0)
            .collect();
        let consumers: Vec<usize> = (0..self.n)
            .filter(|&i| self.peer_profiles[i].downloads())
            .collect();
        let has_pair = uploaders.iter().any(|u| consumers.iter().any(|c| c != u));
        if !has_pair {
            return Err(invalid(
                "peer_profiles",
                "no uploader/consumer pair can ever transact",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeerStats {
    pub profile: Option<PeerProfile>,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub uploaded_total: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub downloaded_total: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub imbalance: f64,
    pub committed_downloads: u64,
    pub denied_downloads: u64,
    /// Step of the first recompute at which this peer had any transaction on record.
    pub first_rated_step: Option<u64>,
    /// Downloads committed after `first_rated_step`.
    pub downloads_after_rating: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BciSnapshot {
    /// Attempts completed when the snapshot was taken; 0 is the neutral start.
    pub step: u64,
    pub bci: BciVector,
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub uploaded: Vec<f64>,
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub downloaded: Vec<f64>,
    pub denied: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub peers: Vec<PeerStats>,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub mean_imbalance: f64,
    /// Share of all downloaded volume taken by free riders.
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub free_rider_download_fraction: f64,
    pub committed_total: u64,
    pub denied_total: u64,
    pub bci_trajectories: Vec<BciSnapshot>,
}

impl SimMetrics {
    /// Per-peer totals of an existing ledger, with no attempt history.
    pub fn from_ledger(ledger: &ShareMatrix) -> Self {
        let s = ledger.summary();
        let peers: Vec<PeerStats> = (0..ledger.n())
            .map(|i| PeerStats {
                profile: None,
                uploaded_total: s.upload_totals[i],
                downloaded_total: s.download_totals[i],
                imbalance: (s.upload_totals[i] - s.download_totals[i]).abs(),
                committed_downloads: 0,
                denied_downloads: 0,
                first_rated_step: None,
                downloads_after_rating: 0,
            })
            .collect();
        let mean_imbalance = mean(peers.iter().map(|p| p.imbalance));
        Self {
            peers,
            mean_imbalance,
            free_rider_download_fraction: 0.0,
            committed_total: 0,
            denied_total: 0,
            bci_trajectories: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// One row per (recompute, peer): `step,peer,bci,uploaded,downloaded,denied`.
    pub fn write_trajectory_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["step", "peer", "bci", "uploaded", "downloaded", "denied"])?;
        for snap in &self.bci_trajectories {
            for (i, &bci) in snap.bci.values().iter().enumerate() {
                out.write_record([
                    snap.step.to_string(),
                    i.to_string(),
                    numfmt::sig17(bci),
                    numfmt::sig17(snap.uploaded[i]),
                    numfmt::sig17(snap.downloaded[i]),
                    snap.denied[i].to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        solver::compensated_sum(v.iter().copied()) / v.len() as f64
    }
}

/// One attempted download.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttemptRecord {
    /// 1-based attempt number.
    pub step: u64,
    pub provider: PeerId,
    pub consumer: PeerId,
    pub amount: f64,
    pub consumer_bci: f64,
    pub committed: bool,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub metrics: SimMetrics,
    pub ledger: ShareMatrix,
    pub attempts: Vec<AttemptRecord>,
}

/// Runs a scenario to completion. Deterministic for a given config.
pub fn run_simulation(config: &SimConfig) -> Result<SimRun, SimError> {
    config.validate()?;
    let n = config.n;
    let params = BciParams::new(config.alpha)?.with_stopping(Stopping::InfNormTol(1e-10));
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut ledger = ShareMatrix::new(n).expect("n validated");

    let upload_weights: Vec<f64> = config.peer_profiles.iter().map(|p| p.upload_weight()).collect();
    let provider_dist = WeightedIndex::new(&upload_weights).expect("some peer uploads");

    let mut bci = solver::initial_vector(n, config.alpha)?.into_inner();
    let mut uploaded = vec![0.0; n];
    let mut downloaded = vec![0.0; n];
    let mut committed = vec![0u64; n];
    let mut denied = vec![0u64; n];
    let mut first_rated: Vec<Option<u64>> = vec![None; n];
    let mut after_rating = vec![0u64; n];
    let mut attempts = Vec::with_capacity(config.duration as usize);
    let mut trajectories = vec![BciSnapshot {
        step: 0,
        bci: BciVector::new(bci.clone()),
        uploaded: uploaded.clone(),
        downloaded: downloaded.clone(),
        denied: denied.clone(),
    }];

    for step in 1..=config.duration {
        let provider = loop {
            let p = provider_dist.sample(&mut rng);
            // a lone cooperative uploader may have nobody else to serve
            if (0..n).any(|c| c != p && config.peer_profiles[c].downloads()) {
                break p;
            }
        };
        let consumer = pick_consumer(provider, &bci, &config.peer_profiles, &mut rng);
        let amount = rng.gen_range(1..=100u32) as f64;
        let consumer_bci = bci[consumer];
        let ok = consumer_bci > config.threshold;
        if ok {
            ledger
                .record_transaction(PeerId(provider), PeerId(consumer), amount)
                .expect("generator only produces valid transactions");
            uploaded[provider] += amount;
            downloaded[consumer] += amount;
            committed[consumer] += 1;
            if first_rated[consumer].is_some() {
                after_rating[consumer] += 1;
            }
        } else {
            denied[consumer] += 1;
        }
        attempts.push(AttemptRecord {
            step,
            provider: PeerId(provider),
            consumer: PeerId(consumer),
            amount,
            consumer_bci,
            committed: ok,
        });

        if step % config.recompute_every == 0 {
            bci = solver::solve(&ledger, &params)?.x.into_inner();
            for i in 0..n {
                if first_rated[i].is_none() && (uploaded[i] > 0.0 || downloaded[i] > 0.0) {
                    first_rated[i] = Some(step);
                }
            }
            trajectories.push(BciSnapshot {
                step,
                bci: BciVector::new(bci.clone()),
                uploaded: uploaded.clone(),
                downloaded: downloaded.clone(),
                denied: denied.clone(),
            });
        }
    }

    let peers: Vec<PeerStats> = (0..n)
        .map(|i| PeerStats {
            profile: Some(config.peer_profiles[i]),
            uploaded_total: uploaded[i],
            downloaded_total: downloaded[i],
            imbalance: (uploaded[i] - downloaded[i]).abs(),
            committed_downloads: committed[i],
            denied_downloads: denied[i],
            first_rated_step: first_rated[i],
            downloads_after_rating: after_rating[i],
        })
        .collect();
    let total_down: f64 = solver::compensated_sum(downloaded.iter().copied());
    let free_rider_down = solver::compensated_sum(
        (0..n)
            .filter(|&i| config.peer_profiles[i] == PeerProfile::FreeRider)
            .map(|i| downloaded[i]),
    );
    let metrics = SimMetrics {
        mean_imbalance: mean(peers.iter().map(|p| p.imbalance)),
        free_rider_download_fraction: if total_down > 0.0 {
            free_rider_down / total_down
        } else {
            0.0
        },
        committed_total: committed.iter().sum(),
        denied_total: denied.iter().sum(),
        peers,
        bci_trajectories: trajectories,
    };
    Ok(SimRun {
        metrics,
        ledger,
        attempts,
    })
}

/// Picks a consumer other than `provider`, weighting candidates by the rank
/// of their current index (lowest index gets weight 1).
fn pick_consumer(provider: usize, bci: &[f64], profiles: &[PeerProfile], rng: &mut ChaCha8Rng) -> usize {
    let mut candidates: Vec<usize> = (0..bci.len())
        .filter(|&c| c != provider && profiles[c].downloads())
        .collect();
    candidates.sort_by(|&a, &b| bci[a].total_cmp(&bci[b]).then(a.cmp(&b)));
    let weights: Vec<usize> = (1..=candidates.len()).collect();
    let dist = WeightedIndex::new(&weights).expect("at least one candidate");
    candidates[dist.sample(rng)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Positive,
    Negative,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub mean_imbalance: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub max_imbalance: f64,
    /// `max_imbalance / total volume`, zero for an empty ledger.
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub relative_max_imbalance: f64,
    pub final_bci: BciVector,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub bci_dispersion: f64,
    /// Pearson correlation between final index and (upload − download).
    pub correlation: Option<f64>,
    pub correlation_direction: Direction,
    /// A uniform index vector must come with a balanced ledger.
    pub uniform_implies_balanced: bool,
    pub denied_total: u64,
}

/// Summarises how fair the final state of a run is.
pub fn fairness_report(
    metrics: &SimMetrics,
    ledger: &ShareMatrix,
    alpha: f64,
) -> Result<FairnessReport, SimError> {
    let params = BciParams::new(alpha)?.with_stopping(Stopping::InfNormTol(1e-12));
    let final_bci = solver::solve(ledger, &params)?.x;
    let s = ledger.summary();
    let net: Vec<f64> = s
        .upload_totals
        .iter()
        .zip(&s.download_totals)
        .map(|(u, d)| u - d)
        .collect();
    let imbalance: Vec<f64> = net.iter().map(|v| v.abs()).collect();
    let max_imbalance = imbalance.iter().copied().fold(0.0, f64::max);
    let relative_max_imbalance = if s.total > 0.0 {
        max_imbalance / s.total
    } else {
        0.0
    };
    let bci_dispersion = final_bci.dispersion();
    let correlation = pearson(final_bci.values(), &net);
    let correlation_direction = match correlation {
        Some(c) if c > 0.0 => Direction::Positive,
        Some(c) if c < 0.0 => Direction::Negative,
        _ => Direction::Undefined,
    };
    Ok(FairnessReport {
        mean_imbalance: mean(imbalance.iter().copied()),
        max_imbalance,
        relative_max_imbalance,
        final_bci,
        bci_dispersion,
        correlation,
        correlation_direction,
        uniform_implies_balanced: bci_dispersion >= 1e-6 || relative_max_imbalance < 1e-4,
        denied_total: metrics.denied_total,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let ma = mean(a.iter().copied());
    let mb = mean(b.iter().copied());
    let cov = solver::compensated_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let va = solver::compensated_sum(a.iter().map(|x| (x - ma).powi(2)));
    let vb = solver::compensated_sum(b.iter().map(|y| (y - mb).powi(2)));
    // spreads this small are rounding noise
    if va <= 1e-24 || vb <= 1e-24 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}
