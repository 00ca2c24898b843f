//! Protocol constants shared by every node of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Every tunable constant of the overlay, bully and replication protocols.
///
/// Times are simulated milliseconds, distances meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Peer radius, movement re-announcement threshold and signalling query radius.
    pub max_distance: f64,
    pub max_peers: usize,
    pub announcement_time: u64,
    pub broadcast_time: u64,
    pub bully_timeout: u64,
    /// Radius within which an object is relevant to a client.
    pub interest_radius: f64,
    pub review_probability: f64,
    /// Peer and client↔edge one-way delay.
    pub latency_low: u64,
    /// Client↔cloud and edge↔cloud one-way delay.
    pub latency_high: u64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            max_distance: 1000.0,
            max_peers: 5,
            announcement_time: 1000,
            broadcast_time: 2000,
            bully_timeout: 6000,
            interest_radius: 1000.0,
            review_probability: 0.5,
            latency_low: 20,
            latency_high: 100,
            seed: 42,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &'static str, reason: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid { key, reason: reason.into() })
        }
        if !(self.max_distance.is_finite() && self.max_distance > 0.0) {
            return bad("max_distance", "must be a positive number of meters");
        }
        if self.max_peers < 1 {
            return bad("max_peers", "must be at least 1");
        }
        if self.announcement_time == 0 {
            return bad("announcement_time", "must be > 0 ms");
        }
        if self.broadcast_time == 0 {
            return bad("broadcast_time", "must be > 0 ms");
        }
        if self.bully_timeout <= self.broadcast_time {
            return bad(
                "bully_timeout",
                format!("must exceed broadcast_time ({} ms)", self.broadcast_time),
            );
        }
        if !(self.interest_radius.is_finite() && self.interest_radius > 0.0) {
            return bad("interest_radius", "must be a positive number of meters");
        }
        if !(0.0..=1.0).contains(&self.review_probability) {
            return bad("review_probability", "must lie in [0, 1]");
        }
        if self.latency_low > self.latency_high {
            return bad("latency_low", "must not exceed latency_high");
        }
        Ok(())
    }

    /// Parse a config file. `.json` files are read as JSON, anything else
    /// as TOML. Missing keys take their defaults; unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: shown.clone(), source })?;
        let cfg: ProtocolConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| ConfigError::Parse { path: shown, message: e.to_string() })?
        } else {
            toml::from_str(&text)
                .map_err(|e| ConfigError::Parse { path: shown, message: e.to_string() })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Time after which an unrefreshed candidate leaves a node's
    /// nodes-of-interest set.
    pub fn candidate_ttl(&self) -> u64 {
        5 * self.announcement_time
    }

    /// Radius of the object directory piggybacked on signalling replies.
    /// Wide enough that every object which can come within
    /// `interest_radius` before the next position report is already listed.
    pub fn directory_radius(&self) -> f64 {
        self.interest_radius + 2.0 * self.max_distance
    }

    /// A sent delta not acknowledged within this delay is resent straight
    /// to its object server.
    pub fn ack_timeout(&self) -> u64 {
        self.bully_timeout
    }
}
