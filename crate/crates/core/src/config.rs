use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::transport::PartyId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// Hash function behind the public hash-to-range construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HashFunction {
    #[default]
    Sha256,
    Sha512,
}

impl HashFunction {
    pub fn name(self) -> &'static str {
        match self {
            HashFunction::Sha256 => "sha256",
            HashFunction::Sha512 => "sha512",
        }
    }
}

impl fmt::Display for HashFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HashFunction {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "sha256" => Ok(HashFunction::Sha256),
            "sha512" => Ok(HashFunction::Sha512),
            other => Err(ConfigError(format!("unknown hash function {other:?}"))),
        }
    }
}

/// How the small-prime divisibility tests are run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrialDivisionMode {
    /// Residues summed up a hash-paired reduction tree.
    #[default]
    Tree,
    /// Two-party OT comparison; only valid for `n = 2`.
    ObliviousPair,
}

impl FromStr for TrialDivisionMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tree" => Ok(TrialDivisionMode::Tree),
            "pair" | "oblivious-pair" => Ok(TrialDivisionMode::ObliviousPair),
            other => Err(ConfigError(format!("unknown trial division mode {other:?}"))),
        }
    }
}

/// Public parameters every party must agree on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolConfig {
    parties: u16,
    /// Candidate share bit-length `k`.
    pub bits: u32,
    /// Trial-division bound `B`: every odd prime below it is tested.
    pub trial_bound: u64,
    /// Filter-test repetitions `s`.
    pub filter_rounds: u32,
    pub seed: Vec<u8>,
    pub hash: HashFunction,
    /// Number of divisibility tests issued together before checking verdicts.
    pub wave_size: usize,
    pub max_attempts: u64,
    pub trial_division: TrialDivisionMode,
}

pub const DEFAULT_TRIAL_BOUND: u64 = 541;
pub const DEFAULT_FILTER_ROUNDS: u32 = 40;
pub const DEFAULT_WAVE_SIZE: usize = 32;
pub const DEFAULT_MAX_ATTEMPTS: u64 = 1_000_000;

impl ProtocolConfig {
    pub fn new(parties: u16, bits: u32, seed: impl Into<Vec<u8>>) -> Result<Self, ConfigError> {
        let cfg = ProtocolConfig {
            parties,
            bits,
            trial_bound: DEFAULT_TRIAL_BOUND,
            filter_rounds: DEFAULT_FILTER_ROUNDS,
            seed: seed.into(),
            hash: HashFunction::Sha256,
            wave_size: DEFAULT_WAVE_SIZE,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            trial_division: TrialDivisionMode::Tree,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_trial_bound(mut self, bound: u64) -> Result<Self, ConfigError> {
        self.trial_bound = bound;
        self.validate().map(|_| self)
    }

    pub fn with_filter_rounds(mut self, rounds: u32) -> Result<Self, ConfigError> {
        self.filter_rounds = rounds;
        self.validate().map(|_| self)
    }

    pub fn with_wave_size(mut self, wave: usize) -> Result<Self, ConfigError> {
        self.wave_size = wave;
        self.validate().map(|_| self)
    }

    pub fn with_max_attempts(mut self, attempts: u64) -> Result<Self, ConfigError> {
        self.max_attempts = attempts;
        self.validate().map(|_| self)
    }

    pub fn with_trial_division(mut self, mode: TrialDivisionMode) -> Result<Self, ConfigError> {
        self.trial_division = mode;
        self.validate().map(|_| self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.parties < 2 || !self.parties.is_power_of_two() {
            return Err(ConfigError(format!("party count {} is not a power of two >= 2", self.parties)));
        }
        if self.parties > 1 << 14 {
            return Err(ConfigError(format!("party count {} exceeds 16384", self.parties)));
        }
        if self.bits < 8 {
            return Err(ConfigError(format!("bit length {} is below 8", self.bits)));
        }
        if self.bits > 1 << 16 {
            return Err(ConfigError(format!("bit length {} is unreasonably large", self.bits)));
        }
        if self.trial_bound < 3 {
            return Err(ConfigError(format!("trial bound {} is below 3", self.trial_bound)));
        }
        if self.trial_bound > 1 << 24 {
            return Err(ConfigError(format!("trial bound {} is unreasonably large", self.trial_bound)));
        }
        if self.filter_rounds < 1 {
            return Err(ConfigError("at least one filter round is required".into()));
        }
        if self.wave_size < 1 {
            return Err(ConfigError("wave size must be positive".into()));
        }
        if self.max_attempts < 1 {
            return Err(ConfigError("attempt cap must be positive".into()));
        }
        if self.trial_division == TrialDivisionMode::ObliviousPair && self.parties != 2 {
            return Err(ConfigError("the oblivious pair test needs exactly two parties".into()));
        }
        Ok(())
    }

    pub fn parties(&self) -> u16 {
        self.parties
    }

    /// `t` with `n = 2^t`.
    pub fn depth(&self) -> u32 {
        self.parties.trailing_zeros()
    }

    pub fn party_ids(&self) -> impl Iterator<Item = PartyId> {
        PartyId::all(self.parties)
    }

    pub fn party(&self, index: u16) -> Result<PartyId, ConfigError> {
        PartyId::new(index, self.parties).map_err(|e| ConfigError(e.to_string()))
    }

    /// Share modulus exponent for the modulus computation, `2k + 2t + 2`.
    pub fn product_share_bits(&self) -> u32 {
        2 * self.bits + 2 * self.depth() + 2
    }
}
