//! Distributed generation of an RSA modulus `N = p * q` whose prime factors
//! stay additively shared among `n` parties.
//!
//! The [`protocol`] module drives the full loop; the remaining modules are
//! the building blocks it composes and are usable on their own.

pub mod biprime;
pub mod cluster;
pub mod config;
pub mod distmul;
pub mod metrics;
pub mod numtheory;
pub mod ot;
pub mod protocol;
pub mod shares;
pub mod transport;
pub mod trialdiv;

pub use config::{ConfigError, HashFunction, ProtocolConfig, TrialDivisionMode};
pub use numtheory::Natural;
pub use protocol::{run_party, ProtocolError, RunOutcome};
pub use transport::{Address, PartyId, Phase, TransportError, TransportHandle};
