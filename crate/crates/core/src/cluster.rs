//! Runs every party and the OT mediator inside one process, over either
//! transport backend. Used by the CLI and by tests.

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::config::ProtocolConfig;
use crate::numtheory::Natural;
use crate::ot::{run_mediator, MediatorStats};
use crate::protocol::{reconstruct_for_test, run_party, ProtocolError, RunOptions, RunOutcome, Verification};
use crate::shares::{RandomShares, ShareSource};
use crate::transport::{Address, MemoryNetwork, PartyId, Scheduling, SocketEndpoint, TranscriptEntry, TransportHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Memory,
    /// Loopback TCP mesh.
    Socket,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClusterOptions {
    pub backend: Backend,
    /// In-memory only: single logical clock and a recorded transcript.
    pub deterministic: bool,
    /// Reconstruct and check the factors after the run.
    pub verify: bool,
}

#[derive(Debug)]
pub struct ClusterRun {
    /// One per party, in party order.
    pub outcomes: Vec<RunOutcome>,
    /// Present for deterministic in-memory runs.
    pub transcript: Option<Vec<TranscriptEntry>>,
    pub mediator: MediatorStats,
    pub verification: Option<Verification>,
}

impl ClusterRun {
    /// The agreed modulus.
    pub fn modulus(&self) -> &Natural {
        &self.outcomes[0].modulus
    }

    pub fn attempts(&self) -> u64 {
        self.outcomes[0].attempts
    }
}

/// Deterministic per-party RNG derived from the public seed. Only suitable
/// for simulation: anyone knowing the seed can recompute every share.
pub fn party_rng(config: &ProtocolConfig, party: PartyId, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"distrsa/");
    h.update(label.as_bytes());
    h.update(b"/");
    h.update(&config.seed);
    h.update(party.index().to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Fresh random shares drawn from [`party_rng`].
pub fn seeded_share_sources(config: &ProtocolConfig) -> Vec<Box<dyn ShareSource>> {
    config.party_ids().map(|p| Box::new(RandomShares::new(party_rng(config, p, "shares"))) as Box<dyn ShareSource>).collect()
}

/// Runs the protocol at all parties with seed-derived shares.
pub fn run_cluster(config: &ProtocolConfig, options: ClusterOptions) -> Result<ClusterRun, ProtocolError> {
    run_cluster_with(config, options, seeded_share_sources(config))
}

/// Runs the protocol with caller-supplied share sources, one per party.
pub fn run_cluster_with(
    config: &ProtocolConfig,
    options: ClusterOptions,
    sources: Vec<Box<dyn ShareSource>>,
) -> Result<ClusterRun, ProtocolError> {
    config.validate()?;
    if sources.len() != usize::from(config.parties()) {
        return Err(ProtocolError::Parameter(format!("{} share sources for {} parties", sources.len(), config.parties())));
    }
    let (handles, mediator, network) = match options.backend {
        Backend::Memory => {
            let scheduling = if options.deterministic { Scheduling::Deterministic } else { Scheduling::Free };
            let net = MemoryNetwork::new(config.parties(), scheduling);
            let handles = config.party_ids().map(|p| net.endpoint(p.into())).collect::<Result<Vec<_>, _>>()?;
            let mediator = net.endpoint(Address::Mediator)?;
            (handles, mediator, Some(net))
        }
        Backend::Socket => {
            let (handles, mediator) = SocketEndpoint::local_cluster(config.parties())?;
            (handles, mediator, None)
        }
    };
    let run_options = RunOptions { test_mode: options.verify };

    let mediator = thread::Builder::new()
        .name("ot-mediator".into())
        .spawn(move || run_mediator(mediator))
        .map_err(|e| ProtocolError::Parameter(format!("cannot spawn mediator: {e}")))?;
    let mut workers = Vec::new();
    for (handle, source) in handles.into_iter().zip(sources) {
        let config = config.clone();
        let network = network.clone();
        let name = format!("party-{}", handle.party().index());
        let worker = thread::Builder::new().name(name).spawn(move || party_main(config, handle, source, run_options, network));
        workers.push(worker.map_err(|e| ProtocolError::Parameter(format!("cannot spawn party: {e}")))?);
    }

    let results: Vec<Result<RunOutcome, ProtocolError>> =
        workers.into_iter().map(|w| w.join().unwrap_or_else(|_| Err(ProtocolError::Desync("party thread panicked".into())))).collect();
    let mediator_result = mediator.join().unwrap_or_else(|_| Err(crate::ot::OtError::Parameter("mediator panicked".into())));

    // Report the root cause rather than the shutdown it triggered.
    let mut outcomes = Vec::with_capacity(results.len());
    let mut first_error = None;
    for result in results {
        match result {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => {
                let secondary = matches!(e, ProtocolError::Transport(crate::transport::TransportError::ChannelClosed));
                if first_error.is_none() || (!secondary && is_secondary(first_error.as_ref())) {
                    first_error = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let mediator_stats = mediator_result?;
    let modulus = outcomes[0].modulus.clone();
    if outcomes.iter().any(|o| o.modulus != modulus) {
        return Err(ProtocolError::Desync("parties disagree on the modulus".into()));
    }

    let verification = if options.verify {
        let (p, q) = reconstruct_for_test(&outcomes)?;
        let mut rng = party_rng(config, PartyId::all(config.parties()).next().expect("at least two parties"), "verify");
        let v = Verification::check(p, q, &modulus, &mut rng);
        for o in &mut outcomes {
            o.verified = Some(v.ok());
        }
        Some(v)
    } else {
        None
    };
    let transcript = network.filter(|n| n.scheduling() == Scheduling::Deterministic).map(|n| n.transcript());
    Ok(ClusterRun { outcomes, transcript, mediator: mediator_stats, verification })
}

fn is_secondary(e: Option<&ProtocolError>) -> bool {
    matches!(e, Some(ProtocolError::Transport(crate::transport::TransportError::ChannelClosed)))
}

fn party_main(
    config: ProtocolConfig,
    mut handle: TransportHandle,
    mut source: Box<dyn ShareSource>,
    options: RunOptions,
    network: Option<MemoryNetwork>,
) -> Result<RunOutcome, ProtocolError> {
    // Unblock everyone else on failure or panic instead of letting them time out.
    let mut guard = CloseOnFailure { network, armed: true };
    let mut rng = party_rng(&config, handle.party(), "protocol");
    let result = run_party(&config, &mut handle, source.as_mut(), &mut rng, options);
    guard.armed = result.is_err();
    result
}

struct CloseOnFailure {
    network: Option<MemoryNetwork>,
    armed: bool,
}

impl Drop for CloseOnFailure {
    fn drop(&mut self) {
        if self.armed {
            if let Some(net) = &self.network {
                net.close();
            }
        }
    }
}
