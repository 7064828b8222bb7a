//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::sync::Arc;
use std::thread;

use distrsa::numtheory::Natural;
use distrsa::ot::{run_mediator, OtEndpoint};
use distrsa::transport::{Address, MemoryNetwork, PartyId, Scheduling, TransportHandle};
use distrsa::ProtocolConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn nat(v: u64) -> Natural {
    Natural::from(v)
}

pub fn config(n: u16, k: u32, seed: &str) -> ProtocolConfig {
    ProtocolConfig::new(n, k, seed.as_bytes().to_vec()).expect("valid test configuration")
}

/// Runs `body` at every party of an in-memory network with a live OT
/// mediator and returns the results in party order.
pub fn run_parties<T, F>(n: u16, seed: u64, body: F) -> Vec<T>
where
    T: Send + 'static,
    F: Fn(&mut TransportHandle, &mut OtEndpoint, &mut ChaCha20Rng) -> T + Send + Sync + 'static,
{
    let net = MemoryNetwork::new(n, Scheduling::Free);
    let handles: Vec<_> = PartyId::all(n).map(|p| net.endpoint(p.into()).unwrap()).collect();
    let mediator = net.endpoint(Address::Mediator).unwrap();
    let mediator = thread::spawn(move || run_mediator(mediator));
    let body = Arc::new(body);
    let workers: Vec<_> = handles
        .into_iter()
        .map(|mut h| {
            let body = Arc::clone(&body);
            thread::spawn(move || {
                let mut ot = OtEndpoint::new(h.party());
                let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (u64::from(h.party().index()) << 48));
                body(&mut h, &mut ot, &mut rng)
            })
        })
        .collect();
    let out = workers.into_iter().map(|w| w.join().expect("party thread panicked")).collect();
    mediator.join().expect("mediator panicked").expect("mediator failed");
    out
}
