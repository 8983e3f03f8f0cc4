#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nettop::model::{random_module, random_noise_model, NetworkSystem, RationalTransfer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Three nodes with random noise colouring and the single random module
/// `source -> target`.
pub fn planted_edge(source: usize, target: usize, seed: u64) -> NetworkSystem {
    let mut r = rng(seed);
    let noise = (0..3)
        .map(|_| {
            let order = r.random_range(1..=3);
            random_noise_model(&mut r, order)
        })
        .collect();
    let mut sys = NetworkSystem::new(noise, vec![1.0; 3]).expect("system");
    let order = r.random_range(2..=4);
    sys.set_module(target, source, random_module(&mut r, order)).expect("module");
    sys
}

/// White-noise nodes with one strong first-order module `0 -> 1`.
pub fn strong_chain(nodes: usize) -> NetworkSystem {
    let mut sys = NetworkSystem::white(nodes).expect("system");
    let g = RationalTransfer::new(vec![0.0, 1.0], vec![1.0, -0.5]).expect("module");
    sys.set_module(1, 0, g).expect("module");
    sys
}
