//! Keyed, reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream whose 256-bit key is the tuple
//! `(master_seed, replication, purpose)`. Distinct tuples give distinct keys,
//! identical tuples replay identical draws on every platform, and no stream
//! ever advances another, so adding a consumer cannot perturb existing ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

const KEY_DOMAIN: u64 = 0x6a75_6d70_6772_6164; // "jumpgrad"

/// Identifies one independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub replication: u64,
    pub purpose: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, replication: u64, purpose: u64) -> Self {
        Self {
            master_seed,
            replication,
            purpose,
        }
    }
}

/// What a stream is used for. The tag is folded into the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Uniform draw of the randomized time.
    Tau,
    /// Mark selection for the randomized jump integral.
    JumpMark,
    /// Noise driving a simulated path. `role` separates the base path from
    /// the auxiliary paths started at the randomized time.
    Path { role: PathRole, kind: NoiseKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathRole {
    Base,
    /// Path started at `(tau, X(tau))` for the Z/H functional.
    Derivative,
    /// Path started at a post-jump point; indexed by mark atom or draw.
    Shifted(u32),
    /// Free-form role for tests and oracles.
    Custom(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Brownian,
    JumpCount,
    Mark,
    Compensator,
}

impl Purpose {
    pub fn tag(self) -> u64 {
        match self {
            Purpose::Tau => 1,
            Purpose::JumpMark => 2,
            Purpose::Path { role, kind } => {
                let role_bits: u64 = match role {
                    PathRole::Base => 1,
                    PathRole::Derivative => 2,
                    PathRole::Shifted(j) => (3u64 << 32) | j as u64,
                    PathRole::Custom(j) => (4u64 << 32) | j as u64,
                };
                let kind_bits: u64 = match kind {
                    NoiseKind::Brownian => 1,
                    NoiseKind::JumpCount => 2,
                    NoiseKind::Mark => 3,
                    NoiseKind::Compensator => 4,
                };
                (role_bits << 8) | (kind_bits << 4) | 0x3
            }
        }
    }
}

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: StreamKey,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(key: StreamKey) -> Self {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&key.master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&key.replication.to_le_bytes());
        seed[16..24].copy_from_slice(&key.purpose.to_le_bytes());
        seed[24..32].copy_from_slice(&KEY_DOMAIN.to_le_bytes());
        Self {
            key,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn for_purpose(master_seed: u64, replication: u64, purpose: Purpose) -> Self {
        Self::new(StreamKey::new(master_seed, replication, purpose.tag()))
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Poisson count with the given mean; zero mean gives zero without
    /// consuming randomness.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        // Poisson::new only fails for non-positive or non-finite means.
        let dist = Poisson::new(mean).expect("finite positive poisson mean");
        let k: f64 = dist.sample(&mut self.rng);
        k as u64
    }

    pub fn index(&mut self, len: usize) -> usize {
        self.rng.random_range(0..len)
    }

    /// Access to the underlying generator for user mark samplers.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// The streams driving one simulated path.
#[derive(Debug, Clone)]
pub struct PathNoise {
    pub brownian: RngStream,
    pub jumps: RngStream,
    pub marks: RngStream,
    pub compensator: RngStream,
}

impl PathNoise {
    pub fn new(master_seed: u64, replication: u64, role: PathRole) -> Self {
        let stream = |kind| RngStream::for_purpose(master_seed, replication, Purpose::Path { role, kind });
        Self {
            brownian: stream(NoiseKind::Brownian),
            jumps: stream(NoiseKind::JumpCount),
            marks: stream(NoiseKind::Mark),
            compensator: stream(NoiseKind::Compensator),
        }
    }
}
