//! Seeded random streams keyed by `(seed, env id, purpose)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. Separate purposes never share state, so adding
/// evaluation environments cannot perturb training trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    TrainHoles,
    EvalHoles,
    Policy,
    Sampling,
    Shuffle,
    ObservationNoise,
    Diagnostic,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::TrainHoles => 1,
            Purpose::EvalHoles => 2,
            Purpose::Policy => 3,
            Purpose::Sampling => 4,
            Purpose::Shuffle => 5,
            Purpose::ObservationNoise => 6,
            Purpose::Diagnostic => 7,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, env_id: u64, purpose: Purpose) -> Stream {
    let key = splitmix(splitmix(splitmix(seed) ^ env_id) ^ purpose.tag());
    ChaCha8Rng::seed_from_u64(key)
}
