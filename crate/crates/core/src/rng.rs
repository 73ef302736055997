//! Seeded random streams and their exact capture for checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

/// Independent named streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Params = 1,
    Action = 2,
    Noise = 3,
    Replay = 4,
    Env = 5,
    Eval = 6,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Position of a ChaCha stream, enough to resume it bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("bad rng seed encoding: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 =
            self.word_pos.parse().map_err(|e| Error::Checkpoint(format!("bad rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}
