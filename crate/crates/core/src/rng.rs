//! Seed derivation. Every random stream is a pure function of
//! `(seed, purpose, id)`, so no two clients or subsystems share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Data,
    Centers,
    Partition,
    Init,
    Protocol,
}

impl Purpose {
    fn salt(self) -> u64 {
        match self {
            Purpose::Data => 0x6461_7461_0000_0001,
            Purpose::Centers => 0x6365_6e74_0000_0002,
            Purpose::Partition => 0x7061_7274_0000_0003,
            Purpose::Init => 0x696e_6974_0000_0004,
            Purpose::Protocol => 0x7072_6f74_0000_0005,
        }
    }
}

pub fn stream(seed: u64, purpose: Purpose, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.salt());
    rng.set_stream(id);
    rng
}
