//! Identifier newtypes shared across the simulator.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Logical simulation time.
pub type Tick = u64;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident($inner:ty), $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// A physical CPU core, either a hypervisor core or a model core.
    CoreId(u32),
    "core"
);
id_newtype!(
    /// A physical memory region.
    RegionId(u32),
    "region"
);
id_newtype!(
    /// A loaded model (one per deployment).
    ModelId(u32),
    "model"
);
id_newtype!(
    /// Administrator ballot.
    BallotId(u64),
    "ballot"
);

/// Opaque, unforgeable port capability token.
///
/// Tokens are drawn from the deployment's seeded RNG by the broker; guest
/// code never sees them and refers to ports only through capability slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortId(#[serde(with = "hex_u64")] pub u64);

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "port:{:016x}", self.0)
    }
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}
