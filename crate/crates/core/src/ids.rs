use serde::{Deserialize, Serialize};
use std::fmt;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $inner:ty) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<$inner> for $name {
            fn from(v: $inner) -> Self {
                Self(v)
            }
        }
    };
}

id_type!(
    /// Identifier of a virtual stop within a zone.
    StopId,
    u32
);
id_type!(
    /// Identifier of a trip request.
    RequestId,
    u64
);
id_type!(
    /// Identifier of a rider account; one user may hold several requests.
    UserId,
    u64
);
id_type!(
    /// Index of a shuttle within the fleet.
    ShuttleId,
    u32
);
