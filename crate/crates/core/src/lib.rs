//! Multifactor login built from cued click-point image passwords and a
//! single-use grid key.
//!
//! A user registers three images, one per level, each with a labeling order
//! for its 3×3 grid. At login the server sends a three-digit key out of band
//! and shows, per level, the user's image among three decoys. The user clicks
//! the cell whose label matches that level's digit. Success is only reported
//! after all three clicks.
//!
//! - [`grid`]: labelings, click mapping and password space.
//! - [`otp`]: key generation, single-use enforcement and delivery transports.
//! - [`vault`]: encrypted image storage and the decoy pool.
//! - [`auth`]: user registry and the registration/login state machines.
//! - [`analysis`]: attacker models driven through the real login path.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod analysis;
pub mod auth;
pub mod grid;
pub mod otp;
pub mod vault;

pub use auth::{AuthConfig, AuthService, ClickEvent, ClickOutcome, LoginOutcome};
pub use grid::{expected_cell, map_click, password_space, GridCell, GridLabel, LabelingStatus, SpaceParams};
pub use otp::{OtpDigits, OtpGateway, OtpStore};
pub use vault::{ContentType, MasterKey, Owner, Vault};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            /// A fresh random identifier.
            pub fn random() -> Self {
                $name(uuid::Uuid::new_v4().simple().to_string())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Identifies one login session.
    SessionId
);
string_id!(
    /// Identifies one sealed image in the vault.
    ImageId
);
string_id!(
    /// Identifies one registered user.
    UserId
);
