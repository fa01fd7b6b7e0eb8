//! Depth completion with local implicit depth functions.

/// Implements `Display` and `FromStr` for a fieldless enum from a fixed
/// variant/text table; parse failures are configuration errors.
macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::Error;

            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err($crate::Error::Config(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

pub mod baseline;
pub mod camera;
pub mod checks;
pub mod config;
pub mod encoders;
pub mod error;
pub mod geom;
pub mod image;
pub mod io;
pub mod lidf;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod refine;
pub mod synth;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
