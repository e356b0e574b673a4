pub mod bench;
pub mod decode;
pub mod train;
pub mod verify;

/// Environment variable that overrides the default seed.
pub const SEED_ENV: &str = "TNL_SEED";
