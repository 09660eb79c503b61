pub mod bundle;
pub mod config;
pub mod consensus;
pub mod error;
pub mod evalkit;
pub mod hsi;
pub mod io;
pub mod multiscale;
pub mod penalty;
pub mod seed;
pub mod solver;
