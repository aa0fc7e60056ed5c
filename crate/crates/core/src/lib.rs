//! Reward sharing schemes for stake pools: the stake-pools game, its
//! equilibria, Sybil-resistance bounds and best-response dynamics.

pub mod cli;
pub mod deviation;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod game;
pub mod io;
pub mod rewards;
pub mod strategy;
pub mod sybil;

pub use error::{Result, RssError};
