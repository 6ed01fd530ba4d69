//! Contract games between several principals and several agents over a
//! non-rivalrous good.
//!
//! Agents pick efforts in a dominant-strategy second stage ([`stage2`]);
//! principals then compete over linear contracts `c + a * f` in a
//! generalized Nash game ([`equilibria`]). [`datamarket`] instantiates the
//! model for crowd-sourced mean estimation with leave-one-out payments.

pub mod datamarket;
pub mod equilibria;
mod error;
pub mod market;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod stage2;

pub use error::{Error, Result};
pub use market::{ContractParams, EffortProfile, MarketModel, Matrix};
