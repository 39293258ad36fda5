//! Allocation of shared resources among agents whose preferences are Markov
//! decision processes.

pub mod auction;
pub mod benchgen;
pub mod distributed;
pub mod fixtures;
pub mod lp;
pub mod mdp;
pub mod milp;
pub mod privacy;
pub mod resource;
