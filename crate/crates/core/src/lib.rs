//! Optimality verification for neural optimization proxies.
//!
//! The crate builds mixed-integer models whose optimum is the worst-case
//! optimality gap of a ReLU proxy over an input domain, solves them with a
//! self-contained branch-and-bound engine, and searches for strong
//! adversarial inputs with a projected gradient attack guided by dual cuts.

pub mod attack;
pub mod dcopf;
pub mod encodings;
pub mod error;
pub mod knapsack;
pub mod lp;
pub mod milp;
pub mod neural;
pub mod verify;

pub use error::{Error, Result};
