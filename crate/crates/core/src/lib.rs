//! Formulaic alpha-factor mining: an RPN expression language over market
//! panels, a masked token MDP scored by a linear factor pool, reward shaping
//! against expert formulas, and a clipped policy-gradient learner.

pub mod centering;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod expr;
pub mod grid;
pub mod metrics;
pub mod par;
pub mod policy;
pub mod pool;
pub mod ppo;
pub mod runner;
pub mod shaping;
pub mod train;
pub mod vocab;
