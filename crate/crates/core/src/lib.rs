//! SIS epidemics in a population of households.
//!
//! Each household of size `n` carries `x` infected individuals. Infections
//! happen locally at rate `lambda_l x (n - x) / n`, globally at rate
//! `lambda_g (n - x) m / pi_bar` where `m` is the mean number of infected per
//! household across the population, and recoveries at rate `gamma x`.

pub mod chaos;
pub mod cli;
pub mod config;
pub mod equilibrium;
pub mod fenwick;
pub mod fixedpoint;
pub mod fp;
pub mod model;
pub mod rng;
pub mod sim;
pub mod stats;
