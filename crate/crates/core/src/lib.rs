pub mod basis;
pub mod cli;
pub mod estimators;
pub mod exact_sum;
pub mod inference;
pub mod likelihood;
pub mod mle;
pub mod model;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod sieve;
pub mod simulate;

#[cfg(test)]
pub(crate) mod oracle;
