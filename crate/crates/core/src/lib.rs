pub mod augment;
pub mod dqn;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod representation;
pub mod sac;

#[cfg(test)]
mod testutil;
