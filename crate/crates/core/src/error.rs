use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("state lies on the collision locus (1 - xi0 = {0:e})")]
    CollisionLocus(f64),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("position collides with a primary (distance {0:e})")]
    CollisionInput(f64),
    #[error("state collides with the non-regularized primary (distance {0:e})")]
    OtherPrimaryCollision(f64),
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("level-set sampling failed: {0}")]
    SamplingFailure(String),
    #[error("region tag does not match the state: {0}")]
    RegionMismatch(String),
    #[error("integrator step size underflow at t = {0}")]
    StepFailure(f64),
    #[error("time budget {0} exceeded")]
    TimeBudgetExceeded(f64),
    #[error("start state lies on the binding (|theta| = {0:e})")]
    OnBinding(f64),
    #[error("no return to the page before t = {0}")]
    NoReturn(f64),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("Kepler energy must be negative, got {0}")]
    NonNegativeEnergy(f64),
    #[error("c - L = {0} is not negative")]
    EnergyDomain(f64),
    #[error("energy c = {0} is above the critical value -3/2")]
    SupercriticalEnergy(f64),
    #[error("invariant circle leaves the page: {0}")]
    OutsidePage(String),
    #[error("state is off the binding (|xi3|+|eta3| = {0:e})")]
    OffBinding(f64),
    #[error("configuration error: {0}")]
    ConfigError(String),
}

pub type Result<T> = std::result::Result<T, Error>;
