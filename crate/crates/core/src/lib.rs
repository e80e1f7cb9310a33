pub mod estimators;
pub mod harness;
pub mod meas;
pub mod netmodel;
pub mod scenario;
pub mod solvers;
