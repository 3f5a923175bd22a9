pub mod authn;
pub mod geo;
pub mod ids;
pub mod mobility;
pub mod ring;
pub mod runner;
pub mod scenario;
pub mod scheduler;
pub mod sim;
