pub mod agent;
pub mod allocation;
pub mod env;
pub mod estimation;
pub mod fatigue;
pub mod harness;
pub mod neural;
pub mod scenario;
