pub mod error;
pub mod linalg;
pub mod system;
pub mod oracle;
pub mod format;
pub mod dual;
pub mod perturbation;
pub mod planner;
pub mod tracking;
pub mod experiment;
