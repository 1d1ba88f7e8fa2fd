pub mod diffcore;
pub mod exec;
pub mod fbsde;
pub mod nn;
pub mod optim;
pub mod report;
pub mod solver;
pub mod stoch;
