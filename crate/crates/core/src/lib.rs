pub mod autodiff;
pub mod data;
pub mod model;
pub mod eval;
pub mod metawrapper;
pub mod oracle;
pub mod config;
pub mod cli;
