pub mod controllers;
pub mod error;
pub mod fdcheck;
pub mod forecasting;
pub mod harness;
pub mod market;
pub mod mpcc;
pub mod nlp;
pub mod objectives;
pub mod state;
