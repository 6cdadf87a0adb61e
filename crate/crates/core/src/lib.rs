pub mod aggregation;
pub mod cli;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod peft;
pub mod recipes;
pub mod rng;
pub mod selfcheck;
pub mod vocab;
