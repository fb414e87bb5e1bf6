#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod dataio;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod params;
pub mod selection;
pub mod tensor;
pub mod training;
