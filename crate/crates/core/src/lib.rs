pub mod bus;
pub mod control;
pub mod geomag;
pub mod geometry;
pub mod harness;
pub mod perception;
pub mod plant;
pub mod tactile;
