pub mod csg;
pub mod fea;
pub mod geometry;
pub mod mma;
pub mod optimize;
pub mod output;
pub mod problem;
pub mod sensitivity;
pub mod sweep;
