pub mod env;
pub mod net;
pub mod nn;
pub mod perception;
pub mod primitives;
pub mod sdqn;
pub mod sim;
