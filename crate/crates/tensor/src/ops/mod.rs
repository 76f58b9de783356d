mod elementwise;
pub(crate) mod linalg;
pub(crate) mod nn;
mod reduce;
mod shape;
