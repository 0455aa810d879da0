pub mod eval;
pub mod gen;
pub mod scan;
