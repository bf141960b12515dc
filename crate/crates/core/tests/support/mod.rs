pub mod criteria;
pub mod gen;
pub mod oracles;
