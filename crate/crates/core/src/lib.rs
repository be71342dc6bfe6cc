pub mod analysis;
pub mod ctrlmath;
pub mod error;
pub mod icore;
pub mod ident;
pub mod io;
pub mod kdtree;
pub mod plant;
pub mod sim;

pub use error::{Error, ErrorKind, Result};
