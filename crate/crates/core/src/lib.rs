pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod hdp;
pub mod io;
pub mod ibp;
pub mod linalg;
pub mod moments;
pub mod pipelines;
pub mod spectral;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
pub use moments::{Document, HdpTree, NodeSpec, SampleSet};
pub use tensor::{contract, symmetrize, DenseTensor, Mode};
