//! Dynamic sparsity neural networks: a reverse-mode autodiff engine, block
//! pruning, multi-configuration super-network training and block-sparse
//! inference kernels.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, NodeId};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use data::{SyntheticDataset, TaskKind, TaskSpec};
pub use model::{Architecture, Network};
pub use pruning::{BinaryMask, SparsityConfig, SparsityPlan};
pub use sparse::BlockCsrMatrix;
pub use tensor::Tensor;
pub use trainer::{SuperNetwork, TrainPlan, TrainerKind};
