//! Datasets, synthetic generators, CSV I/O and client partitioning.

mod csv_io;
mod dataset;
mod partition;
mod synthetic;

pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use dataset::{minibatches, split_auxiliary, AuxSplit, Dataset, DEFAULT_DISTILL_FRACTION};
pub use partition::{
    apportion, dirichlet_partition, sample_symmetric_dirichlet, standardize, PartitionPlan, STANDARDIZATION_ITERATIONS,
};
pub use synthetic::{circle_centers, generate_synthetic, random_centers, SyntheticSpec};
