//! Synthetic 2-D distributions and tabular CSV ingestion.

pub mod csv_io;
pub mod synthetic;
pub mod tabular;

pub use csv_io::{parse_matrix, read_matrix, write_matrix, write_matrix_to, Table};
pub use synthetic::{generate_2d, manifest_path, write_2d, Dataset2DKind, Dataset2DSpec};
pub use tabular::{load_tabular, split_sizes, split_table, Normalization, TabularSource};
