pub mod filter_response;
pub mod gradcheck;
pub mod infer;
pub mod sample_bench;
pub mod train;
pub mod voxel_rule;

use fkaconv::{Error, Result};

/// Parse a comma-separated list with a field name for config errors.
pub fn parse_list<T: std::str::FromStr>(raw: &str, field: &str) -> Result<Vec<T>> {
    if raw.trim().is_empty() {
        return Err(Error::Config {
            field: field.into(),
            message: "empty list".into(),
        });
    }
    raw.split(',')
        .map(|s| {
            s.trim().parse::<T>().map_err(|_| Error::Config {
                field: field.into(),
                message: format!("bad entry `{s}`"),
            })
        })
        .collect()
}
