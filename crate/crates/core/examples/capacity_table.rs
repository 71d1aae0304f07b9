//! Tenants per storage budget under the default artifact sizes and under
//! a smaller adapter.

use adapter_distill::platform::capacity::format_table;
use adapter_distill::platform::{capacity_table, parse_spaces, StorageModel, DEFAULT_SPACES};

fn main() -> adapter_distill::Result<()> {
    let spaces = parse_spaces(DEFAULT_SPACES)?;
    let model = StorageModel::default();
    print!(
        "{}",
        format_table(&model, &capacity_table(&model, &spaces)?)
    );

    let slim = StorageModel {
        adapter_mb: 1.2,
        ..StorageModel::default()
    };
    println!();
    print!("{}", format_table(&slim, &capacity_table(&slim, &spaces)?));
    Ok(())
}
