//! Builds every network at full published width and pushes one random
//! utterance through each, printing the tensor widths seen along the way.

use signx::pipeline::full_scale_shapes;
use signx::posespace::codebook::RESERVED;

fn main() -> signx::error::Result<()> {
    let report = full_scale_shapes(16, 100 + RESERVED, 1)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
