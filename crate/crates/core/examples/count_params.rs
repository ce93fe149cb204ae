//! Itemized parameter counts for the three presets, hierarchical model vs
//! the flat-fusion baseline.

use hctmg::cli::count_params;
use hctmg::model::HctConfig;

fn main() -> hctmg::Result<()> {
    for (name, config) in [("mosi", HctConfig::mosi()), ("mosei", HctConfig::mosei()), ("iemocap", HctConfig::iemocap())] {
        let counts = count_params(&config, true)?;
        println!("== {name} ==\n{counts}\n");
    }
    Ok(())
}
