//! Prints a named pipeline configuration as TOML. The committed files under
//! configs/ are generated with this, so they always parse back exactly.

use vqtts_core::config::PipelineConfig;

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "desk-demo".into());
    let cfg = match name.as_str() {
        "desk-demo" => PipelineConfig::desk_demo(),
        "reference" => PipelineConfig::reference(),
        other => {
            eprintln!("unknown preset {other}; expected desk-demo or reference");
            std::process::exit(1);
        }
    };
    print!("{}", toml::to_string_pretty(&cfg).unwrap());
}
