//! Prints the built-in default configuration as pretty JSON.
//!
//! Regenerate the repo's example file after changing any default:
//! `cargo run -p depth-adapt --example dump_config > config.example.json`

fn main() {
    let cfg = depth_adapt::config::RunConfig::default();
    println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
}
