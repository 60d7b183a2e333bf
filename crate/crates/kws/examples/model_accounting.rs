//! Size and compute accounting for the built-in model configurations:
//! parameter counts, multiply-accumulates under both conventions, and the
//! receptive field each SVDF stack reaches into the past.
//!
//!     cargo run --release --example model_accounting

use kws::topology::{
    builtin_config, count_macs, count_params, receptive_field, MacConvention,
    BUILTIN_CONFIG_NAMES,
};

fn main() {
    println!(
        "{:<16} {:>10} {:>14} {:>14} {:>10} {:>10}",
        "config", "params", "macs/infer", "macs/10ms", "rf steps", "rf ms"
    );
    for name in BUILTIN_CONFIG_NAMES {
        let config = builtin_config(name).expect("builtin");
        let params = count_params(&config).unwrap();
        let per_inference = count_macs(&config, MacConvention::PerInference).unwrap();
        let per_frame = count_macs(&config, MacConvention::Per10MsFrame).unwrap();
        let field = receptive_field(&config);
        println!(
            "{:<16} {:>10} {:>14} {:>14} {:>10} {:>10}",
            name, params, per_inference, per_frame, field.svdf_steps, field.svdf_ms
        );
    }
    println!();
    println!("The end-to-end models run one inference per 20 ms (stride 2),");
    println!("the baseline one per 30 ms (stride 3); the per-10ms column");
    println!("amortizes cost over the front-end frame rate.");
}
