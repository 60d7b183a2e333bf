//! Generate a small seeded synthetic dataset: keyword utterances built from
//! per-component tone patterns with exact alignments, plus noise/distractor
//! negatives, written as WAV files and a JSONL manifest.
//!
//!     cargo run --release --example synthesize_dataset

use kws::evaluation::synth::{generate_dataset, SynthConfig};
use kws::labeling::KeywordSpec;

fn main() {
    let spec = KeywordSpec::ok_google();
    let cfg = SynthConfig { seed: 42, ..SynthConfig::default() };
    let dir = std::env::temp_dir().join("kws_synth_demo");

    let out = generate_dataset(&dir, &spec, &cfg, 8, 8).expect("generate");
    println!("manifest: {}", out.manifest_path.display());
    println!(
        "{} positives, {} negatives, {:.1} s negative audio",
        out.positives,
        out.negatives,
        out.negative_ms as f64 / 1000.0
    );

    let manifest = kws::labeling::load_manifest(&out.manifest_path).expect("load");
    let first = manifest.iter().find(|u| u.is_keyword).unwrap();
    println!("\nalignment of {} ({} frames):", first.id, first.frame_count);
    for seg in &first.segments {
        println!(
            "  {:<10} frames {:>3}..{:<3} ({}..{} ms)",
            seg.label,
            seg.start_frame,
            seg.end_frame,
            seg.start_frame * 10,
            seg.end_frame * 10
        );
    }
}
