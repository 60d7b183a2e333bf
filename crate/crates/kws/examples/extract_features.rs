//! Log-mel feature extraction: frame a WAV file (or a generated test tone)
//! into 40-dimensional log-mel vectors, one per 10 ms.
//!
//!     cargo run --release --example extract_features [-- path/to.wav]

use kws::frontend::{stream_frames, MelConfig};
use kws::wav;

fn main() {
    let config = MelConfig::default();
    let pcm = match std::env::args().nth(1) {
        Some(path) => {
            let (samples, rate) = wav::read_wav(std::path::Path::new(&path)).expect("read wav");
            assert_eq!(rate, 16_000, "the front-end is fixed at 16 kHz");
            println!("loaded {} samples from {path}", samples.len());
            samples
        }
        None => {
            // Half a second of a 1 kHz tone at -12 dBFS.
            println!("no wav given; generating 500 ms of a 1 kHz tone");
            (0..8000)
                .map(|i| 0.25 * (std::f32::consts::TAU * 1000.0 * i as f32 / 16000.0).sin())
                .collect()
        }
    };

    let frames = stream_frames(&pcm, &config).expect("feature extraction");
    println!("{} frames ({} ms hop, {} ms window)", frames.len(), config.hop_ms, config.window_ms);

    for frame in frames.iter().take(3) {
        let peak = frame
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        println!(
            "t={:>4} ms  e[0..4] = {:>6.2} {:>6.2} {:>6.2} {:>6.2}  peak bin {} ({:.2})",
            frame.timestamp_ms, frame.values[0], frame.values[1], frame.values[2], frame.values[3],
            peak.0, peak.1
        );
    }
}
