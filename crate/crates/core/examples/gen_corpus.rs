//! Regenerate the bundled toy corpus: `gen_corpus [lines] [len] [seed]`.

use ulab_core::lab::synthetic_corpus;

fn main() {
    let mut args = std::env::args().skip(1);
    let lines: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(320);
    let len: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(62);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(7);
    for line in synthetic_corpus(lines, len, seed) {
        println!("{line}");
    }
}
