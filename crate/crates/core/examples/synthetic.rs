//! Prints a synthetic labelled split as TSV.
//!
//! `cargo run -p deim --example synthetic -- snli 64 7 > tiny_snli.tsv`

use deim::data::{synthetic_pairs, to_tsv};
use deim::Task;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let task: Task = args.first().map_or("snli", String::as_str).parse().unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(1)
    });
    let n = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    print!("{}", to_tsv(task, &synthetic_pairs(task, n, seed)));
}
