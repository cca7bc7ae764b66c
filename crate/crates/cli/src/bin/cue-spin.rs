//! Busy loop with a fixed amount of work, for CPU overhead measurements.
//!
//! `cue-spin [ITERATIONS]` runs a dependent multiply-add chain and exits 0.

use std::hint::black_box;

const DEFAULT_ITERATIONS: u64 = 200_000_000;

fn main() {
    let n = match std::env::args().nth(1) {
        None => DEFAULT_ITERATIONS,
        Some(arg) => match arg.parse() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("usage: cue-spin [ITERATIONS]");
                std::process::exit(2);
            }
        },
    };
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    for i in 0..black_box(n) {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(i);
    }
    black_box(x);
}
