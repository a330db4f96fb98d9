//! Checkpoints are bit-exact: write, read back, and compare scores.

use specmatch::ndcore::{read_checkpoint, write_checkpoint, Checkpoint, Tensor};
use specmatch::network::{self, ArchitectureConfig};
use specmatch::trainer::Ensemble;

fn main() -> specmatch::Result<()> {
    let arch = ArchitectureConfig {
        conv_block_channels: [4, 6],
        xception_channels: [8, 10],
        separable_convs_per_block: 1,
        input_length: 64,
        ..Default::default()
    };
    let mut params = network::init_params(&arch, 11)?;
    // untrained statistics: treat the initial mean 0 / variance 1 as observed
    let names: Vec<String> = params.running_iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        params.running_mut(&n)?.updates = 1;
    }
    let ckpt = Checkpoint {
        params: params.clone(),
        arch_hash: arch.hash(),
    };
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ckpt)?;
    let back = read_checkpoint(&mut bytes.as_slice())?;
    println!(
        "{} bytes, arch {}, equal after read: {}",
        bytes.len(),
        &arch.hash_hex()[..12],
        back == ckpt
    );

    let mut again = Vec::new();
    write_checkpoint(&mut again, &back)?;
    println!("rewrite is byte-identical: {}", again == bytes);

    let rows_a: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..64).map(|j| ((i * 64 + j) as f64 * 0.1).sin()).collect())
        .collect();
    let rows_b: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..64).map(|j| ((i * 64 + j) as f64 * 0.3).cos()).collect())
        .collect();
    let a = Tensor::from_rows(rows_a.iter().map(Vec::as_slice))?;
    let b = Tensor::from_rows(rows_b.iter().map(Vec::as_slice))?;
    let before = Ensemble::new(arch.clone(), vec![params])?.predict_pairs(&a, &b)?;
    let after = Ensemble::new(arch, vec![back.params])?.predict_pairs(&a, &b)?;
    println!("scores {before:?}\nreloaded scores identical: {}", before == after);
    Ok(())
}
