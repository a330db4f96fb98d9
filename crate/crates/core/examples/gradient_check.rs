//! Central finite differences against reverse-mode gradients for every
//! parameter of a small Siamese network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use specmatch::ndcore::Tensor;
use specmatch::network::{self, ArchitectureConfig};
use specmatch::trainer;

fn main() -> specmatch::Result<()> {
    let arch = ArchitectureConfig {
        conv_block_channels: [4, 6],
        conv_kernel: 5,
        xception_channels: [8, 10],
        depthwise_kernel: 3,
        separable_convs_per_block: 2,
        input_length: 64,
        ..Default::default()
    };
    let mut params = network::init_params(&arch, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch = || {
        Tensor::new(
            vec![4, 1, 64],
            (0..256).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
    };
    let (a, b) = (batch()?, batch()?);
    let labels = [1.0, 0.0, 0.0, 1.0];
    let loss = |p: &_| trainer::pair_loss_and_gradients(p, &arch, &a, &b, &labels, 1e-3, 7);
    let (_, grads) = loss(&params)?;

    let h = 1e-6;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let mut worst = 0.0f64;
        for i in 0..params.get(&name)?.value.len() {
            let orig = params.get(&name)?.value.data()[i];
            params.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let up = loss(&params)?.0;
            params.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let down = loss(&params)?.0;
            params.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[&name].data()[i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
        println!("{name:<28} worst relative error {worst:.1e}");
    }
    Ok(())
}
