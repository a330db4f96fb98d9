//! The three augmentation regimes and shift-simulated validation pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specmatch::augment::{self, NoiseAugConfig, ShiftSimConfig};
use specmatch::spectra_io::ResampledSpectrum;

fn peak(center: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| (-0.5 * ((i as f64 - center) / 3.0).powi(2)).exp() + 0.01 * (i as f64 * 1.7).sin())
        .collect()
}

fn main() -> specmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = NoiseAugConfig::default();
    let s = ResampledSpectrum::from_parts(peak(32.0, 64), "a", "a0");

    // local noise scale: large on the peak flanks, small on the flat parts
    let var = augment::noise_variance(s.intensities(), cfg.window, cfg.kappa);
    println!("noise variance at 5: {:.2e}, at 29: {:.2e}", var[5], var[29]);

    // a class with one spectrum is grown with noisy copies
    let grown = augment::augment_class(std::slice::from_ref(&s), 5, &cfg, &mut rng)?;
    println!(
        "single spectrum grown to {}: {:?}",
        grown.len(),
        grown.iter().map(|g| g.source_id()).collect::<Vec<_>>()
    );

    // a small class is grown with convex combinations
    let class = vec![s.clone(), ResampledSpectrum::from_parts(peak(33.0, 64), "a", "a1")];
    let grown = augment::augment_class(&class, 6, &cfg, &mut rng)?;
    println!("two spectra grown to {}: {}", grown.len(), grown[5].source_id());

    // flat spectra and linear ramps pass through untouched
    let ramp = ResampledSpectrum::from_parts((0..64).map(|i| i as f64 * 0.25).collect(), "r", "ramp");
    let out = augment::noise_augment(&ramp, &cfg, &mut rng)?;
    println!("ramp unchanged: {}", out.intensities() == ramp.intensities());

    let pairs = augment::simulate_validation_pairs(&class, 2.0, &ShiftSimConfig::default(), &cfg, 6, &mut rng)?;
    for (label, shift) in pairs.labels.iter().zip(&pairs.shifts) {
        println!("pair label {label} shifted by {shift:+.1} cm-1");
    }
    Ok(())
}
