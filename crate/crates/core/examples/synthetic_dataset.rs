//! Generate a synthetic Gaussian-peak dataset, write it as CSV and compare
//! the three 1NN baselines on one leave-one-out split.
//!
//!     cargo run --example synthetic_dataset -- out.csv

use specmatch::harness::{self, SyntheticDatasetSpec};
use specmatch::matcher::{self, Metric, ReferenceLibrary};
use specmatch::spectra_io::{self, Format, Grid, Preprocessing};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic.csv".into());
    let spec = SyntheticDatasetSpec {
        baseline_amplitude: 1.0,
        ..Default::default()
    };
    let data = harness::generate_synthetic(&spec)?;
    let file = std::fs::File::create(&out)?;
    spectra_io::write_spectra(file, Format::Csv, &data)?;
    println!("wrote {} spectra ({} classes) to {out}", data.len(), spec.n_classes);

    for (c, peaks) in harness::class_templates(&spec)?.iter().enumerate().take(3) {
        let positions: Vec<String> = peaks.iter().map(|p| format!("{:.0}", p.position)).collect();
        println!("class_{c:02} peaks at {}", positions.join(", "));
    }

    let split = spectra_io::make_test_split(&data, 0);
    let prep = Preprocessing {
        grid: Grid::new(spec.grid_min, spec.grid_max, 256)?,
        normalize: true,
    };
    let lib = ReferenceLibrary::from_spectra(prep.apply_all(&split.train)?)?;
    let test = prep.apply_all(&split.test)?;
    for metric in Metric::ALL {
        let report = matcher::baseline_accuracy(&test, &lib, metric)?;
        println!("1NN {:<9} accuracy {:.2}", metric.name(), report.accuracy);
    }
    Ok(())
}
