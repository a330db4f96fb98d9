//! Split-conformal prediction sets from match scores: calibrate on one set
//! of results, then measure coverage and set size on another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specmatch::conformal::{self, ConformalCalibrator};
use specmatch::harness;
use specmatch::matcher::MatchResult;

const LABELS: [&str; 6] = ["calcite", "dolomite", "gypsum", "halite", "quartz", "rutile"];

/// Scores where the true class tends to score highest.
fn simulated(rng: &mut ChaCha8Rng, n: usize) -> Vec<(MatchResult, String)> {
    (0..n)
        .map(|i| {
            let truth = rng.random_range(0..LABELS.len());
            let scores = (0..LABELS.len())
                .map(|c| {
                    if c == truth {
                        rng.random::<f64>().powf(0.3)
                    } else {
                        0.9 * rng.random::<f64>()
                    }
                })
                .collect();
            (
                MatchResult::from_scores(format!("q{i}"), &LABELS, scores).unwrap(),
                LABELS[truth].to_string(),
            )
        })
        .collect()
}

fn main() -> specmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cal = simulated(&mut rng, 500);
    let test = simulated(&mut rng, 500);

    let calibrator: ConformalCalibrator = conformal::calibrate(&cal, 0.1)?;
    let summary = calibrator.summary();
    println!("alpha {} n {} tau {:?}", summary.alpha, summary.n, summary.tau);
    for (r, truth) in test.iter().take(4) {
        let set = conformal::predict_set(r, &calibrator);
        println!("{} truth {truth}: {{{}}}", set.query_id, set.classes.join(", "));
    }

    println!("alpha  theory  coverage  size");
    for row in harness::coverage_size_curve(&cal, &test, &[0.5, 0.2, 0.1, 0.05, 0.01])? {
        println!(
            "{:<6} {:<7.2} {:<9.3} {:.2}",
            row.alpha, row.theoretical_coverage, row.empirical_coverage, row.average_set_size
        );
    }
    Ok(())
}
