//! Spectrum records, file ingest, grid resampling and dataset splits.
//!
//! Two on-disk formats are supported, both carrying the same five fields:
//!
//! - CSV with header `source_id,class_label,role,wavenumbers,intensities`,
//!   where the last two columns are `;`-separated decimal lists.
//! - JSONL, one object per line with the same field names and numeric arrays.
//!
//! Numbers always use `.` as the decimal separator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resampled spectra with more than this fraction of edge-filled points are flagged.
pub const EDGE_FILL_FLAG_FRACTION: f64 = 0.2;

/// Default number of points on the shared input grid.
pub const DEFAULT_INPUT_LENGTH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reference,
    Train,
    Validation,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Reference => "reference",
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "reference" => Ok(Role::Reference),
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guess the format from a file extension (`.csv` or `.jsonl`/`.json`).
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::Csv),
            "jsonl" | "json" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

/// A measured spectrum: intensities on a strictly increasing wavenumber axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    source_id: String,
    class_label: String,
    role: Role,
    wavenumbers: Vec<f64>,
    intensities: Vec<f64>,
}

impl Spectrum {
    pub fn new(
        source_id: impl Into<String>,
        class_label: impl Into<String>,
        role: Role,
        wavenumbers: Vec<f64>,
        intensities: Vec<f64>,
    ) -> Result<Self> {
        let s = Spectrum {
            source_id: source_id.into(),
            class_label: class_label.into(),
            role,
            wavenumbers,
            intensities,
        };
        s.validate()?;
        Ok(s)
    }

    /// Check the record invariants: equal lengths, at least two points,
    /// strictly increasing finite wavenumbers and finite intensities.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidSpectrum {
            source_id: self.source_id.clone(),
            line: None,
            message,
        };
        if self.wavenumbers.len() != self.intensities.len() {
            return Err(fail(format!(
                "{} wavenumbers but {} intensities",
                self.wavenumbers.len(),
                self.intensities.len()
            )));
        }
        if self.wavenumbers.len() < 2 {
            return Err(fail("fewer than two points".into()));
        }
        if let Some(i) = self.wavenumbers.iter().position(|v| !v.is_finite()) {
            return Err(fail(format!("non-finite wavenumber at index {i}")));
        }
        if let Some(i) = self.wavenumbers.windows(2).position(|w| w[1] <= w[0]) {
            return Err(fail(format!("wavenumbers not strictly increasing at index {}", i + 1)));
        }
        if let Some(i) = self.intensities.iter().position(|v| !v.is_finite()) {
            return Err(fail(format!(
                "non-finite intensity {} at index {i}",
                self.intensities[i]
            )));
        }
        Ok(())
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn class_label(&self) -> &str {
        &self.class_label
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    /// Measured wavenumber range `(first, last)`.
    pub fn range(&self) -> (f64, f64) {
        (self.wavenumbers[0], *self.wavenumbers.last().unwrap())
    }
}

/// A uniform wavenumber grid of `len` points spanning `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub len: usize,
}

impl Grid {
    pub fn new(min: f64, max: f64, len: usize) -> Result<Self> {
        let g = Grid { min, max, len };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len < 2 {
            return Err(Error::Config(format!("grid length {} < 2", self.len)));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.max > self.min) {
            return Err(Error::Config(format!(
                "grid bounds [{}, {}] must be finite and increasing",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// Spacing between neighbouring grid points, cm⁻¹.
    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.len - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.len {
            self.max
        } else {
            self.min + i as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.point(i)).collect()
    }

    /// The intersection of all measured ranges, sampled with `len` points.
    pub fn common(spectra: &[Spectrum], len: usize) -> Result<Self> {
        if spectra.is_empty() {
            return Err(Error::EmptyInput("cannot derive a grid from zero spectra"));
        }
        let (lo, hi) = spectra.iter().fold((f64::MIN, f64::MAX), |(lo, hi), s| {
            let (a, b) = s.range();
            (lo.max(a), hi.min(b))
        });
        if hi <= lo {
            return Err(Error::Config(format!(
                "measured ranges have empty intersection [{lo}, {hi}]"
            )));
        }
        Grid::new(lo, hi, len)
    }
}

/// Intensities on a shared uniform grid, ready for the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledSpectrum {
    intensities: Vec<f64>,
    class_label: String,
    source_id: String,
    edge_filled: usize,
    augmented: bool,
}

impl ResampledSpectrum {
    /// A spectrum already on the working grid, e.g. for tests or tools that
    /// resample elsewhere.
    pub fn from_parts(intensities: Vec<f64>, class_label: impl Into<String>, source_id: impl Into<String>) -> Self {
        ResampledSpectrum {
            intensities,
            class_label: class_label.into(),
            source_id: source_id.into(),
            edge_filled: 0,
            augmented: false,
        }
    }

    /// A synthetic copy carrying new intensities, the same label and a new id.
    pub(crate) fn derived(&self, intensities: Vec<f64>, source_id: String) -> Self {
        debug_assert_eq!(intensities.len(), self.intensities.len());
        ResampledSpectrum {
            intensities,
            class_label: self.class_label.clone(),
            source_id,
            edge_filled: 0,
            augmented: true,
        }
    }

    /// True for spectra produced by augmentation rather than measurement.
    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn class_label(&self) -> &str {
        &self.class_label
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    /// Fraction of grid points that fell outside the measured range.
    pub fn edge_fill_fraction(&self) -> f64 {
        self.edge_filled as f64 / self.intensities.len() as f64
    }

    pub fn is_flagged(&self) -> bool {
        self.edge_fill_fraction() > EDGE_FILL_FLAG_FRACTION
    }

    /// Per-spectrum min-max scaling to `[0, 1]`. A flat spectrum maps to zeros.
    pub fn min_max_normalized(mut self) -> Self {
        let (lo, hi) = self
            .intensities
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        for v in &mut self.intensities {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        self
    }

    /// Reattach the grid to get a plain [`Spectrum`] again.
    pub fn on_grid(&self, grid: &Grid, role: Role) -> Result<Spectrum> {
        if grid.len != self.len() {
            return Err(Error::shape(
                "on_grid",
                format!("grid has {} points, spectrum {}", grid.len, self.len()),
            ));
        }
        Spectrum::new(
            self.source_id.clone(),
            self.class_label.clone(),
            role,
            grid.points(),
            self.intensities.clone(),
        )
    }
}

/// Linearly interpolate `s` onto `grid`, clamping to the edge intensity
/// outside the measured range.
pub fn resample_to_grid(s: &Spectrum, grid: &Grid) -> Result<ResampledSpectrum> {
    grid.validate()?;
    let (lo, hi) = s.range();
    if grid.max < lo || grid.min > hi {
        return Err(Error::NoOverlap {
            source_id: s.source_id.clone(),
            grid_min: grid.min,
            grid_max: grid.max,
            measured_min: lo,
            measured_max: hi,
        });
    }
    let wn = &s.wavenumbers;
    let y = &s.intensities;
    let last = y.len() - 1;
    let mut edge_filled = 0;
    let intensities = (0..grid.len)
        .map(|i| {
            let x = grid.point(i);
            if x <= lo {
                if x < lo {
                    edge_filled += 1;
                }
                return y[0];
            }
            if x >= hi {
                if x > hi {
                    edge_filled += 1;
                }
                return y[last];
            }
            let j = wn.partition_point(|&v| v <= x);
            let i = j - 1;
            let t = (x - wn[i]) / (wn[j] - wn[i]);
            y[i] + t * (y[j] - y[i])
        })
        .collect();
    let out = ResampledSpectrum {
        intensities,
        class_label: s.class_label.clone(),
        source_id: s.source_id.clone(),
        edge_filled,
        augmented: false,
    };
    if out.is_flagged() {
        log::warn!(
            "spectrum `{}`: {:.0}% of grid points edge-filled",
            s.source_id,
            100.0 * out.edge_fill_fraction()
        );
    }
    Ok(out)
}

/// Grid plus optional normalization, applied uniformly to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    pub grid: Grid,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Preprocessing {
    pub fn apply(&self, s: &Spectrum) -> Result<ResampledSpectrum> {
        let r = resample_to_grid(s, &self.grid)?;
        Ok(if self.normalize { r.min_max_normalized() } else { r })
    }

    pub fn apply_all(&self, spectra: &[Spectrum]) -> Result<Vec<ResampledSpectrum>> {
        spectra.iter().map(|s| self.apply(s)).collect()
    }
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    source_id: String,
    class_label: String,
    role: String,
    wavenumbers: String,
    intensities: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    source_id: String,
    class_label: String,
    role: Role,
    wavenumbers: Vec<f64>,
    intensities: Vec<f64>,
}

const CSV_HEADER: [&str; 5] = ["source_id", "class_label", "role", "wavenumbers", "intensities"];

fn parse_list(field: &str) -> std::result::Result<Vec<f64>, String> {
    field
        .split(';')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>()
                .map_err(|_| format!("`{tok}` is not a decimal number"))
        })
        .collect()
}

fn join_list(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        out.push_str(&v.to_string());
    }
    out
}

fn with_line(err: Error, line: u64) -> Error {
    match err {
        Error::InvalidSpectrum { source_id, message, .. } => Error::InvalidSpectrum {
            source_id,
            line: Some(line),
            message,
        },
        other => other,
    }
}

/// Read every record from `path`. An empty file yields an empty list.
pub fn load_spectra(path: impl AsRef<Path>, format: Format) -> Result<Vec<Spectrum>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_spectra(file, format, &path.display().to_string())
}

/// Parse records from any reader; `origin` names the source in error messages.
pub fn read_spectra<R: Read>(reader: R, format: Format, origin: &str) -> Result<Vec<Spectrum>> {
    match format {
        Format::Csv => read_csv(reader, origin),
        Format::Jsonl => read_jsonl(reader, origin),
    }
}

fn read_csv<R: Read>(reader: R, origin: &str) -> Result<Vec<Spectrum>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(parse_err(
            1,
            format!(
                "expected header `{}`, found `{}`",
                CSV_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let raw: CsvRecord = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        let role = raw.role.parse::<Role>().map_err(|m| parse_err(line, m))?;
        let wavenumbers = parse_list(&raw.wavenumbers).map_err(|m| parse_err(line, format!("wavenumbers: {m}")))?;
        let intensities = parse_list(&raw.intensities).map_err(|m| parse_err(line, format!("intensities: {m}")))?;
        let s = Spectrum::new(raw.source_id, raw.class_label, role, wavenumbers, intensities)
            .map_err(|e| with_line(e, line))?;
        out.push(s);
    }
    Ok(out)
}

fn read_jsonl<R: Read>(reader: R, origin: &str) -> Result<Vec<Spectrum>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx as u64 + 1;
        let line = line.map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        let s = Spectrum::new(
            raw.source_id,
            raw.class_label,
            raw.role,
            raw.wavenumbers,
            raw.intensities,
        )
        .map_err(|e| with_line(e, lineno))?;
        out.push(s);
    }
    Ok(out)
}

/// Serialize spectra in the given format.
pub fn write_spectra<W: Write>(writer: W, format: Format, spectra: &[Spectrum]) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            let csv_err = |e: csv::Error| Error::Parse {
                path: "<output>".into(),
                line: 0,
                message: e.to_string(),
            };
            for s in spectra {
                w.serialize(CsvRecord {
                    source_id: s.source_id.clone(),
                    class_label: s.class_label.clone(),
                    role: s.role.to_string(),
                    wavenumbers: join_list(&s.wavenumbers),
                    intensities: join_list(&s.intensities),
                })
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io("<output>", e))?;
        }
        Format::Jsonl => {
            let mut w = writer;
            for s in spectra {
                let rec = JsonRecord {
                    source_id: s.source_id.clone(),
                    class_label: s.class_label.clone(),
                    role: s.role,
                    wavenumbers: s.wavenumbers.clone(),
                    intensities: s.intensities.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits

/// Train / validation / test partition of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Spectrum>,
    pub validation: Vec<Spectrum>,
    pub test: Vec<Spectrum>,
    pub split_seed: u64,
    /// Classes left out of the test set because they had a single spectrum.
    pub excluded_classes: Vec<String>,
}

impl DatasetSplit {
    /// Parts are disjoint by `source_id` and every test class occurs in train.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(s.source_id()) {
                return Err(Error::InvalidSpectrum {
                    source_id: s.source_id().to_string(),
                    line: None,
                    message: "appears in more than one split part".into(),
                });
            }
        }
        let train_classes: BTreeSet<&str> = self.train.iter().map(|s| s.class_label()).collect();
        for s in &self.test {
            if !train_classes.contains(s.class_label()) {
                return Err(Error::UnknownClass(s.class_label().to_string()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices of one randomly chosen spectrum per class with at least two members.
fn pick_one_per_class<'a, I>(labels: I, rng: &mut ChaCha8Rng) -> (BTreeSet<usize>, Vec<String>)
where
    I: Iterator<Item = &'a str>,
{
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut picked = BTreeSet::new();
    let mut singles = Vec::new();
    for (label, idx) in by_class {
        if idx.len() < 2 {
            singles.push(label.to_string());
            continue;
        }
        picked.insert(idx[rng.random_range(0..idx.len())]);
    }
    (picked, singles)
}

/// Randomized leave-one-out: one spectrum per class (with ≥ 2 members) goes
/// to test, everything else to train. Single-spectrum classes stay in train
/// and are listed in `excluded_classes`.
pub fn make_test_split(spectra: &[Spectrum], seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, excluded) = pick_one_per_class(spectra.iter().map(|s| s.class_label()), &mut rng);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in spectra.iter().enumerate() {
        if picked.contains(&i) {
            test.push(s.clone().with_role(Role::Test));
        } else {
            train.push(s.clone().with_role(Role::Train));
        }
    }
    DatasetSplit {
        train,
        validation: Vec::new(),
        test,
        split_seed: seed,
        excluded_classes: excluded,
    }
}

/// Move one training spectrum per class into validation, for classes that
/// keep at least one training spectrum afterwards.
pub fn hold_out_validation(mut split: DatasetSplit, seed: u64) -> DatasetSplit {
    // A separate stream from the test draw so the two choices stay independent.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (picked, _) = pick_one_per_class(split.train.iter().map(|s| s.class_label()), &mut rng);
    let mut train = Vec::new();
    for (i, s) in split.train.into_iter().enumerate() {
        if picked.contains(&i) {
            split.validation.push(s.with_role(Role::Validation));
        } else {
            train.push(s);
        }
    }
    split.train = train;
    split
}

/// Split by the `role` column: fixed test sets bypass leave-one-out.
/// Reference records count as training data.
pub fn split_by_role(spectra: &[Spectrum]) -> DatasetSplit {
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        split_seed: 0,
        excluded_classes: Vec::new(),
    };
    for s in spectra {
        match s.role() {
            Role::Train | Role::Reference => split.train.push(s.clone()),
            Role::Validation => split.validation.push(s.clone()),
            Role::Test => split.test.push(s.clone()),
        }
    }
    split
}
