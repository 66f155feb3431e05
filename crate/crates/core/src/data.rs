//! Datasets: feature matrices with optional per-row class labels, the CSV
//! interchange format, and the synthetic domain-shift generators used for
//! desk-scale experiments.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DataMatrix, SeededRng};

/// Label slot for one row: `None` marks an unlabeled sample.
pub type Label = Option<usize>;

/// Sentinel used by the CSV format for unlabeled rows.
pub const UNLABELED_SENTINEL: i64 = -1;

/// Feature matrix plus one label slot per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DataMatrix,
    pub labels: Vec<Label>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: DataMatrix, labels: Vec<Label>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                if *c >= class_count {
                    return Err(Error::Config(format!(
                        "row {i} has label {c} but class_count is {class_count}"
                    )));
                }
            }
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    /// Fully labeled dataset.
    pub fn labeled(features: DataMatrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let labels = labels.into_iter().map(Some).collect();
        Dataset::new(features, labels, class_count)
    }

    /// Fully unlabeled dataset.
    pub fn unlabeled(features: DataMatrix, class_count: usize) -> Result<Self> {
        let labels = vec![None; features.rows()];
        Dataset::new(features, labels, class_count)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    /// Returns true when every class in `[0, class_count)` appears among the
    /// labeled rows.
    pub fn covers_all_classes(&self) -> bool {
        let mut seen = vec![false; self.class_count];
        for l in self.labels.iter().flatten() {
            seen[*l] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// One-hot label matrix over the labeled rows, in `indices` order.
    pub fn onehot_labels(&self, indices: &[usize]) -> Result<DataMatrix> {
        let mut m = DataMatrix::zeros(indices.len().max(1), self.class_count);
        for (r, &i) in indices.iter().enumerate() {
            match self.labels[i] {
                Some(c) => m.set(r, c, 1.0),
                None => {
                    return Err(Error::Contract(format!(
                        "row {i} is unlabeled; one-hot encoding requires labels"
                    )))
                }
            }
        }
        Ok(m)
    }
}

/// The three splits of one experiment: labeled source, unlabeled target and
/// a held-out labeled test set drawn from the target domain.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Dataset,
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoMoons,
    Blobs,
}

/// Domain shift applied to the target draws.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    /// Rotation about the origin, in degrees, applied to the first two
    /// coordinates.
    RotationDegrees(f64),
    /// Added to every sample; length must equal the feature dimension.
    Translation(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out labeled target rows; defaults to `n_target` when absent.
    #[serde(default)]
    pub n_test: Option<usize>,
    pub shift: Shift,
    pub noise: f64,
    /// Feature dimension for `blobs`; `two_moons` is always 2-d.
    #[serde(default)]
    pub dims: Option<usize>,
    pub seed: u64,
}

impl SyntheticConfig {
    fn dims(&self) -> usize {
        match self.kind {
            SyntheticKind::TwoMoons => 2,
            SyntheticKind::Blobs => self.dims.unwrap_or(2),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_source < 4 || self.n_target < 4 {
            return Err(Error::Config(
                "n_source and n_target must both be at least 4".into(),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        if let Shift::Translation(t) = &self.shift {
            if t.len() != self.dims() {
                return Err(Error::Config(format!(
                    "translation has {} entries for {}-d data",
                    t.len(),
                    self.dims()
                )));
            }
        }
        if matches!(self.kind, SyntheticKind::TwoMoons) && self.dims.map_or(false, |d| d != 2) {
            return Err(Error::Config("two_moons data is always 2-d".into()));
        }
        Ok(())
    }
}

/// Two interleaved half-circles, centered at the origin, with isotropic
/// Gaussian noise. Classes alternate by row index.
fn draw_two_moons(n: usize, noise: f64, rng: &mut SeededRng) -> (DataMatrix, Vec<usize>) {
    let mut m = DataMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = std::f64::consts::PI * rng.uniform();
        let (mut x, mut y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        // Center the pair of moons so rotation about the origin is a pure
        // domain shift.
        x -= 0.5;
        y -= 0.25;
        m.set(i, 0, x + noise * rng.normal());
        m.set(i, 1, y + noise * rng.normal());
        labels.push(class);
    }
    (m, labels)
}

/// Two Gaussian blobs at `(+-2, 0, ..., 0)`; classes alternate by row index.
fn draw_blobs(n: usize, dims: usize, noise: f64, rng: &mut SeededRng) -> (DataMatrix, Vec<usize>) {
    let mut m = DataMatrix::zeros(n, dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let center = if class == 0 { 2.0 } else { -2.0 };
        for d in 0..dims {
            let mean = if d == 0 { center } else { 0.0 };
            m.set(i, d, mean + noise * rng.normal());
        }
        labels.push(class);
    }
    (m, labels)
}

fn draw(kind: SyntheticKind, n: usize, dims: usize, noise: f64, rng: &mut SeededRng) -> (DataMatrix, Vec<usize>) {
    match kind {
        SyntheticKind::TwoMoons => draw_two_moons(n, noise, rng),
        SyntheticKind::Blobs => draw_blobs(n, dims, noise, rng),
    }
}

fn apply_shift(m: &mut DataMatrix, shift: &Shift) {
    match shift {
        Shift::RotationDegrees(deg) => {
            let theta = deg.to_radians();
            let (sin, cos) = theta.sin_cos();
            for r in 0..m.rows() {
                let x = m.get(r, 0);
                let y = m.get(r, 1);
                m.set(r, 0, cos * x - sin * y);
                m.set(r, 1, sin * x + cos * y);
            }
        }
        Shift::Translation(t) => {
            for r in 0..m.rows() {
                for (c, dv) in t.iter().enumerate() {
                    m.set(r, c, m.get(r, c) + dv);
                }
            }
        }
    }
}

/// Generates the three splits of a synthetic domain-shift problem. The
/// source split is labeled; the target split is a fresh draw from the same
/// generator pushed through `shift` with labels hidden; the test split is a
/// second shifted draw with labels retained.
///
/// Stream layout: source uses `derive(seed, 0)`, target `derive(seed, 1)`,
/// test `derive(seed, 2)`, so with a zero shift the target equals the fresh
/// source draw that `derive(seed, 1)` would produce.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SplitData> {
    cfg.validate()?;
    let dims = cfg.dims();
    let n_test = cfg.n_test.unwrap_or(cfg.n_target);

    let mut source_rng = SeededRng::derive(cfg.seed, 0);
    let (source_x, source_y) = draw(cfg.kind, cfg.n_source, dims, cfg.noise, &mut source_rng);

    let mut target_rng = SeededRng::derive(cfg.seed, 1);
    let (mut target_x, target_y) = draw(cfg.kind, cfg.n_target, dims, cfg.noise, &mut target_rng);
    apply_shift(&mut target_x, &cfg.shift);

    let mut test_rng = SeededRng::derive(cfg.seed, 2);
    let (mut test_x, test_y) = draw(cfg.kind, n_test, dims, cfg.noise, &mut test_rng);
    apply_shift(&mut test_x, &cfg.shift);

    // The target draw's labels are dropped here; only the test split
    // carries target-domain truth.
    drop(target_y);
    let class_count = 2;
    Ok(SplitData {
        source: Dataset::labeled(source_x, source_y, class_count)?,
        target: Dataset::unlabeled(target_x, class_count)?,
        test: Dataset::labeled(test_x, test_y, class_count)?,
    })
}

// ---------------------------------------------------------------------------
// CSV interchange
// ---------------------------------------------------------------------------

/// Raw contents of one CSV file before class counts are reconciled across
/// splits.
#[derive(Debug, Clone)]
pub struct CsvFile {
    pub features: DataMatrix,
    pub labels: Vec<Label>,
}

impl CsvFile {
    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().flatten().copied().max()
    }

    pub fn into_dataset(self, class_count: usize) -> Result<Dataset> {
        Dataset::new(self.features, self.labels, class_count)
    }
}

/// Formats one value with 17 significant digits so the round trip through
/// text is exact for f64.
fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `f0,...,f{d-1},label` rows; unlabeled rows carry label -1.
pub fn write_csv(path: &Path, features: &DataMatrix, labels: &[Label]) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(Error::shape(
            "write_csv",
            format!("{} labels for {} rows", labels.len(), features.rows()),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut line = String::new();
    for c in 0..features.cols() {
        if c > 0 {
            line.push(',');
        }
        let _ = write!(line, "f{c}");
    }
    line.push_str(",label\n");
    out.write_all(line.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in 0..features.rows() {
        line.clear();
        for c in 0..features.cols() {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&format_value(features.get(r, c)));
        }
        let label = labels[r].map_or(UNLABELED_SENTINEL, |l| l as i64);
        let _ = write!(line, ",{label}\n");
        out.write_all(line.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses a CSV written in the `f0..f{d-1}[,label]` layout. A missing label
/// column or the value -1 marks a row as unlabeled. Errors carry 1-based
/// line numbers.
pub fn load_csv(path: &Path) -> Result<CsvFile> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        detail: "empty file, expected a header row".into(),
    })?;
    let header = header.map_err(|e| Error::io(path.display().to_string(), e))?;
    let columns: Vec<&str> = header.trim_end().split(',').collect();
    let has_label = columns.last() == Some(&"label");
    let feature_cols = if has_label {
        columns.len() - 1
    } else {
        columns.len()
    };
    if feature_cols == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "header declares no feature columns".into(),
        });
    }
    for (c, name) in columns.iter().take(feature_cols).enumerate() {
        let expected = format!("f{c}");
        if *name != expected {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected column `{expected}`, found `{name}`"),
            });
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                line: line_no,
                detail: format!(
                    "ragged row: {} fields, header has {}",
                    fields.len(),
                    columns.len()
                ),
            });
        }
        for field in fields.iter().take(feature_cols) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                detail: format!("non-numeric feature field `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("non-finite feature value `{field}`"),
                });
            }
            values.push(v);
        }
        if has_label {
            let raw = fields[feature_cols].trim();
            let l: i64 = raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                detail: format!("non-integer label field `{raw}`"),
            })?;
            if l < UNLABELED_SENTINEL {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("label must be -1 or a class id, got {l}"),
                });
            }
            labels.push(if l == UNLABELED_SENTINEL {
                None
            } else {
                Some(l as usize)
            });
        } else {
            labels.push(None);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "file contains a header but no data rows".into(),
        });
    }
    Ok(CsvFile {
        features: DataMatrix::new(rows, feature_cols, values)?,
        labels,
    })
}

/// Loads the three experiment splits from CSV, reconciling the class count:
/// `declared` wins when given, otherwise `1 + max label` over all splits.
pub fn load_split_csv(
    labeled: &Path,
    unlabeled: &Path,
    test: &Path,
    declared: Option<usize>,
) -> Result<SplitData> {
    let labeled = load_csv(labeled)?;
    let unlabeled = load_csv(unlabeled)?;
    let test = load_csv(test)?;
    let inferred = [&labeled, &unlabeled, &test]
        .iter()
        .filter_map(|f| f.max_label())
        .max()
        .map(|m| m + 1);
    let class_count = match (declared, inferred) {
        (Some(c), Some(i)) if i > c => {
            return Err(Error::Config(format!(
                "declared class_count {c} but a file contains label {}",
                i - 1
            )))
        }
        (Some(c), _) => c,
        (None, Some(i)) => i,
        (None, None) => {
            return Err(Error::Config(
                "no labels found in any split; declare class_count in the config".into(),
            ))
        }
    };
    Ok(SplitData {
        source: labeled.into_dataset(class_count)?,
        target: unlabeled.into_dataset(class_count)?,
        test: test.into_dataset(class_count)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moon_cfg(shift: Shift) -> SyntheticConfig {
        SyntheticConfig {
            kind: SyntheticKind::TwoMoons,
            n_source: 16,
            n_target: 16,
            n_test: None,
            shift,
            noise: 0.0,
            dims: None,
            seed: 99,
        }
    }

    #[test]
    fn zero_rotation_target_equals_fresh_source_draw() {
        let data = gen_synthetic(&moon_cfg(Shift::RotationDegrees(0.0))).unwrap();
        let mut rng = SeededRng::derive(99, 1);
        let (fresh, _) = draw_two_moons(16, 0.0, &mut rng);
        assert_eq!(data.target.features, fresh);
    }

    #[test]
    fn rotation_180_is_origin_reflection() {
        let a = gen_synthetic(&moon_cfg(Shift::RotationDegrees(0.0))).unwrap();
        let b = gen_synthetic(&moon_cfg(Shift::RotationDegrees(180.0))).unwrap();
        for r in 0..a.target.len() {
            for c in 0..2 {
                let reflected = -a.target.features.get(r, c);
                assert!((b.target.features.get(r, c) - reflected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            noise: 0.1,
            shift: Shift::RotationDegrees(30.0),
            ..moon_cfg(Shift::RotationDegrees(0.0))
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.source.features, b.source.features);
        assert_eq!(a.target.features, b.target.features);
        assert_eq!(a.test.features, b.test.features);
        assert_eq!(a.test.labels, b.test.labels);
    }

    #[test]
    fn synthetic_rejects_tiny_or_invalid_configs() {
        let mut cfg = moon_cfg(Shift::RotationDegrees(0.0));
        cfg.n_source = 3;
        assert!(gen_synthetic(&cfg).is_err());
        let mut cfg = moon_cfg(Shift::RotationDegrees(0.0));
        cfg.noise = -0.5;
        assert!(gen_synthetic(&cfg).is_err());
        let cfg = moon_cfg(Shift::Translation(vec![1.0]));
        assert!(gen_synthetic(&cfg).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("uast_csv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let mut rng = SeededRng::new(4);
        let features = rng.normal_matrix(7, 3);
        let labels: Vec<Label> = vec![Some(0), Some(1), None, Some(1), None, Some(0), Some(1)];
        write_csv(&path, &features, &labels).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.labels, labels);
        for r in 0..7 {
            for c in 0..3 {
                assert_eq!(back.features.get(r, c), features.get(r, c));
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_infers_classes_and_handles_unlabeled_files() {
        let dir = std::env::temp_dir().join(format!("uast_csv_infer_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let two = dir.join("two.csv");
        std::fs::write(&two, "f0,f1,label\n0.0,1.0,0\n1.0,0.0,1\n").unwrap();
        let f = load_csv(&two).unwrap();
        assert_eq!(f.max_label(), Some(1));
        let ds = f.into_dataset(2).unwrap();
        assert_eq!(ds.labeled_indices().len(), 2);

        let un = dir.join("unlabeled.csv");
        std::fs::write(&un, "f0,f1,label\n0.0,1.0,-1\n1.0,0.0,-1\n").unwrap();
        let f = load_csv(&un).unwrap();
        assert_eq!(f.max_label(), None);
        assert!(f.labels.iter().all(|l| l.is_none()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = std::env::temp_dir().join(format!("uast_csv_err_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ragged = dir.join("ragged.csv");
        std::fs::write(&ragged, "f0,f1,label\n0.0,1.0,0\n1.0,0\n").unwrap();
        match load_csv(&ragged) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let garbage = dir.join("garbage.csv");
        std::fs::write(&garbage, "f0,f1,label\nx,1.0,0\n").unwrap();
        match load_csv(&garbage) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn declared_class_count_conflicts_are_rejected() {
        let dir = std::env::temp_dir().join(format!("uast_csv_decl_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for (name, body) in [
            ("l.csv", "f0,label\n0.0,0\n1.0,2\n"),
            ("u.csv", "f0,label\n0.5,-1\n"),
            ("t.csv", "f0,label\n0.0,0\n1.0,1\n"),
        ] {
            std::fs::write(dir.join(name), body).unwrap();
        }
        let err = load_split_csv(
            &dir.join("l.csv"),
            &dir.join("u.csv"),
            &dir.join("t.csv"),
            Some(2),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
