//! Datasets in folded form: row `i` holds `z_i = -y_i x_i`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Rows may exceed unit norm by this much after construction.
pub const ROW_NORM_SLACK: f64 = 1e-12;
/// Looser bound accepted from files; rows in between are rescaled to unit norm.
pub const LOAD_NORM_SLACK: f64 = 1e-9;

/// Margin gap between the planted support rows and the rest.
const BULK_GAP: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub n: usize,
    pub d: usize,
    pub target_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Generated { seed: u64, params: GeneratorParams },
    LowerBound { n: usize },
    Loaded { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Folded,
    Labeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    z: Vec<f64>,
    n: usize,
    d: usize,
    provenance: Provenance,
    /// Unit direction the generator planted; `None` for other sources.
    planted: Option<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset from folded rows, checking shape and row norms.
    pub fn from_rows(rows: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::domain("dataset needs at least one row"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::domain("dataset needs at least one column"));
        }
        let mut z = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::domain(format!(
                    "row {} has {} columns, expected {d}",
                    i + 1,
                    r.len()
                )));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain(format!("row {} is not finite", i + 1)));
            }
            if norm(r) > 1.0 + ROW_NORM_SLACK {
                return Err(Error::domain(format!("row {} exceeds unit norm", i + 1)));
            }
            z.extend_from_slice(r);
        }
        Ok(Dataset {
            z,
            n,
            d,
            provenance,
            planted: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn planted_direction(&self) -> Option<&[f64]> {
        self.planted.as_deref()
    }

    pub fn is_lower_bound(&self) -> bool {
        matches!(self.provenance, Provenance::LowerBound { .. })
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.z.chunks_exact(self.d)
    }

    /// `Z w`
    pub fn zw(&self, w: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.len(), self.d);
        self.rows().map(|r| dot(r, w)).collect()
    }

    /// `Z^T q`
    pub fn ztq(&self, q: &[f64]) -> Vec<f64> {
        debug_assert_eq!(q.len(), self.n);
        let mut out = vec![0.0; self.d];
        for (r, &qi) in self.rows().zip(q) {
            if qi != 0.0 {
                for (o, x) in out.iter_mut().zip(r) {
                    *o += qi * x;
                }
            }
        }
        out
    }

    /// `min_i <-z_i, u>`
    pub fn margin_of(&self, u: &[f64]) -> f64 {
        self.rows()
            .map(|r| -dot(r, u))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_row_norm(&self) -> f64 {
        self.rows().map(norm).fold(0.0, f64::max)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let nv = norm(&v);
        if nv > 1e-8 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// Gaussian direction orthogonal to `u`, normalized; zero when `d = 1`.
fn random_orthogonal_unit(rng: &mut ChaCha8Rng, u: &[f64]) -> Vec<f64> {
    if u.len() == 1 {
        return vec![0.0];
    }
    loop {
        let mut v = gaussian_vec(rng, u.len());
        let c = dot(&v, u);
        for (x, ui) in v.iter_mut().zip(u) {
            *x -= c * ui;
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// Separable data whose maximum margin equals `target_margin`.
///
/// A random unit `u*` is drawn. Two rows are planted at margin exactly
/// `target_margin` with orthogonal offsets of opposite sign, so their convex
/// hull passes through `target_margin * u*` and the max margin cannot exceed
/// it. All other rows are Gaussian, folded to the positive side of `u*` with
/// margin at least `target_margin + 0.02`, and scaled into the unit ball.
pub fn gen_separable(n: usize, d: usize, target_margin: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::config("n and d must be at least 1"));
    }
    if !(target_margin > 0.0 && target_margin < 1.0) {
        return Err(Error::config(format!(
            "target margin must lie in (0, 1), got {target_margin}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_unit(&mut rng, d);
    let t = target_margin;
    let radius = (1.0 - t * t).sqrt();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);

    // x = m u + o, folded to z = -x
    let push = |rows: &mut Vec<Vec<f64>>, m: f64, o: &[f64]| {
        let mut z: Vec<f64> = u.iter().zip(o).map(|(ui, oi)| -(m * ui + oi)).collect();
        let nz = norm(&z);
        if nz > 1.0 {
            for x in z.iter_mut() {
                *x /= nz;
            }
        }
        rows.push(z);
    };

    let e = random_orthogonal_unit(&mut rng, &u);
    let a = rng.random_range(0.2..0.8) * radius;
    let b = rng.random_range(0.2..0.8) * radius;
    // a lone row sits exactly at the target margin
    let a = if n == 1 { 0.0 } else { a };
    push(&mut rows, t, &e.iter().map(|x| a * x).collect::<Vec<_>>());
    if n >= 2 {
        push(&mut rows, t, &e.iter().map(|x| -b * x).collect::<Vec<_>>());
    }
    while rows.len() < n {
        let g: f64 = rng.sample(StandardNormal);
        let m = (t + BULK_GAP + 0.5 * g.abs()).min(0.95);
        let dir = random_orthogonal_unit(&mut rng, &u);
        let r = rng.random_range(0.0..1.0) * (1.0 - m * m).sqrt();
        push(&mut rows, m, &dir.iter().map(|x| r * x).collect::<Vec<_>>());
    }

    // shuffle so the support rows are not always first
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }

    let mut ds = Dataset::from_rows(
        &rows,
        Provenance::Generated {
            seed,
            params: GeneratorParams {
                n,
                d,
                target_margin,
            },
        },
    )?;
    ds.planted = Some(u);
    Ok(ds)
}

/// Two-dimensional dataset with one row `(0.1, 0)` and `n - 1` copies of `(0.2, 0.2)`.
pub fn lower_bound_dataset(n: usize) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::domain(format!("lower bound dataset needs n >= 2, got {n}")));
    }
    let mut rows = vec![vec![0.2, 0.2]; n];
    rows[0] = vec![0.1, 0.0];
    Dataset::from_rows(&rows, Provenance::LowerBound { n })
}

/// Writes the folded matrix with 17 significant digits per entry.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let text = dataset_to_csv(ds);
    crate::runner::io::write_atomic(path, text.as_bytes())
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::from("# schema=folded\n");
    for r in ds.rows() {
        let mut first = true;
        for x in r {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{x:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_dataset(&text, path)
}

/// Parses CSV text; `path` is only used for provenance and error messages.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let load_err = |row: usize, msg: String| Error::Load {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut schema = Schema::Folded;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut seen_data = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if seen_data {
                return Err(load_err(rows.len() + 1, "header after data".into()));
            }
            if let Some(s) = header.trim().strip_prefix("schema=") {
                schema = match s.trim() {
                    "folded" => Schema::Folded,
                    "labeled" => Schema::Labeled,
                    other => return Err(load_err(0, format!("unknown schema {other:?}"))),
                };
            }
            continue;
        }
        seen_data = true;
        let row = rows.len() + 1;
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| load_err(row, format!("is malformed: {e}")))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(load_err(row, "has a non-finite entry".into()));
        }
        let z = match schema {
            Schema::Folded => vals,
            Schema::Labeled => {
                if vals.len() < 2 {
                    return Err(load_err(row, "needs a label and at least one feature".into()));
                }
                let y = vals[0];
                if y != 1.0 && y != -1.0 {
                    return Err(load_err(row, format!("has label {y}, expected +1 or -1")));
                }
                vals[1..].iter().map(|x| -y * x).collect()
            }
        };
        match width {
            None => width = Some(z.len()),
            Some(w) if w != z.len() => {
                return Err(load_err(
                    row,
                    format!("has {} columns, expected {w}", z.len()),
                ))
            }
            _ => {}
        }
        let nz = norm(&z);
        if nz > 1.0 + LOAD_NORM_SLACK {
            return Err(load_err(row, "exceeds unit norm".into()));
        }
        let z = if nz > 1.0 + ROW_NORM_SLACK {
            z.into_iter().map(|x| x / nz).collect()
        } else {
            z
        };
        rows.push(z);
    }
    if rows.is_empty() {
        return Err(load_err(0, "file contains no data rows".into()));
    }
    Dataset::from_rows(
        &rows,
        Provenance::Loaded {
            path: path.to_path_buf(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lower_bound_rows() {
        let ds = lower_bound_dataset(2).unwrap();
        assert_eq!(ds.as_slice(), &[0.1, 0.0, 0.2, 0.2]);
        let ds = lower_bound_dataset(50).unwrap();
        assert_eq!(ds.d(), 2);
        assert!(ds.max_row_norm() < 1.0 / 3.0);
        assert!(ds.rows().skip(1).all(|r| r == [0.2, 0.2]));
        assert!(matches!(lower_bound_dataset(1), Err(Error::Domain(_))));
    }

    #[test]
    fn generator_errors() {
        assert!(matches!(gen_separable(5, 2, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(gen_separable(5, 2, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(gen_separable(0, 2, 0.3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn single_point() {
        let ds = gen_separable(1, 2, 0.3, 11).unwrap();
        let u = ds.planted_direction().unwrap();
        assert!(ds.margin_of(u) >= 0.3 - 1e-15);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_separable(50, 5, 0.2, 7).unwrap();
        let b = gen_separable(50, 5, 0.2, 7).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = gen_separable(50, 5, 0.2, 8).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn one_dimensional() {
        let ds = gen_separable(6, 1, 0.4, 3).unwrap();
        let u = ds.planted_direction().unwrap();
        assert!((ds.margin_of(u) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let ds = lower_bound_dataset(8).unwrap();
        let text = dataset_to_csv(&ds);
        let back = parse_dataset(&text, Path::new("mem.csv")).unwrap();
        assert_eq!(back.as_slice(), ds.as_slice());
        let ds = gen_separable(30, 4, 0.17, 99).unwrap();
        let back = parse_dataset(&dataset_to_csv(&ds), Path::new("mem.csv")).unwrap();
        assert_eq!(back.as_slice(), ds.as_slice());
    }

    #[test]
    fn csv_norm_violation_names_row() {
        let text = "0.1,0.2\n0.3,0.1\n1.2,0.9\n";
        let err = parse_dataset(text, Path::new("bad.csv")).unwrap_err();
        assert!(err.to_string().contains("row 3 exceeds unit norm"), "{err}");
        assert!(matches!(err, Error::Load { row: 3, .. }));
    }

    #[test]
    fn csv_errors() {
        let p = Path::new("x.csv");
        assert!(matches!(parse_dataset("0.1,0.2\n0.1\n", p), Err(Error::Load { row: 2, .. })));
        assert!(matches!(parse_dataset("0.1,abc\n", p), Err(Error::Load { row: 1, .. })));
        assert!(matches!(parse_dataset("", p), Err(Error::Load { .. })));
        assert!(parse_dataset("# schema=labeled\n0.5,0.1\n", p).is_err());
        assert!(parse_dataset("# schema=other\n0.5,0.1\n", p).is_err());
    }

    #[test]
    fn labeled_rows_are_folded() {
        let text = "# schema=labeled\n1,0.5,-0.25\n-1,0.5,-0.25\n";
        let ds = parse_dataset(text, Path::new("l.csv")).unwrap();
        assert_eq!(ds.row(0), &[-0.5, 0.25]);
        assert_eq!(ds.row(1), &[0.5, -0.25]);
    }

    #[test]
    fn products() {
        let ds = lower_bound_dataset(3).unwrap();
        assert_eq!(ds.zw(&[1.0, 2.0]), vec![0.1, 0.6000000000000001, 0.6000000000000001]);
        let v = ds.ztq(&[1.0, 0.5, 0.5]);
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.2).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generated_rows_are_valid(n in 1usize..40, d in 1usize..6, t in 0.05f64..0.9, seed in any::<u64>()) {
            let ds = gen_separable(n, d, t, seed).unwrap();
            prop_assert_eq!(ds.n(), n);
            prop_assert_eq!(ds.d(), d);
            prop_assert!(ds.max_row_norm() <= 1.0 + ROW_NORM_SLACK);
            let u = ds.planted_direction().unwrap();
            prop_assert!((norm(u) - 1.0).abs() < 1e-12);
            let m = ds.margin_of(u);
            prop_assert!(m >= t - 1e-12 && m <= t + 0.01);
        }
    }
}
