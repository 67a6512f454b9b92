//! File formats: dataset CSV, query and prediction CSV, fitted-model JSON,
//! simulation sidecar and a dense text matrix dump.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GspsError, Result};
use crate::model::{CorrelationFamily, Dataset, Location, ThetaBounds};

/// Formats with 6 significant digits, fixed-point where readable.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        sci
    }
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| GspsError::Parse(format!("line {line}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(GspsError::Parse(format!("line {line}: non-finite value")));
    }
    Ok(v)
}

fn numbered_columns(header: &csv::StringRecord, start: usize, prefix: &str) -> usize {
    header
        .iter()
        .skip(start)
        .enumerate()
        .take_while(|(i, name)| name.trim() == format!("{prefix}{}", i + 1))
        .count()
}

/// Reads the `rep,x1..xd,y1..yp` dataset format. Every realization must list
/// the same locations in the same order.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0).map(str::trim) != Some("rep") {
        return Err(GspsError::Parse("first column must be 'rep'".into()));
    }
    let d = numbered_columns(&header, 1, "x");
    let p = numbered_columns(&header, 1 + d, "y");
    if d == 0 || p == 0 || header.len() != 1 + d + p {
        return Err(GspsError::Parse("header must be rep,x1..xd,y1..yp".into()));
    }

    let mut reps: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(GspsError::Parse(format!("line {line}: expected {} fields", header.len())));
        }
        let rep = rec[0].to_string();
        let slot = match reps.iter().position(|r| *r == rep) {
            Some(s) => s,
            None => {
                reps.push(rep);
                rows.push(Vec::new());
                reps.len() - 1
            }
        };
        let x = (1..=d).map(|c| parse_f64(&rec[c], line)).collect::<Result<Vec<_>>>()?;
        let y = (1 + d..1 + d + p).map(|c| parse_f64(&rec[c], line)).collect::<Result<Vec<_>>>()?;
        rows[slot].push((x, y));
    }
    if rows.is_empty() {
        return Err(GspsError::Parse("dataset has no rows".into()));
    }
    let first: Vec<Vec<f64>> = rows[0].iter().map(|(x, _)| x.clone()).collect();
    let n = first.len();
    for (r, block) in rows.iter().enumerate() {
        if block.len() != n || block.iter().zip(&first).any(|((x, _), x0)| x != x0) {
            return Err(GspsError::Parse(format!(
                "realization '{}' does not list the same locations as '{}'",
                reps[r], reps[0]
            )));
        }
    }
    let locations = first.into_iter().map(Location::new).collect::<Result<Vec<_>>>()?;
    let realizations = rows
        .iter()
        .map(|block| DMatrix::from_fn(n, p, |i, k| block[i].1[k]))
        .collect();
    Dataset::new(locations, realizations)
}

pub fn read_dataset_path(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

/// Writes a dataset with shortest round-trip number formatting.
pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["rep".to_string()];
    header.extend((1..=dataset.dim()).map(|i| format!("x{i}")));
    header.extend((1..=dataset.p()).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for (r, y) in dataset.realizations().iter().enumerate() {
        for (i, loc) in dataset.locations().iter().enumerate() {
            let mut row = vec![r.to_string()];
            row.extend(loc.coords().iter().map(|v| v.to_string()));
            row.extend((0..dataset.p()).map(|k| y[(i, k)].to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads query locations with header `x1..xd`.
pub fn read_locations<R: Read>(reader: R) -> Result<Vec<Location>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let d = numbered_columns(&header, 0, "x");
    if d == 0 || header.len() != d {
        return Err(GspsError::Parse("query header must be x1..xd".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(GspsError::Parse(format!("line {}: expected {d} fields", i + 2)));
        }
        let x = rec.iter().map(|f| parse_f64(f, i + 2)).collect::<Result<Vec<_>>>()?;
        out.push(Location::new(x)?);
    }
    Ok(out)
}

/// Writes `x1..xd,yhat1..yhatp` and, if given, the upper triangle of each
/// predictive covariance as `cov_i_j`.
pub fn write_predictions<W: Write>(
    locations: &[Location],
    means: &[DVector<f64>],
    covs: Option<&[DMatrix<f64>]>,
    writer: W,
) -> Result<()> {
    if means.len() != locations.len() || covs.is_some_and(|c| c.len() != locations.len()) {
        return Err(GspsError::DimensionMismatch("one prediction per query location".into()));
    }
    let Some(first) = locations.first() else {
        return Err(GspsError::InvalidInput("no query locations".into()));
    };
    let (d, p) = (first.dim(), means[0].len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.extend((1..=p).map(|i| format!("yhat{i}")));
    if covs.is_some() {
        for i in 1..=p {
            header.extend((i..=p).map(|j| format!("cov_{i}_{j}")));
        }
    }
    w.write_record(&header)?;
    for (idx, loc) in locations.iter().enumerate() {
        let mut row: Vec<String> = loc.coords().iter().map(|v| v.to_string()).collect();
        row.extend(means[idx].iter().map(|v| v.to_string()));
        if let Some(c) = covs {
            for i in 0..p {
                row.extend((i..p).map(|j| c[idx][(i, j)].to_string()));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Dense row-major dump, one row per line.
pub fn write_matrix_text<W: Write>(m: &DMatrix<f64>, mut writer: W) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(writer, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix_text<R: Read>(mut reader: R) -> Result<DMatrix<f64>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.split_whitespace().map(|f| parse_f64(f, i + 1)).collect())
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(GspsError::Parse("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(GspsError::Parse("matrix rows must be non-empty and equal length".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Ground truth written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSidecar {
    pub family: CorrelationFamily,
    pub theta: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub num_realizations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Gsps,
    Independent,
    Mle,
}

impl FitMethod {
    pub fn name(self) -> &'static str {
        match self {
            FitMethod::Gsps => "gsps",
            FitMethod::Independent => "independent",
            FitMethod::Mle => "mle",
        }
    }
}

impl std::str::FromStr for FitMethod {
    type Err = GspsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gsps" => Ok(FitMethod::Gsps),
            "independent" | "msps" => Ok(FitMethod::Independent),
            "mle" => Ok(FitMethod::Mle),
            other => Err(GspsError::Parse(format!("unknown method '{other}'"))),
        }
    }
}

/// Per-response parameters of an independent fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFit {
    pub theta_hat: Vec<f64>,
    pub variance: f64,
}

/// Serialized fitted model shared by every method. `gamma_hat` is row-major;
/// for independent fits it is diagonal and `per_response` carries each `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModelFile {
    pub method: FitMethod,
    pub family: CorrelationFamily,
    pub theta_hat: Vec<f64>,
    pub theta_bounds: ThetaBounds,
    pub gamma_hat: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_response: Vec<ResponseFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<crate::gsps::BlockPartition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_loglik: Option<f64>,
    pub parameter_count: usize,
    #[serde(default)]
    pub diagnostics: serde_json::Value,
}

impl FittedModelFile {
    pub fn gamma(&self) -> Result<DMatrix<f64>> {
        rows_to_matrix(&self.gamma_hat)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let locs = vec![
            Location::new(vec![0.0, 0.5]).unwrap(),
            Location::new(vec![1.25, -3.0]).unwrap(),
            Location::new(vec![0.1, 0.2]).unwrap(),
        ];
        let reals = vec![
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            DMatrix::from_row_slice(3, 2, &[-0.1, 1e-17, 0.3333333333333333, 7.0, 8.5, -9.0]),
        ];
        Dataset::new(locs, reals).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
        assert!(String::from_utf8(buf).unwrap().starts_with("rep,x1,x2,y1,y2\n"));
    }

    #[test]
    fn rejects_bad_headers_and_shapes() {
        for text in [
            "x1,y1\n0,1\n",
            "rep,x1,y2\n0,0,1\n",
            "rep,x1,y1,z\n0,0,1,2\n",
            "rep,x1,y1\n",
        ] {
            assert!(read_dataset(text.as_bytes()).is_err(), "{text}");
        }
        // second realization lists a different location
        let mismatched = "rep,x1,y1\n0,0,1\n0,1,2\n1,0,1\n1,2,2\n";
        assert!(read_dataset(mismatched.as_bytes()).is_err());
        // missing row
        let short = "rep,x1,y1\n0,0,1\n0,1,2\n1,0,1\n";
        assert!(read_dataset(short.as_bytes()).is_err());
        let nan = "rep,x1,y1\n0,0,NaN\n0,1,2\n";
        assert!(read_dataset(nan.as_bytes()).is_err());
        let dup = "rep,x1,y1\n0,0,1\n0,0,2\n";
        assert!(read_dataset(dup.as_bytes()).is_err());
    }

    #[test]
    fn interleaved_realizations_are_grouped() {
        let text = "rep,x1,y1\na,0,1\nb,0,3\na,1,2\nb,1,4\n";
        let ds = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(ds.num_realizations(), 2);
        assert_eq!(ds.realizations()[1][(1, 0)], 4.0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(999999.7), "1.00000e6");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(1e-7), "1.00000e-7");
        assert_eq!(sig6(12.0), "12");
    }

    #[test]
    fn matrix_text_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 1e-300, 0.1, 3.0, 7.0]);
        let mut buf = Vec::new();
        write_matrix_text(&m, &mut buf).unwrap();
        assert_eq!(read_matrix_text(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn predictions_header_with_covariance() {
        let locs = vec![Location::new(vec![0.0]).unwrap()];
        let means = vec![DVector::from_vec(vec![1.0, 2.0])];
        let covs = vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0])];
        let mut buf = Vec::new();
        write_predictions(&locs, &means, Some(&covs), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x1,yhat1,yhat2,cov_1_1,cov_1_2,cov_2_2\n0,1,2,1,0.5,2\n");
    }

    #[test]
    fn query_locations() {
        let locs = read_locations("x1,x2\n0,1\n2.5,3\n".as_bytes()).unwrap();
        assert_eq!(locs.len(), 2);
        assert!(read_locations("x1,y\n0,1\n".as_bytes()).is_err());
    }
}
