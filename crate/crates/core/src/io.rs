//! File formats: fingerprint and experiment CSVs, prediction tables and the
//! saved model.
//!
//! CSV readers skip lines starting with `#`, which is where writers put the
//! configuration and seed that produced a file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chemspace::{build_space_with_ids, ChemicalSpace, Fingerprint};
use crate::error::{Error, Result};
use crate::fit::{Diagnostics, FittedModel};
use crate::laplace::Dataset;
use crate::params::ModelParams;
use crate::predict::Prediction;

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn headers(path: &Path, rdr: &mut csv::Reader<fs::File>) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect())
}

fn column(path: &Path, header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| parse_err(path, 1, format!("missing column {name:?}")))
}

/// Covariate columns `x1..xp`, which must be contiguous from `x1`.
fn covariate_columns(path: &Path, header: &[String]) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (c, h) in header.iter().enumerate() {
        if let Some(k) = h.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
            found.push((k, c));
        }
    }
    found.sort_unstable();
    for (i, &(k, _)) in found.iter().enumerate() {
        if k != i + 1 {
            return Err(parse_err(path, 1, format!("missing covariate column \"x{}\"", i + 1)));
        }
    }
    Ok(found.into_iter().map(|(_, c)| c).collect())
}

/// Reads `id,bits` rows into a chemical space.
pub fn read_fingerprints(path: &Path) -> Result<ChemicalSpace> {
    let (ids, fps, _) = read_fingerprint_rows(path)?;
    build_space_with_ids(fps, ids).map_err(|e| match e {
        Error::DuplicateCompound { first, second } => {
            Error::Data(format!("{}: compound on row {} duplicates row {}", path.display(), second + 1, first + 1))
        }
        other => other,
    })
}

/// Rows of a fingerprint file, with any `x1..xp` columns.
pub fn read_fingerprint_rows(path: &Path) -> Result<(Vec<String>, Vec<Fingerprint>, Vec<Vec<f64>>)> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    let id_col = column(path, &header, "id")?;
    let bits_col = column(path, &header, "bits")?;
    let x_cols = covariate_columns(path, &header)?;
    let mut ids = Vec::new();
    let mut fps = Vec::new();
    let mut xs = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[id_col].to_string();
        if let Some(&prev) = seen.get(&id) {
            return Err(parse_err(path, line, format!("id {id:?} already used on line {prev}")));
        }
        seen.insert(id.clone(), line);
        let fp: Fingerprint = rec[bits_col]
            .parse()
            .map_err(|e: Error| parse_err(path, line, e.to_string()))?;
        let x = x_cols
            .iter()
            .map(|&c| {
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, line, format!("covariate {:?} is not a number", &rec[c])))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        fps.push(fp);
        xs.push(x);
    }
    if fps.is_empty() {
        return Err(parse_err(path, 1, "no fingerprints"));
    }
    Ok((ids, fps, xs))
}

/// Reads `compound_id,y,x1..xp` rows against `space`. `n_classes` defaults
/// to the largest observed class.
pub fn read_experiments(path: &Path, space: Arc<ChemicalSpace>, n_classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    let id_col = column(path, &header, "compound_id")?;
    let y_col = column(path, &header, "y")?;
    let x_cols = covariate_columns(path, &header)?;
    let index: HashMap<&str, usize> = space.ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut y = Vec::new();
    let mut compound = Vec::new();
    let mut x = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = &rec[id_col];
        let l = *index
            .get(id)
            .ok_or_else(|| parse_err(path, line, format!("unknown compound id {id:?}")))?;
        let class: usize = rec[y_col]
            .parse()
            .map_err(|_| parse_err(path, line, format!("class {:?} is not a positive integer", &rec[y_col])))?;
        if class == 0 {
            return Err(parse_err(path, line, "classes are numbered from 1"));
        }
        for &c in &x_cols {
            let v: f64 = rec[c]
                .parse()
                .map_err(|_| parse_err(path, line, format!("covariate {:?} is not a number", &rec[c])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, "covariates must be finite"));
            }
            x.push(v);
        }
        y.push(class);
        compound.push(l);
    }
    if y.is_empty() {
        return Err(parse_err(path, 1, "no experiments"));
    }
    let c = n_classes.unwrap_or_else(|| *y.iter().max().expect("non-empty"));
    let n = y.len();
    let x = DMatrix::from_row_slice(n, x_cols.len(), &x);
    Dataset::new(y, x, compound, space, c)
}

/// `# config: {...}` header carrying the settings behind an output file.
pub fn config_header(config: &serde_json::Value) -> String {
    format!("# config: {}\n", serde_json::to_string(config).expect("JSON value serializes"))
}

/// Writes `body` under the config header.
pub fn write_with_header(path: &Path, config: &serde_json::Value, body: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(config_header(config).as_bytes())?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// `candidate_id,mean_u,var_u,var_u_corrected,p_1..p_C`.
pub fn predictions_csv(ids: &[String], preds: &[Prediction]) -> String {
    let c = preds.first().map_or(0, |p| p.class_probs.len());
    let mut out = String::from("candidate_id,mean_u,var_u,var_u_corrected");
    for j in 1..=c {
        out.push_str(&format!(",p_{j}"));
    }
    out.push('\n');
    for (id, p) in ids.iter().zip(preds) {
        out.push_str(&format!("{id},{},{},", p.mean_u, p.var_u));
        match p.var_u_corrected {
            Some(v) => out.push_str(&v.to_string()),
            None => out.push_str("NA"),
        }
        for q in &p.class_probs {
            out.push_str(&format!(",{q}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundRecord {
    pub id: String,
    pub bits: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub n_classes: usize,
    pub y: Vec<usize>,
    /// One row per observation.
    pub x: Vec<Vec<f64>>,
    /// Positions in `compounds`.
    pub compound_index: Vec<usize>,
}

/// Everything needed to predict from a fit without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub config: serde_json::Value,
    pub params: ModelParams,
    pub parameter_names: Vec<String>,
    pub standard_errors: Option<Vec<f64>>,
    pub loglik: f64,
    pub u_hat: Vec<f64>,
    /// Observed information in the unconstrained coordinates.
    pub info: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
    pub compounds: Vec<CompoundRecord>,
    pub data: TrainingData,
}

pub const MODEL_FORMAT: &str = "chemgp-model-1";

impl ModelFile {
    pub fn from_model(model: &FittedModel, config: serde_json::Value) -> Self {
        let space = model.data.space();
        let d = model.info.nrows();
        ModelFile {
            format: MODEL_FORMAT.into(),
            config,
            params: model.params.clone(),
            parameter_names: model.layout.names(),
            standard_errors: model.standard_errors(),
            loglik: model.loglik(),
            u_hat: model.state.u_hat.iter().copied().collect(),
            info: (0..d).map(|i| model.info.row(i).iter().copied().collect()).collect(),
            diagnostics: model.diagnostics.clone(),
            compounds: space
                .ids()
                .iter()
                .zip(space.compounds())
                .map(|(id, fp)| CompoundRecord {
                    id: id.clone(),
                    bits: fp.clone(),
                })
                .collect(),
            data: TrainingData {
                n_classes: model.data.n_classes(),
                y: model.data.y().to_vec(),
                x: (0..model.data.n()).map(|i| model.data.x_row(i)).collect(),
                compound_index: model.data.compound_index().to_vec(),
            },
        }
    }

    pub fn into_model(self) -> Result<FittedModel> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Data(format!("unsupported model format {:?}", self.format)));
        }
        let (ids, fps): (Vec<String>, Vec<Fingerprint>) =
            self.compounds.into_iter().map(|c| (c.id, c.bits)).unzip();
        let space = Arc::new(build_space_with_ids(fps, ids)?);
        let n = self.data.y.len();
        let p = self.params.beta.len();
        if self.data.x.iter().any(|r| r.len() != p) {
            return Err(Error::Data("covariate rows do not match the coefficients".into()));
        }
        let flat: Vec<f64> = self.data.x.iter().flatten().copied().collect();
        let x = DMatrix::from_row_slice(n, p, &flat);
        let data = Dataset::new(self.data.y, x, self.data.compound_index, space, self.data.n_classes)?;
        let d = self.info.len();
        if self.info.iter().any(|r| r.len() != d) {
            return Err(Error::Data("information matrix is not square".into()));
        }
        let info = DMatrix::from_fn(d, d, |i, j| self.info[i][j]);
        FittedModel::from_parts(self.params, data, DVector::from_vec(self.u_hat), info, self.diagnostics)
    }
}

pub fn save_model(path: &Path, model: &FittedModel, config: serde_json::Value) -> Result<()> {
    let file = ModelFile::from_model(model, config);
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text)?;
    file.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn fingerprints_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "fp.csv", "# made by hand\nid,bits\na,011\nb,101\n");
        let space = read_fingerprints(&p).unwrap();
        assert_eq!(space.len(), 2);
        assert_eq!(space.ids(), &["a", "b"]);
    }

    #[test]
    fn bad_fingerprint_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "fp.csv", "id,bits\na,011\nb,1x1\n");
        match read_fingerprints(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "fp2.csv", "id,bits\na,011\nb,011\n");
        assert!(matches!(read_fingerprints(&p), Err(Error::Data(_))));
    }

    #[test]
    fn experiments_errors() {
        let dir = tempfile::tempdir().unwrap();
        let fp = write(dir.path(), "fp.csv", "id,bits\na,011\nb,101\n");
        let space = Arc::new(read_fingerprints(&fp).unwrap());
        let ok = write(dir.path(), "e.csv", "compound_id,y,x1\na,1,0.5\nb,2,1.0\n");
        let data = read_experiments(&ok, space.clone(), None).unwrap();
        assert_eq!((data.n(), data.p(), data.n_classes()), (2, 1, 2));
        let unknown = write(dir.path(), "e2.csv", "compound_id,y\na,1\nzz,2\n");
        match read_experiments(&unknown, space.clone(), None) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("zz"));
            }
            other => panic!("{other:?}"),
        }
        let gap = write(dir.path(), "e3.csv", "compound_id,y,x2\na,1,0.5\n");
        match read_experiments(&gap, space, None) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("x1")),
            other => panic!("{other:?}"),
        }
    }
}
