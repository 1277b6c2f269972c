//! Line-oriented dataset files and the forward simulation of one record.
//!
//! Both parameter files and dataset files hold one JSON object per line.
//! Lines starting with `#` are comments; writers put the schema and the full
//! invocation there.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{generate_seeded, GeometryConfig, StructureParams};
use crate::homogenization::{effective_elasticity, Materials, SolverConfig};
use crate::tensor::{relative_asymmetry, ElasticityTensor};

pub const PARAMS_SCHEMA: &str = "spinodoid-params/1";
pub const DATASET_SCHEMA: &str = "spinodoid-dataset/1";

/// Records with a relative minimum eigenvalue below this are rejected.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Simulation settings stored with every record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub seed: u64,
    pub resolution: usize,
    pub n_waves: usize,
    pub beta: f64,
    pub tol: f64,
    pub iterations: usize,
    pub asymmetry: f64,
}

/// One line of a dataset file. Failed simulations keep their parameters and
/// the error message instead of a tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub theta: [f64; 3],
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mandel: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub meta: RecordMeta,
}

impl DatasetLine {
    pub fn params(&self) -> StructureParams {
        StructureParams { theta: self.theta, rho: self.rho }
    }

    pub fn is_failed(&self) -> bool {
        self.mandel.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub params: StructureParams,
    pub tensor: ElasticityTensor,
    pub meta: RecordMeta,
}

impl DatasetRecord {
    pub fn to_line(&self) -> DatasetLine {
        DatasetLine {
            theta: self.params.theta,
            rho: self.params.rho,
            mandel: Some(self.tensor.row_major()),
            error: None,
            meta: self.meta,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn new(records: Vec<DatasetRecord>) -> Self {
        Dataset { records }
    }

    /// Builds a dataset from parameter/tensor pairs with zeroed metadata.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (StructureParams, ElasticityTensor)>) -> Self {
        let meta =
            RecordMeta { seed: 0, resolution: 0, n_waves: 0, beta: 0.0, tol: 0.0, iterations: 0, asymmetry: 0.0 };
        Dataset { records: pairs.into_iter().map(|(params, tensor)| DatasetRecord { params, tensor, meta }).collect() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn params(&self) -> Vec<StructureParams> {
        self.records.iter().map(|r| r.params).collect()
    }

    pub fn targets(&self) -> Vec<ElasticityTensor> {
        self.records.iter().map(|r| r.tensor.clone()).collect()
    }

    /// First `n` records.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset { records: self.records.iter().take(n).cloned().collect() }
    }

    /// Content hash of parameters and tensors (hex, 16 digits).
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            for v in r.params.as_array().iter().chain(r.tensor.row_major().iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize()[..8])
    }

    /// Successful lines become records; failed lines are skipped. Each record
    /// is checked for domain, symmetry and positive semidefiniteness.
    pub fn from_lines(lines: &[(usize, DatasetLine)]) -> Result<Self> {
        let mut records = Vec::new();
        for (line_no, line) in lines {
            let Some(mandel) = &line.mandel else { continue };
            let err = |msg: String| Error::Parse { line: *line_no, msg };
            let params = line.params();
            params.validate().map_err(|e| err(e.to_string()))?;
            let tensor = ElasticityTensor::from_row_major(mandel).map_err(|e| err(e.to_string()))?;
            if tensor.min_eigenvalue() < -PSD_TOLERANCE * tensor.norm() {
                return Err(err("stiffness is not positive semidefinite".into()));
            }
            records.push(DatasetRecord { params, tensor, meta: line.meta });
        }
        Ok(Dataset { records })
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        Self::from_lines(&read_lines(r)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }

    pub fn write<W: Write>(&self, mut w: W, invocation: &str) -> Result<()> {
        writeln!(w, "{}", header_line(DATASET_SCHEMA, invocation))?;
        for r in &self.records {
            writeln!(w, "{}", to_json_line(&r.to_line())?)?;
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `# {"schema": …, "invocation": …}`.
pub fn header_line(schema: &str, invocation: &str) -> String {
    let v = serde_json::json!({ "schema": schema, "invocation": invocation });
    format!("# {v}")
}

pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

fn parse_json_lines<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value = serde_json::from_str(trimmed).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// All non-comment lines of a dataset file with their 1-based line numbers.
pub fn read_lines<R: Read>(r: R) -> Result<Vec<(usize, DatasetLine)>> {
    parse_json_lines(r)
}

/// One `{"theta": [...], "rho": ...}` object per line.
pub fn write_params<W: Write>(mut w: W, params: &[StructureParams], invocation: &str) -> Result<()> {
    writeln!(w, "{}", header_line(PARAMS_SCHEMA, invocation))?;
    for p in params {
        writeln!(w, "{}", to_json_line(p)?)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: R) -> Result<Vec<StructureParams>> {
    parse_json_lines::<StructureParams, R>(r)?
        .into_iter()
        .map(|(line, p)| {
            p.validate().map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            Ok(p)
        })
        .collect()
}

fn param_bytes(params: &StructureParams) -> impl Iterator<Item = u8> {
    params.as_array().into_iter().flat_map(|v| v.to_le_bytes())
}

/// Stable key of a parameter tuple (hex SHA-256 of the bit patterns).
pub fn params_key(params: &StructureParams) -> String {
    let bytes: Vec<u8> = param_bytes(params).collect();
    hex(&Sha256::digest(&bytes))
}

/// Geometry seed of one record, independent of its position in the file.
pub fn record_seed(master: u64, params: &StructureParams) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(param_bytes(params).collect::<Vec<u8>>());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Geometry generation and homogenization of one parameter tuple. Errors
/// become a failed line rather than aborting.
pub fn simulate_record(
    params: &StructureParams,
    geometry: &GeometryConfig,
    materials: &Materials,
    solver: &SolverConfig,
    seed: u64,
) -> DatasetLine {
    let mut meta = RecordMeta {
        seed,
        resolution: geometry.resolution,
        n_waves: geometry.n_waves,
        beta: geometry.wavenumber,
        tol: solver.tolerance,
        iterations: 0,
        asymmetry: 0.0,
    };
    let outcome =
        generate_seeded(params, geometry, seed).and_then(|grid| effective_elasticity(&grid, materials, solver));
    match outcome {
        Ok(h) => {
            meta.iterations = h.max_iterations();
            meta.asymmetry = h.asymmetry;
            DatasetLine { theta: params.theta, rho: params.rho, mandel: Some(h.tensor.row_major()), error: None, meta }
        }
        Err(e) => DatasetLine { theta: params.theta, rho: params.rho, mandel: None, error: Some(e.to_string()), meta },
    }
}

/// Symmetry of a raw row-major Mandel list (diagnostic for readers).
pub fn row_major_asymmetry(values: &[f64]) -> Option<f64> {
    (values.len() == 36).then(|| relative_asymmetry(&nalgebra::Matrix6::from_row_slice(values)))
}
