//! Synthetic planted-teacher tasks and CSV ingestion.

use std::io::Read;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Prng};
use crate::model::{Activation, AdapterLayer, Batch, LossKind, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Planted(PlantedSpec),
    File { path: String, sha256: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    pub input_dim: usize,
    pub output_dim: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Teacher-student regression task whose per-layer update ranks are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub layer_dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            layer_dims: vec![16, 32, 8],
            ranks: vec![6, 2],
            noise_std: 0.01,
            n_train: 2048,
            n_val: 256,
            n_test: 256,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer_dims needs at least two positive dims".into()));
        }
        let n_layers = self.layer_dims.len() - 1;
        if self.ranks.len() != n_layers {
            return Err(Error::InvalidArgument(format!(
                "{} planted ranks for {n_layers} layers",
                self.ranks.len()
            )));
        }
        for (l, &k) in self.ranks.iter().enumerate() {
            let cap = self.layer_dims[l].min(self.layer_dims[l + 1]);
            if k > cap {
                return Err(Error::InvalidArgument(format!(
                    "planted rank {k} exceeds min dim {cap} of layer {l}"
                )));
            }
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument("noise_std must be finite and >= 0".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("every split needs at least one row".into()));
        }
        Ok(())
    }
}

/// Rank-`k` outer-product sum scaled to unit Frobenius norm, returned as thin
/// factors. `k = 0` yields a zero rank-1 factorization.
fn planted_update(d1: usize, d2: usize, k: usize, rng: &mut Prng) -> (Matrix, Matrix) {
    if k == 0 {
        return (Matrix::zeros(d1, 1), Matrix::zeros(1, d2));
    }
    let u = Matrix::from_fn(d1, k, |_, _| rng.normal());
    let v = Matrix::from_fn(k, d2, |_, _| rng.normal());
    let norm = u.matmul(&v).expect("conformable").frobenius_norm();
    (u.scale(1.0 / norm), v)
}

/// Builds the teacher and samples train/val/test splits from it.
pub fn gen_planted(spec: &PlantedSpec) -> Result<(Dataset, Network)> {
    spec.validate()?;
    let root = Prng::new(spec.seed);
    let mut base_rng = root.stream("base");
    let mut upd_rng = root.stream("teacher-update");
    let mut layers = Vec::with_capacity(spec.ranks.len());
    for (l, w) in spec.layer_dims.windows(2).enumerate() {
        let (d1, d2) = (w[0], w[1]);
        let scale = 1.0 / (d1 as f64).sqrt();
        let w0 = Matrix::from_fn(d1, d2, |_, _| scale * base_rng.normal());
        let (a, b) = planted_update(d1, d2, spec.ranks[l], &mut upd_rng);
        layers.push(AdapterLayer::new(l, w0, a, b)?);
    }
    let teacher = Network::new(layers, Activation::Tanh, LossKind::MeanSquaredError)?;

    let d_in = spec.layer_dims[0];
    let split = |label: &str, n: usize| -> Result<Batch> {
        let mut x_rng = root.stream_indexed("inputs", fnv_label(label));
        let mut e_rng = root.stream_indexed("noise", fnv_label(label));
        let x = Matrix::from_fn(n, d_in, |_, _| x_rng.normal());
        let clean = teacher.predict(&x)?;
        let noise = Matrix::from_fn(n, clean.cols(), |_, _| spec.noise_std * e_rng.normal());
        let y = clean.add(&noise)?;
        Batch::new(x, y)
    };
    let data = Dataset {
        train: split("train", spec.n_train)?,
        val: split("val", spec.n_val)?,
        test: split("test", spec.n_test)?,
        input_dim: d_in,
        output_dim: *spec.layer_dims.last().expect("validated"),
        provenance: Provenance::Planted(spec.clone()),
    };
    Ok((data, teacher))
}

fn fnv_label(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// A fresh student sharing the teacher's frozen weights: `A ~ N(0, 1/d_in)`, `B = 0`.
pub fn student_from(teacher: &Network, r0: usize, rng: &mut Prng) -> Result<Network> {
    let layers = teacher
        .layers
        .iter()
        .map(|l| {
            let scale = 1.0 / (l.d_in() as f64).sqrt();
            let a = Matrix::from_fn(l.d_in(), r0, |_, _| scale * rng.normal());
            AdapterLayer::new(l.layer_id, l.w0().clone(), a, Matrix::zeros(r0, l.d_out()))
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, teacher.activation, teacher.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Train/val/test fractions; must sum to 1.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl CsvSchema {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            output_dim,
            fractions: [0.8, 0.1, 0.1],
            seed,
        }
    }
}

/// Reads `x0,…,y0,…` rows and splits them by a seeded per-row hash.
/// Parse errors report 1-based data-row and column numbers.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut ds = parse_csv(&bytes, schema)?;
    ds.provenance = Provenance::File {
        path: path.display().to_string(),
        sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
    };
    Ok(ds)
}

/// [`load_csv`] over in-memory bytes; provenance records an empty path.
pub fn parse_csv(bytes: &[u8], schema: &CsvSchema) -> Result<Dataset> {
    let [ft, fv, fe] = schema.fractions;
    if fractions_invalid(ft, fv, fe) {
        return Err(Error::InvalidArgument(format!("bad split fractions {:?}", schema.fractions)));
    }
    let width = schema.input_dim + schema.output_dim;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = reader.headers().map_err(|e| Error::Parse {
        row: 0,
        col: 0,
        msg: e.to_string(),
    })?;
    check_header(header, schema)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::DimensionMismatch {
                op: "csv row",
                left: (row, rec.len()),
                right: (row, width),
            });
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("{field:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    let n = rows.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!("{n} rows cannot fill every split")));
    }

    let root = Prng::new(schema.seed);
    let mut order: Vec<(u64, usize)> = (0..n)
        .map(|i| (root.stream_indexed("csv-split", i as u64).next_u64(), i))
        .collect();
    order.sort_unstable();
    let pick = |idx: &[(u64, usize)]| -> Result<Batch> {
        let mut idx: Vec<usize> = idx.iter().map(|&(_, i)| i).collect();
        idx.sort_unstable();
        let x = Matrix::from_fn(idx.len(), schema.input_dim, |r, c| rows[idx[r]][c]);
        let y = Matrix::from_fn(idx.len(), schema.output_dim, |r, c| rows[idx[r]][schema.input_dim + c]);
        Batch::new(x, y)
    };
    Ok(Dataset {
        train: pick(&order[..n_train])?,
        val: pick(&order[n_train..n_train + n_val])?,
        test: pick(&order[n_train + n_val..])?,
        input_dim: schema.input_dim,
        output_dim: schema.output_dim,
        provenance: Provenance::File {
            path: String::new(),
            sha256: String::new(),
        },
    })
}

fn fractions_invalid(ft: f64, fv: f64, fe: f64) -> bool {
    [ft, fv, fe].iter().any(|f| !(*f > 0.0)) || ((ft + fv + fe) - 1.0).abs() > 1e-9
}

fn check_header(header: &csv::StringRecord, schema: &CsvSchema) -> Result<()> {
    let expected: Vec<String> = (0..schema.input_dim)
        .map(|i| format!("x{i}"))
        .chain((0..schema.output_dim).map(|i| format!("y{i}")))
        .collect();
    if header.len() != expected.len() {
        return Err(Error::DimensionMismatch {
            op: "csv header",
            left: (0, header.len()),
            right: (0, expected.len()),
        });
    }
    for (c, (got, want)) in header.iter().zip(&expected).enumerate() {
        if got.trim() != want {
            return Err(Error::Parse {
                row: 0,
                col: c + 1,
                msg: format!("header {got:?}, expected {want:?}"),
            });
        }
    }
    Ok(())
}

/// Writes inputs and targets in the format [`load_csv`] reads.
pub fn write_csv(path: impl AsRef<Path>, inputs: &Matrix, targets: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let header: Vec<String> = (0..inputs.cols())
        .map(|i| format!("x{i}"))
        .chain((0..targets.cols()).map(|i| format!("y{i}")))
        .collect();
    w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for r in 0..inputs.rows() {
        let rec: Vec<String> = inputs.row(r).iter().chain(targets.row(r)).map(|v| format!("{v:?}")).collect();
        w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
