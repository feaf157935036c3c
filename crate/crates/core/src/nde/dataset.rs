use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group::Grid;
use crate::models::ForwardModel;

pub const DATASET_MAGIC: &[u8; 8] = b"GNPEDATA";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.02;

/// Header of the binary dataset container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub model: String,
    pub param_names: Vec<String>,
    pub grid: Grid,
    pub records: usize,
    /// The last `validation` records form the validation split.
    pub validation: usize,
    pub data_len: usize,
}

/// Simulated `(θ, x)` pairs. The last `n_val` rows are the validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDataset {
    pub model: String,
    pub param_names: Vec<String>,
    pub grid: Grid,
    pub thetas: Array2<f64>,
    pub xs: Arc<Array2<f64>>,
    pub n_val: usize,
}

impl TrainingDataset {
    pub fn new(
        model: String,
        param_names: Vec<String>,
        grid: Grid,
        thetas: Array2<f64>,
        xs: Array2<f64>,
        n_val: usize,
    ) -> Result<Self> {
        if thetas.nrows() != xs.nrows() {
            return Err(Error::structural("targets and contexts differ in count"));
        }
        if n_val >= thetas.nrows().max(1) {
            return Err(Error::structural("validation split leaves no training data"));
        }
        if param_names.len() != thetas.ncols() {
            return Err(Error::structural("parameter names do not match targets"));
        }
        Ok(Self {
            model,
            param_names,
            grid,
            thetas,
            xs: Arc::new(xs),
            n_val,
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_train(&self) -> usize {
        self.len() - self.n_val
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.n_train()
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.n_train()..self.len()
    }

    pub fn theta(&self, i: usize) -> ArrayView1<'_, f64> {
        self.thetas.row(i)
    }

    pub fn x(&self, i: usize) -> ArrayView1<'_, f64> {
        self.xs.row(i)
    }

    /// A view that keeps only the given parameter columns as targets. Contexts
    /// are shared, not copied.
    pub fn select_targets(&self, cols: &[usize]) -> Result<Self> {
        if cols.iter().any(|&c| c >= self.thetas.ncols()) {
            return Err(Error::structural("target column out of range"));
        }
        Ok(Self {
            model: self.model.clone(),
            param_names: cols.iter().map(|&c| self.param_names[c].clone()).collect(),
            grid: self.grid.clone(),
            thetas: self.thetas.select(ndarray::Axis(1), cols),
            xs: Arc::clone(&self.xs),
            n_val: self.n_val,
        })
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            model: self.model.clone(),
            param_names: self.param_names.clone(),
            grid: self.grid.clone(),
            records: self.len(),
            validation: self.n_val,
            data_len: self.xs.ncols(),
        }
    }

    /// Binary layout: magic, `u32` version, `u64` header length, JSON header,
    /// then per record `d` target values followed by `L` data values, all
    /// little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * (self.thetas.ncols() + self.xs.ncols()));
        for i in 0..self.len() {
            buf.clear();
            for v in self.thetas.row(i).iter().chain(self.xs.row(i).iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: DatasetHeader = serde_json::from_slice(&header)?;
        let d = h.param_names.len();
        let mut thetas = Array2::zeros((h.records, d));
        let mut xs = Array2::zeros((h.records, h.data_len));
        let mut rec = vec![0u8; 8 * (d + h.data_len)];
        for i in 0..h.records {
            r.read_exact(&mut rec)?;
            let mut vals = rec.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
            for v in thetas.row_mut(i).iter_mut().chain(xs.row_mut(i).iter_mut()) {
                *v = vals.next().expect("record length");
            }
        }
        Self::new(h.model, h.param_names, h.grid, thetas, xs, h.validation)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the binary encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to memory");
        hex::encode(Sha256::digest(&bytes))
    }

    /// CSV preview of the first `rows` records: split, parameters, then the
    /// first `bins` data values.
    pub fn to_csv(&self, rows: usize, bins: usize) -> String {
        let bins = bins.min(self.xs.ncols());
        let mut out = String::from("split");
        for n in &self.param_names {
            out.push(',');
            out.push_str(n);
        }
        for b in 0..bins {
            out.push_str(&format!(",x{b}"));
        }
        out.push('\n');
        for i in 0..rows.min(self.len()) {
            out.push_str(if i < self.n_train() { "train" } else { "validation" });
            for v in self.thetas.row(i).iter().chain(self.xs.row(i).iter().take(bins)) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Number of validation records for `n` examples: the rounded fraction, at
/// least one.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Draw `n` prior samples and simulate them. Example `i` uses its own
/// ChaCha8 stream, so the result does not depend on the number of workers.
pub fn generate_npe_dataset(
    model: &dyn ForwardModel,
    n: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<TrainingDataset> {
    if n < 2 {
        return Err(Error::structural("a dataset needs at least two examples"));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config("validation_fraction", "must lie in [0, 1)"));
    }
    let sims: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let theta = model.sample_prior(&mut rng);
            let sim = model.simulate(&theta, &mut rng)?;
            Ok((theta, sim.x))
        })
        .collect::<Result<_>>()?;
    let d = model.param_dim();
    let l = model.data_len();
    let mut thetas = Array2::zeros((n, d));
    let mut xs = Array2::zeros((n, l));
    for (i, (t, x)) in sims.into_iter().enumerate() {
        thetas.row_mut(i).assign(&ArrayView1::from(&t));
        xs.row_mut(i).assign(&ArrayView1::from(&x));
    }
    TrainingDataset::new(
        model.name().to_string(),
        model.param_names(),
        model.representation().grid.clone(),
        thetas,
        xs,
        validation_count(n, validation_fraction),
    )
}
