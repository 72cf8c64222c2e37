//! Classification dataset: input-matrix encoding of channel gains, one-hot
//! relay labels, log-domain standardization and JSON-lines storage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    sample_instance_with, Assignment, EhParams, GeometryConfig, NetworkInstance, SystemParams,
    DEFAULT_DEMAND_BITS,
};
use crate::par::{self, Exec};
use crate::selection::{bba, SearchOpts};

pub const INPUT_COLS: usize = 4;

/// Number of gains fed to the classifier: `N+K` downlink, `N(K+1)+K` uplink.
pub fn feature_count(n: usize, k: usize) -> usize {
    (n + k) + n * (k + 1) + k
}

pub fn input_rows(n: usize, k: usize) -> usize {
    feature_count(n, k).div_ceil(INPUT_COLS)
}

/// Flatten downlink gains, then `ul_src` row-major, then relay uplinks, into
/// a zero-padded `rows x 4` matrix.
pub fn build_input_matrix(inst: &NetworkInstance) -> Vec<[f64; INPUT_COLS]> {
    let flat: Vec<f64> = inst
        .dl_gain
        .iter()
        .chain(inst.ul_src.iter().flatten())
        .chain(inst.ul_relay.iter())
        .copied()
        .collect();
    let rows = input_rows(inst.n_sources, inst.k_relays);
    let mut out = vec![[0.0; INPUT_COLS]; rows];
    for (idx, v) in flat.into_iter().enumerate() {
        out[idx / INPUT_COLS][idx % INPUT_COLS] = v;
    }
    out
}

/// Inverse of [`build_input_matrix`] given the non-gain parameters.
pub fn instance_from_input(
    input: &[[f64; INPUT_COLS]],
    n: usize,
    k: usize,
    demand: f64,
    eh: EhParams,
    sys: SystemParams,
) -> Result<NetworkInstance> {
    if input.len() != input_rows(n, k) {
        return Err(Error::Shape(format!("expected {} input rows, got {}", input_rows(n, k), input.len())));
    }
    let flat: Vec<f64> = input.iter().flatten().copied().collect();
    let mut it = flat.into_iter();
    let dl_gain: Vec<f64> = it.by_ref().take(n + k).collect();
    let ul_src = (0..n).map(|_| it.by_ref().take(k + 1).collect()).collect();
    let ul_relay: Vec<f64> = it.by_ref().take(k).collect();
    let inst = NetworkInstance {
        n_sources: n,
        k_relays: k,
        dl_gain,
        ul_src,
        ul_relay,
        demand: vec![demand; n],
        eh: vec![eh; n + k],
        sys,
    };
    inst.validate()?;
    Ok(inst)
}

/// `(K+1) x N` one-hot matrix: entry `(j, i)` is 1 iff source `i` uses `j`.
pub fn label_to_matrix(a: &Assignment, n: usize, k: usize) -> Result<Vec<Vec<u8>>> {
    a.validate(n, k)?;
    let mut m = vec![vec![0u8; n]; k + 1];
    for (i, &j) in a.choice.iter().enumerate() {
        m[j][i] = 1;
    }
    Ok(m)
}

pub fn matrix_to_label(m: &[Vec<u8>]) -> Result<Assignment> {
    let n = m.first().map_or(0, Vec::len);
    let mut choice = Vec::with_capacity(n);
    for i in 0..n {
        let ones: Vec<usize> = (0..m.len()).filter(|&j| m[j][i] == 1).collect();
        match ones.as_slice() {
            [j] => choice.push(*j),
            _ => return Err(Error::Format(format!("column {i} is not one-hot"))),
        }
    }
    Ok(Assignment::new(choice))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub id: u64,
    pub input: Vec<[f64; INPUT_COLS]>,
    pub label: Assignment,
    pub optimal_total: f64,
}

/// Per-position log10 standardization fitted on the training split.
/// Padded positions are excluded from fitting and map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub features: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(samples: &[DatasetSample], features: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParameter("cannot fit normalization on an empty split".into()));
        }
        let count = samples.len() as f64;
        let mut mean = vec![0.0; features];
        for s in samples {
            for (f, v) in s.input.iter().flatten().take(features).enumerate() {
                mean[f] += v.log10();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; features];
        for s in samples {
            for (f, v) in s.input.iter().flatten().take(features).enumerate() {
                var[f] += (v.log10() - mean[f]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        if let Some(f) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter(format!("feature {f} is constant; cannot standardize")));
        }
        Ok(Self { features, mean, std })
    }

    /// Standardized, row-major flattened input (`rows * 4` values).
    pub fn apply(&self, input: &[[f64; INPUT_COLS]]) -> Vec<f64> {
        input
            .iter()
            .flatten()
            .enumerate()
            .map(|(f, v)| if f < self.features { (v.log10() - self.mean[f]) / self.std[f] } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub k: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub eh: EhParams,
    pub sys: SystemParams,
    pub demand: f64,
    pub search: SearchOpts,
}

impl DatasetConfig {
    pub fn new(n: usize, k: usize, train: usize, val: usize, test: usize, seed: u64) -> Self {
        Self {
            n,
            k,
            train,
            val,
            test,
            seed,
            geometry: GeometryConfig::default(),
            eh: EhParams::default(),
            sys: SystemParams::default(),
            demand: DEFAULT_DEMAND_BITS,
            search: SearchOpts::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub k: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub rows: usize,
    pub normalization: Normalizer,
    pub geometry: GeometryConfig,
    pub eh: EhParams,
    pub sys: SystemParams,
    pub demand: f64,
}

impl DatasetMeta {
    /// Rebuild the network instance behind a stored sample.
    pub fn instance(&self, sample: &DatasetSample) -> Result<NetworkInstance> {
        instance_from_input(&sample.input, self.n, self.k, self.demand, self.eh, self.sys)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<DatasetSample>,
    pub val: Vec<DatasetSample>,
    pub test: Vec<DatasetSample>,
}

/// Sample for global id `id`: its own ChaCha stream under the master seed.
pub fn sample_for_id(cfg: &DatasetConfig, id: u64) -> Result<(NetworkInstance, DatasetSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id);
    let mut inst = sample_instance_with(&mut rng, cfg.n, cfg.k, &cfg.geometry, &cfg.eh, &cfg.sys)?;
    inst.demand = vec![cfg.demand; cfg.n];
    let best = bba(&inst, &cfg.search)?;
    let sample = DatasetSample {
        id,
        input: build_input_matrix(&inst),
        label: best.assignment,
        optimal_total: best.schedule.total,
    };
    Ok((inst, sample))
}

/// Sample, label with branch-and-bound and split. Deterministic in
/// `cfg.seed` regardless of `exec`.
pub fn generate_dataset(cfg: &DatasetConfig, exec: Exec) -> Result<Dataset> {
    if cfg.n == 0 || cfg.train == 0 || cfg.val == 0 || cfg.test == 0 {
        return Err(Error::InvalidParameter("n and all split sizes must be positive".into()));
    }
    let mut all = par::try_map_indexed(exec, cfg.total(), |id| sample_for_id(cfg, id as u64).map(|(_, s)| s))?;
    let test = all.split_off(cfg.train + cfg.val);
    let val = all.split_off(cfg.train);
    let train = all;
    let normalization = Normalizer::fit(&train, feature_count(cfg.n, cfg.k))?;
    let meta = DatasetMeta {
        n: cfg.n,
        k: cfg.k,
        train: cfg.train,
        val: cfg.val,
        test: cfg.test,
        seed: cfg.seed,
        rows: input_rows(cfg.n, cfg.k),
        normalization,
        geometry: cfg.geometry,
        eh: cfg.eh,
        sys: cfg.sys,
        demand: cfg.demand,
    };
    Ok(Dataset { meta, train, val, test })
}

/// Paths `<prefix>.train.jsonl`, `.val.jsonl`, `.test.jsonl`, `.meta.json`.
pub fn split_paths(prefix: &Path) -> [PathBuf; 4] {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    [with(".train.jsonl"), with(".val.jsonl"), with(".test.jsonl"), with(".meta.json")]
}

fn write_split(path: &Path, samples: &[DatasetSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_split(path: &Path) -> Result<Vec<DatasetSample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let [train, val, test, meta] = split_paths(prefix);
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_split(&train, &self.train)?;
        write_split(&val, &self.val)?;
        write_split(&test, &self.test)?;
        let mut w = BufWriter::new(File::create(meta)?);
        serde_json::to_writer_pretty(&mut w, &self.meta)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let [train, val, test, meta] = split_paths(prefix);
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(meta)?))?;
        let ds = Self { meta, train: read_split(&train)?, val: read_split(&val)?, test: read_split(&test)? };
        if ds.train.len() != ds.meta.train || ds.val.len() != ds.meta.val || ds.test.len() != ds.meta.test {
            return Err(Error::Format("split sizes disagree with meta".into()));
        }
        Ok(ds)
    }
}
