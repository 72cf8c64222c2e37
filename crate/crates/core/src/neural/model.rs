//! Trained network state, inference and the model file format.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, Head};
use super::graph::{BnStats, Graph, ParamKind, Tape, BN_MOMENTUM};
use super::loss::LogitShape;
use crate::dataset::{Normalizer, INPUT_COLS};
use crate::error::{Error, Result};
use crate::model::Assignment;

/// Samples per inference chunk.
const INFER_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchSpec,
    pub graph: Graph,
    pub params: Vec<Vec<f64>>,
    pub stats: Vec<BnStats>,
    pub seed: u64,
    pub mode: Mode,
    /// Input standardization the model was trained with.
    pub normalizer: Option<Normalizer>,
}

/// Exact trainable scalar count of an architecture.
pub fn param_count(arch: &ArchSpec) -> Result<usize> {
    Ok(Graph::compile(arch)?.param_count())
}

impl Model {
    /// Fan-in uniform weights and biases, unit batchnorm scale, zero shift.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let graph = Graph::compile(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = graph
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Weight | ParamKind::Bias => {
                    let bound = 1.0 / (p.fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..p.len).map(|_| dist.sample(&mut rng)).collect()
                }
                ParamKind::Scale => vec![1.0; p.len],
                ParamKind::Shift => vec![0.0; p.len],
            })
            .collect();
        let stats = graph.stat_channels.iter().map(|&c| BnStats { mean: vec![0.0; c], var: vec![1.0; c] }).collect();
        Ok(Self { arch: arch.clone(), graph, params, stats, seed, mode: Mode::Infer, normalizer: None })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn logit_shape(&self) -> LogitShape {
        let (classes, cols) = self.arch.logit_shape();
        LogitShape { classes, cols }
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_rows * INPUT_COLS
    }

    /// Forward pass in the current [`Mode`]. In train mode batchnorm
    /// running statistics are updated.
    pub fn forward_tape(&mut self, x: &[f64], b: usize) -> Result<Tape> {
        let train = self.mode == Mode::Train;
        let tape = self.graph.forward(&self.params, &self.stats, x, b, train)?;
        if train {
            for (st, (mean, var)) in self.stats.iter_mut().zip(tape.batch_stats()) {
                for c in 0..st.mean.len() {
                    st.mean[c] = (1.0 - BN_MOMENTUM) * st.mean[c] + BN_MOMENTUM * mean[c];
                    st.var[c] = (1.0 - BN_MOMENTUM) * st.var[c] + BN_MOMENTUM * var[c];
                }
            }
        }
        Ok(tape)
    }

    /// Sample-major logits `[B][classes][cols]` from a network output.
    pub fn head_logits(&self, out: &[f64], b: usize) -> Vec<f64> {
        match self.arch.head {
            Head::PerSource => out.to_vec(),
            Head::Joint => transpose(out, out.len() / b, b),
        }
    }

    /// Inverse of [`Self::head_logits`] for gradients.
    pub fn head_grad(&self, g: &[f64], b: usize) -> Vec<f64> {
        match self.arch.head {
            Head::PerSource => g.to_vec(),
            Head::Joint => transpose(g, b, g.len() / b),
        }
    }

    /// Infer-mode logits for standardized inputs `[count][rows * 4]`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let per = self.input_len();
        if x.len() % per != 0 {
            return Err(Error::Shape(format!("{} input values are not a multiple of {per}", x.len())));
        }
        let mut out = Vec::with_capacity(x.len() / per * self.logit_shape().per_sample());
        for chunk in x.chunks(INFER_CHUNK * per) {
            let b = chunk.len() / per;
            let tape = self.graph.forward(&self.params, &self.stats, chunk, b, false)?;
            out.extend(self.head_logits(tape.output(), b));
        }
        Ok(out)
    }

    /// Decode one sample's logits; ties go to the smallest class.
    pub fn decode(&self, logits: &[f64]) -> Assignment {
        let shape = self.logit_shape();
        let cols: Vec<usize> = (0..shape.cols)
            .map(|i| {
                let mut best = 0;
                for j in 1..shape.classes {
                    if logits[j * shape.cols + i] > logits[best * shape.cols + i] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        match self.arch.head {
            Head::PerSource => Assignment::new(cols),
            Head::Joint => Assignment::from_index(cols[0] as u64, self.arch.n, self.arch.k),
        }
    }

    /// Predictions for standardized inputs.
    pub fn predict_batch(&self, x: &[f64]) -> Result<Vec<Assignment>> {
        let logits = self.logits(x)?;
        Ok(logits.chunks(self.logit_shape().per_sample()).map(|z| self.decode(z)).collect())
    }

    /// Predict from a raw input matrix, standardizing with the stored
    /// normalization when present.
    pub fn predict(&self, input: &[[f64; INPUT_COLS]]) -> Result<Assignment> {
        let x = match &self.normalizer {
            Some(norm) => norm.apply(input),
            None => input.iter().flatten().copied().collect(),
        };
        Ok(self.predict_batch(&x)?.remove(0))
    }

    /// Class targets per column for `a`, matching [`Self::logit_shape`].
    pub fn targets(&self, a: &Assignment) -> Vec<usize> {
        match self.arch.head {
            Head::PerSource => a.choice.clone(),
            Head::Joint => vec![a.to_index(self.arch.k) as usize],
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct StatsBlob {
    mean: String,
    var: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    arch: ArchSpec,
    seed: u64,
    param_count: usize,
    normalizer: Option<Normalizer>,
    /// Little-endian f64 arrays, base64, in layer order.
    params: Vec<String>,
    stats: Vec<StatsBlob>,
}

const FORMAT: &str = "relaynet-model/1";

fn encode(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_blob(s: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Format(format!("bad weight blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("weight blob length is not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: FORMAT.into(),
            arch: self.arch.clone(),
            seed: self.seed,
            param_count: self.param_count(),
            normalizer: self.normalizer.clone(),
            params: self.params.iter().map(|p| encode(p)).collect(),
            stats: self.stats.iter().map(|s| StatsBlob { mean: encode(&s.mean), var: encode(&s.var) }).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != FORMAT {
            return Err(Error::Format(format!("unknown model format {:?}", file.format)));
        }
        let mut model = Model::init(&file.arch, file.seed)?;
        if file.params.len() != model.params.len() || file.stats.len() != model.stats.len() {
            return Err(Error::Format("weight arrays do not match the architecture".into()));
        }
        for (dst, blob) in model.params.iter_mut().zip(&file.params) {
            let v = decode_blob(blob)?;
            if v.len() != dst.len() {
                return Err(Error::Format(format!("weight array of {} values, expected {}", v.len(), dst.len())));
            }
            *dst = v;
        }
        for (dst, blob) in model.stats.iter_mut().zip(&file.stats) {
            let (mean, var) = (decode_blob(&blob.mean)?, decode_blob(&blob.var)?);
            if mean.len() != dst.mean.len() || var.len() != dst.var.len() {
                return Err(Error::Format("batchnorm statistics do not match the architecture".into()));
            }
            *dst = BnStats { mean, var };
        }
        model.normalizer = file.normalizer;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::arch::{make_rel_net, make_sc_net, make_skin_net, make_student, Layer, STUDENT_NODES};

    fn all_archs() -> Vec<ArchSpec> {
        let mut v = Vec::new();
        for n in 1..=5 {
            v.push(make_sc_net(n, 2).unwrap());
            v.push(make_skin_net(n, 2).unwrap());
            v.push(make_student(n, 2, &STUDENT_NODES).unwrap());
            v.push(make_rel_net(n, 2).unwrap());
        }
        v
    }

    #[test]
    fn small_param_counts() {
        let dense = Graph::compile_layers(1, &[Layer::Dense { out: 10 }]).unwrap();
        assert_eq!(dense.param_count(), 50);
        let conv = Graph::compile_layers(2, &[Layer::Conv2d { out: 16, kernel: (2, 2) }]).unwrap();
        assert_eq!(conv.param_count(), 80);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Model::init(&make_sc_net(3, 2).unwrap(), 1).unwrap();
        m.params.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = 0.0));
        let z = m.logits(&vec![0.3; 2 * m.input_len()]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_concat_and_pool_shapes() {
        let g = Graph::compile_layers(
            3,
            &[
                Layer::Conv2d { out: 5, kernel: (2, 2) },
                Layer::SkipConcat { from: 0 },
                Layer::AdaptiveAvgPool { h: 2, w: 3 },
            ],
        )
        .unwrap();
        assert_eq!(g.output_dims().c, 10);
        // all-zero conv weights and bias c give a constant map
        let mut params: Vec<Vec<f64>> = g.params.iter().map(|p| vec![0.0; p.len]).collect();
        params[1] = vec![2.5; 5];
        let t = g.forward(&params, &[], &[0.1; 24], 2, false).unwrap();
        assert_eq!(t.output().len(), 10 * 2 * 6);
        assert!(t.output().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn serialized_length_matches_param_count() {
        for arch in all_archs() {
            let m = Model::init(&arch, 3).unwrap();
            assert_eq!(m.param_count(), param_count(&arch).unwrap());
            let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
            let total: usize =
                v["params"].as_array().unwrap().iter().map(|b| decode_blob(b.as_str().unwrap()).unwrap().len()).sum();
            assert_eq!(total, m.param_count(), "{}", arch.name);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let m = Model::init(&make_student(3, 2, &STUDENT_NODES).unwrap(), 9).unwrap();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        let x: Vec<f64> = (0..3 * m.input_len()).map(|i| (i as f64).sin()).collect();
        assert_eq!(m.logits(&x).unwrap(), back.logits(&x).unwrap());
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn decode_tie_rule() {
        let m = Model::init(&make_sc_net(1, 2).unwrap(), 0).unwrap();
        assert_eq!(m.decode(&[5.0, 1.0, 1.0]).choice, vec![0]);
        assert_eq!(m.decode(&[2.0, 2.0, 0.0]).choice, vec![0]);
        assert_eq!(m.decode(&[0.0, 2.0, 2.0]).choice, vec![1]);
        let r = Model::init(&make_rel_net(2, 2).unwrap(), 0).unwrap();
        let mut z = vec![0.0; 9];
        z[7] = 1.0;
        assert_eq!(r.decode(&z).choice, vec![2, 1]);
        assert_eq!(r.targets(&Assignment::new(vec![2, 1])), vec![7]);
    }

    #[test]
    fn infer_is_pure() {
        let m = Model::init(&make_skin_net(2, 2).unwrap(), 4).unwrap();
        let x: Vec<f64> = (0..5 * m.input_len()).map(|i| (i as f64 * 0.3).cos()).collect();
        assert_eq!(m.logits(&x).unwrap(), m.logits(&x).unwrap());
        // per-sample results do not depend on the batch
        let single = m.logits(&x[..m.input_len()]).unwrap();
        let all = m.logits(&x).unwrap();
        for (a, b) in single.iter().zip(&all) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
