//! Two-headed ReLU network mapping demands to generator setpoints and
//! OPF multipliers, with physics-informed training.
//!
//! The heads are separate dense stacks: ReLU on every hidden layer, affine
//! output. Inputs and outputs pass through per-dimension affine scalers that
//! are stored with the weights.

mod loss;
mod train;

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_check, Error, Result};
use crate::grid::GridCase;
use crate::sampling::{LabeledPoint, DOMAIN_HIGH, DOMAIN_LOW};
use crate::textio::{self, Block, Writer};

pub use loss::{grad, loss, Gradient, LossBreakdown};
pub use train::{evaluate, train, Evaluation, TrainConfig, TrainHistory, Variant};

const MODEL_MAGIC: &str = "pinnopf-model";
pub const MODEL_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: DMatrix::zeros(output, input),
            biases: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Dense stack; ReLU after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub layers: Vec<Layer>,
}

impl Head {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_dim)
    }

    /// Hidden layer widths.
    pub fn hidden(&self) -> Vec<usize> {
        let n = self.layers.len();
        self.layers[..n.saturating_sub(1)]
            .iter()
            .map(Layer::output_dim)
            .collect()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation(format!("{name} head has no layers")));
        }
        for (k, w) in self.layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Dimension(format!(
                    "{name} head layers {k} and {} do not chain",
                    k + 1
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.biases.len() != l.output_dim() {
                return Err(Error::Dimension(format!("{name} head layer {k} bias length")));
            }
        }
        Ok(())
    }

    /// Runs a batch stored column-wise; returns the output and, when `keep`,
    /// every layer input (`a_0 = x`, then post-ReLU activations).
    pub(crate) fn forward_batch(
        &self,
        x: DMatrix<f64>,
        keep: bool,
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut acts = Vec::new();
        let mut a = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.biases;
            }
            if k < last {
                z.apply(|v| *v = v.max(0.0));
            }
            if keep {
                acts.push(a);
            }
            a = z;
        }
        (a, acts)
    }

    /// Backpropagates `d_out` (output-sized, column per sample).
    pub(crate) fn backward(&self, acts: &[DMatrix<f64>], d_out: DMatrix<f64>) -> Head {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for k in (0..self.layers.len()).rev() {
            let a = &acts[k];
            let gw = &delta * a.transpose();
            let gb = delta.column_sum();
            if k > 0 {
                let mut prev = self.layers[k].weights.transpose() * &delta;
                // ReLU derivative, zero at the kink.
                prev.zip_apply(a, |d, act| {
                    if act <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = prev;
            }
            grads.push(Layer {
                weights: gw,
                biases: gb,
            });
        }
        grads.reverse();
        Head { layers: grads }
    }
}

/// `physical = offset + scale · normalised`, per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineScaler {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn to_physical(&self, normalised: &[f64]) -> Vec<f64> {
        normalised
            .iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| o + s * v)
            .collect()
    }

    /// Inverse map; a zero-scale dimension normalises to 0.
    pub fn to_normalised(&self, physical: &[f64]) -> Vec<f64> {
        physical
            .iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| if *s == 0.0 { 0.0 } else { (v - o) / s })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub pg_output_dim: usize,
    pub dual_output_dim: usize,
    pub pg_hidden: Vec<usize>,
    pub dual_hidden: Vec<usize>,
}

impl Architecture {
    pub fn for_case(case: &GridCase, pg_hidden: &[usize], dual_hidden: &[usize]) -> Self {
        Self {
            input_dim: case.n_load(),
            pg_output_dim: case.n_gen(),
            dual_output_dim: case.n_duals(),
            pg_hidden: pg_hidden.to_vec(),
            dual_hidden: dual_hidden.to_vec(),
        }
    }

    /// Three hidden layers of 20 for setpoints and of 30 for multipliers.
    pub fn standard(case: &GridCase) -> Self {
        Self::for_case(case, &[20, 20, 20], &[30, 30, 30])
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.pg_output_dim, self.dual_output_dim];
        if dims.contains(&0) || self.pg_hidden.contains(&0) || self.dual_hidden.contains(&0) {
            return Err(Error::Validation("architecture has a zero-width layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub pg_head: Head,
    pub dual_head: Head,
    pub input_scaler: AffineScaler,
    pub pg_scaler: AffineScaler,
    pub dual_scaler: AffineScaler,
}

/// Output of [`forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// MW.
    pub pg: Vec<f64>,
    /// `[λ, μ̄_g, μ_g, μ̄_l, μ_l]`.
    pub duals: Vec<f64>,
    /// The input lies outside the scaler's training box.
    pub extrapolated: bool,
}

fn init_head(input: usize, hidden: &[usize], output: usize, rng: &mut ChaCha8Rng) -> Head {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    let layers = dims
        .windows(2)
        .map(|w| {
            let limit = (6.0 / w[0] as f64).sqrt();
            // Row-major draw order keeps the stream independent of storage layout.
            let mut weights = DMatrix::zeros(w[1], w[0]);
            for r in 0..w[1] {
                for c in 0..w[0] {
                    weights[(r, c)] = rng.gen_range(-limit..limit);
                }
            }
            Layer {
                weights,
                biases: DVector::zeros(w[1]),
            }
        })
        .collect();
    Head { layers }
}

/// Uniform fan-in initialisation (`±sqrt(6 / fan_in)`), zero biases and
/// identity scalers.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<NetworkParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pg_head = init_head(arch.input_dim, &arch.pg_hidden, arch.pg_output_dim, &mut rng);
    let dual_head = init_head(arch.input_dim, &arch.dual_hidden, arch.dual_output_dim, &mut rng);
    Ok(NetworkParams {
        pg_head,
        dual_head,
        input_scaler: AffineScaler::identity(arch.input_dim),
        pg_scaler: AffineScaler::identity(arch.pg_output_dim),
        dual_scaler: AffineScaler::identity(arch.dual_output_dim),
    })
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.pg_head.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.pg_head.validate("setpoint")?;
        self.dual_head.validate("multiplier")?;
        dim_check("multiplier head input", self.input_dim(), self.dual_head.input_dim())?;
        dim_check("input scaler", self.input_dim(), self.input_scaler.dim())?;
        dim_check("setpoint scaler", self.pg_head.output_dim(), self.pg_scaler.dim())?;
        dim_check("multiplier scaler", self.dual_head.output_dim(), self.dual_scaler.dim())?;
        Ok(())
    }

    /// Sets the scalers: demand box to `[0, 1]`, generator limits to `[0, 1]`,
    /// multipliers by their largest magnitude in `labeled` (1 if all zero).
    pub fn fit_scalers(&mut self, case: &GridCase, labeled: &[LabeledPoint]) {
        let nominal = case.nominal_demand();
        self.input_scaler = AffineScaler {
            offset: nominal.iter().map(|p| DOMAIN_LOW * p).collect(),
            scale: nominal.iter().map(|p| (DOMAIN_HIGH - DOMAIN_LOW) * p).collect(),
        };
        self.pg_scaler = AffineScaler {
            offset: case.generators.iter().map(|g| g.p_min).collect(),
            scale: case.generators.iter().map(|g| g.range()).collect(),
        };
        let nu = self.dual_head.output_dim();
        let mut scale = vec![0.0f64; nu];
        for p in labeled {
            for (s, d) in scale.iter_mut().zip(&p.duals_star) {
                *s = s.max(d.abs());
            }
        }
        for s in &mut scale {
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        self.dual_scaler = AffineScaler {
            offset: vec![0.0; nu],
            scale,
        };
    }

    /// Column-per-sample matrix of normalised inputs.
    pub(crate) fn input_matrix<'a>(
        &self,
        pds: impl ExactSizeIterator<Item = &'a [f64]>,
    ) -> Result<DMatrix<f64>> {
        let d = self.input_dim();
        let n = pds.len();
        let mut x = DMatrix::zeros(d, n);
        for (j, pd) in pds.enumerate() {
            dim_check("demand vector", d, pd.len())?;
            let z = self.input_scaler.to_normalised(pd);
            x.column_mut(j).copy_from_slice(&z);
        }
        Ok(x)
    }

    /// Flat parameter view, setpoint head first, each layer weights
    /// (column-major) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in self.pg_head.layers.iter().chain(&self.dual_head.layers) {
            v.extend_from_slice(l.weights.as_slice());
            v.extend_from_slice(l.biases.as_slice());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self
            .pg_head
            .layers
            .iter()
            .chain(&self.dual_head.layers)
            .map(|l| l.weights.len() + l.biases.len())
            .sum();
        dim_check("flat parameter vector", n, flat.len())?;
        let mut at = 0;
        for l in self
            .pg_head
            .layers
            .iter_mut()
            .chain(self.dual_head.layers.iter_mut())
        {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.as_mut_slice().copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }
}

/// Predicts setpoints (MW) and multipliers for one demand vector.
pub fn forward(params: &NetworkParams, pd: &[f64]) -> Result<Prediction> {
    let (pg, duals) = forward_batch(params, &[pd.to_vec()])?;
    let z = params.input_scaler.to_normalised(pd);
    let extrapolated = z.iter().any(|v| *v < -1e-9 || *v > 1.0 + 1e-9);
    Ok(Prediction {
        pg: pg.into_iter().next().expect("one row"),
        duals: duals.into_iter().next().expect("one row"),
        extrapolated,
    })
}

/// Batched [`forward`]; rows of the results match rows of `pds`.
pub fn forward_batch(
    params: &NetworkParams,
    pds: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    params.validate()?;
    let x = params.input_matrix(pds.iter().map(Vec::as_slice))?;
    let (pg, _) = params.pg_head.forward_batch(x.clone(), false);
    let (du, _) = params.dual_head.forward_batch(x, false);
    let to_rows = |m: &DMatrix<f64>, s: &AffineScaler| -> Vec<Vec<f64>> {
        m.column_iter()
            .map(|c| s.to_physical(c.as_slice()))
            .collect()
    };
    Ok((to_rows(&pg, &params.pg_scaler), to_rows(&du, &params.dual_scaler)))
}

fn write_head(w: &mut Writer, name: &str, head: &Head) {
    w.meta(&format!("{name}.layers"), head.layers.len());
    for (k, l) in head.layers.iter().enumerate() {
        let rows: Vec<Vec<f64>> = l
            .weights
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        w.block(&format!("{name}.{k}.weights"), &Block::from_rows(&rows, l.input_dim()))
            .block(&format!("{name}.{k}.biases"), &Block::vector(l.biases.as_slice()));
    }
}

fn read_head(doc: &textio::Document, name: &str) -> Result<Head> {
    let n: usize = doc.meta_parse(&format!("{name}.layers"))?;
    let mut layers = Vec::with_capacity(n);
    for k in 0..n {
        let w = doc.block(&format!("{name}.{k}.weights"))?;
        let b = doc.block(&format!("{name}.{k}.biases"))?;
        layers.push(Layer {
            weights: DMatrix::from_row_slice(w.rows, w.cols, &w.data),
            biases: DVector::from_column_slice(&b.data),
        });
    }
    let head = Head { layers };
    head.validate(name)?;
    Ok(head)
}

impl NetworkParams {
    pub fn to_text(&self) -> String {
        let mut w = Writer::new(MODEL_MAGIC, MODEL_SCHEMA);
        w.meta("input_dim", self.input_dim())
            .meta("pg_output_dim", self.pg_head.output_dim())
            .meta("dual_output_dim", self.dual_head.output_dim());
        for (name, s) in [
            ("input_scaler", &self.input_scaler),
            ("pg_scaler", &self.pg_scaler),
            ("dual_scaler", &self.dual_scaler),
        ] {
            w.block(&format!("{name}.offset"), &Block::vector(&s.offset))
                .block(&format!("{name}.scale"), &Block::vector(&s.scale));
        }
        write_head(&mut w, "pg", &self.pg_head);
        write_head(&mut w, "dual", &self.dual_head);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = textio::parse(text, MODEL_MAGIC, MODEL_SCHEMA)?;
        let scaler = |name: &str| -> Result<AffineScaler> {
            Ok(AffineScaler {
                offset: doc.block(&format!("{name}.offset"))?.data.clone(),
                scale: doc.block(&format!("{name}.scale"))?.data.clone(),
            })
        };
        let params = Self {
            pg_head: read_head(&doc, "pg")?,
            dual_head: read_head(&doc, "dual")?,
            input_scaler: scaler("input_scaler")?,
            pg_scaler: scaler("pg_scaler")?,
            dual_scaler: scaler("dual_scaler")?,
        };
        params.validate()?;
        dim_check("input dimension", doc.meta_parse("input_dim")?, params.input_dim())?;
        Ok(params)
    }
}

pub fn save_model<W: Write>(params: &NetworkParams, mut sink: W) -> Result<()> {
    sink.write_all(params.to_text().as_bytes())?;
    Ok(())
}

pub fn load_model<R: Read>(mut source: R) -> Result<NetworkParams> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    NetworkParams::from_text(&text)
}
