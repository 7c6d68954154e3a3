//! Training loop, configuration and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, LossBreakdown, LossContext};
use super::{forward_batch, init_params, Architecture, NetworkParams};
use crate::dcopf::{prediction_metrics, Duals, OpfSolution, PredictionMetrics};
use crate::error::{dim_check, Error, Result};
use crate::grid::{GridCase, PtdfMatrix};
use crate::sampling::{Dataset, LabeledPoint};

/// Physics term added to the supervised loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Supervised errors only.
    Plain,
    /// Range-normalised generator-limit violation.
    PgAbs,
    /// Its square.
    PgSqr,
    /// `exp(violation) − 1`.
    PgExp,
    /// Scaled residuals of all optimality conditions.
    Kkt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Plain,
        Variant::PgAbs,
        Variant::PgSqr,
        Variant::PgExp,
        Variant::Kkt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::PgAbs => "pg_abs",
            Variant::PgSqr => "pg_sqr",
            Variant::PgExp => "pg_exp",
            Variant::Kkt => "kkt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown loss variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda_p: f64,
    pub lambda_l: f64,
    pub lambda_eps: f64,
    pub epochs: usize,
    pub batches: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub pg_hidden: Vec<usize>,
    pub dual_hidden: Vec<usize>,
    /// Share of the labelled and collocation pools held out for model selection.
    pub validation_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Plain,
            lambda_p: 1.0,
            lambda_l: 0.1,
            lambda_eps: 0.1,
            epochs: 5000,
            batches: 2,
            learning_rate: 1e-3,
            seed: 0,
            pg_hidden: vec![20, 20, 20],
            dual_hidden: vec![30, 30, 30],
            validation_frac: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_p, self.lambda_l, self.lambda_eps];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation("loss weights must be finite and nonnegative".into()));
        }
        if self.batches == 0 {
            return Err(Error::Validation("batches must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Validation("learning rate must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.validation_frac) {
            return Err(Error::Validation("validation_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Batch-averaged loss per epoch.
    pub train: Vec<LossBreakdown>,
    pub validation: Vec<LossBreakdown>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..theta.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            theta[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn split_at_frac<T>(items: &[T], keep: f64) -> (&[T], &[T]) {
    let n = items.len();
    let k = ((keep * n as f64).round() as usize).min(n);
    items.split_at(k)
}

/// Mini-batch Adam on the selected loss. Returns the parameters with the
/// lowest validation loss (training loss when nothing is held out).
pub fn train(
    dataset: &Dataset,
    case: &GridCase,
    ptdf: &PtdfMatrix,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    config.validate()?;
    dim_check("dataset input dimension", case.n_load(), dataset.input_domain.len())?;
    let arch = Architecture::for_case(case, &config.pg_hidden, &config.dual_hidden);
    let mut params = init_params(&arch, config.seed)?;
    params.fit_scalers(case, &dataset.labeled);
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }

    let keep = 1.0 - config.validation_frac;
    let (train_lab, val_lab) = split_at_frac(&dataset.labeled, keep);
    let (train_col, val_col) = split_at_frac(&dataset.collocation, keep);
    let val_lab: Vec<&LabeledPoint> = val_lab.iter().collect();
    let val_col: Vec<&[f64]> = val_col.iter().map(Vec::as_slice).collect();
    let has_validation = !val_lab.is_empty() || (!val_col.is_empty() && config.variant != Variant::Plain);

    let ctx = LossContext::new(case, ptdf);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut lab_order: Vec<usize> = (0..train_lab.len()).collect();
    let mut col_order: Vec<usize> = (0..train_col.len()).collect();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut best_total = f64::INFINITY;
    let mut best = params.clone();
    let nb = config.batches;

    for epoch in 0..config.epochs {
        lab_order.shuffle(&mut rng);
        col_order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for b in 0..nb {
            let part = |order: &[usize]| {
                let n = order.len();
                order[b * n / nb..(b + 1) * n / nb].to_vec()
            };
            let lab: Vec<&LabeledPoint> = part(&lab_order).into_iter().map(|i| &train_lab[i]).collect();
            let col: Vec<&[f64]> = part(&col_order)
                .into_iter()
                .map(|i| train_col[i].as_slice())
                .collect();
            let (l, g) = loss_and_grad(&params, &lab, &col, &ctx, config, true)?;
            if !l.total.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            adam.step(&mut flat, &g.expect("gradient").to_flat(), config.learning_rate);
            params.set_flat(&flat)?;
            acc.total += l.total / nb as f64;
            acc.mae_p += l.mae_p / nb as f64;
            acc.mae_l += l.mae_l / nb as f64;
            acc.mae_eps += l.mae_eps / nb as f64;
        }
        let val = if has_validation {
            loss_and_grad(&params, &val_lab, &val_col, &ctx, config, false)?.0
        } else {
            acc
        };
        if !val.total.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        if val.total < best_total {
            best_total = val.total;
            best = params.clone();
            history.best_epoch = Some(epoch);
        }
        history.train.push(acc);
        history.validation.push(val);
    }
    Ok((best, history))
}

/// Pool averages of the prediction metrics plus worst cases and violation shares.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub n: usize,
    pub mean: PredictionMetrics,
    pub max_v_g: f64,
    pub max_v_line: f64,
    pub max_v_dist: f64,
    /// Fraction of points with any generator-limit violation.
    pub share_gen_violated: f64,
    pub share_line_violated: f64,
}

const VIOLATION_TOL: f64 = 1e-6;

pub fn evaluate(
    params: &NetworkParams,
    pool: &[LabeledPoint],
    case: &GridCase,
    ptdf: &PtdfMatrix,
) -> Result<Evaluation> {
    let pds: Vec<Vec<f64>> = pool.iter().map(|p| p.pd.clone()).collect();
    let (pgs, _) = forward_batch(params, &pds)?;
    let mut ev = Evaluation {
        n: pool.len(),
        ..Evaluation::default()
    };
    if pool.is_empty() {
        return Ok(ev);
    }
    let costs = case.costs();
    for (p, pg) in pool.iter().zip(&pgs) {
        let reference = OpfSolution {
            pg: p.pg_star.clone(),
            duals: Duals::from_slice(&p.duals_star, case.n_gen(), case.n_line())?,
            objective: costs.iter().zip(&p.pg_star).map(|(c, g)| c * g).sum(),
        };
        let m = prediction_metrics(case, ptdf, &p.pd, pg, &reference)?;
        ev.mean.mae_pct += m.mae_pct;
        ev.mean.v_g += m.v_g;
        ev.mean.v_line += m.v_line;
        ev.mean.v_dist += m.v_dist;
        ev.mean.v_opt += m.v_opt;
        ev.mean.excluded_generators = m.excluded_generators;
        ev.max_v_g = ev.max_v_g.max(m.v_g);
        ev.max_v_line = ev.max_v_line.max(m.v_line);
        ev.max_v_dist = ev.max_v_dist.max(m.v_dist);
        ev.share_gen_violated += (m.v_g > VIOLATION_TOL) as u8 as f64;
        ev.share_line_violated += (m.v_line > VIOLATION_TOL) as u8 as f64;
    }
    let n = pool.len() as f64;
    ev.mean.mae_pct /= n;
    ev.mean.v_g /= n;
    ev.mean.v_line /= n;
    ev.mean.v_dist /= n;
    ev.mean.v_opt /= n;
    ev.share_gen_violated /= n;
    ev.share_line_violated /= n;
    Ok(ev)
}
