//! Latin hypercube sampling over the demand domain and dataset assembly.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dcopf::{recover_duals_from_kkt, solve_dcopf};
use crate::error::{Error, Result};
use crate::grid::{GridCase, PtdfMatrix};
use crate::textio::{self, Block, Writer};

/// Demand domain as a fraction of nominal load.
pub const DOMAIN_LOW: f64 = 0.6;
pub const DOMAIN_HIGH: f64 = 1.0;

const DATASET_MAGIC: &str = "pinnopf-dataset";
pub const DATASET_SCHEMA: u32 = 1;
const REDRAWS_PER_STRATUM: usize = 10;

/// Per-load `[0.6, 1.0] × nominal` box.
pub fn input_domain(case: &GridCase) -> Vec<(f64, f64)> {
    case.loads
        .iter()
        .map(|l| (DOMAIN_LOW * l.p_max_nominal, DOMAIN_HIGH * l.p_max_nominal))
        .collect()
}

/// Stratum assignment of an LHS design: `strata[row][dim]`, a permutation per column.
struct Design {
    n: usize,
    strata: Vec<Vec<usize>>,
}

impl Design {
    fn new(n: usize, dims: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut strata = vec![vec![0usize; dims]; n];
        for d in 0..dims {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            for (row, s) in perm.into_iter().enumerate() {
                strata[row][d] = s;
            }
        }
        Self { n, strata }
    }

    /// A uniformly placed point inside the cells of `row`.
    fn draw(&self, row: usize, bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
        // Keep offsets off the cell edges so the stratum is recoverable after rounding.
        const EDGE: f64 = 1e-9;
        self.strata[row]
            .iter()
            .zip(bounds)
            .map(|(&s, &(lo, hi))| {
                let r: f64 = EDGE + (1.0 - 2.0 * EDGE) * rng.gen::<f64>();
                if hi == lo {
                    lo
                } else {
                    lo + (s as f64 + r) / self.n as f64 * (hi - lo)
                }
            })
            .collect()
    }
}

/// `n` Latin-hypercube points inside `bounds`: per dimension, exactly one
/// point in each of the `n` equal-width strata.
pub fn lhs_sample(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Precondition("LHS needs n >= 1".into()));
    }
    if let Some((d, _)) = bounds.iter().enumerate().find(|(_, (lo, hi))| !(lo <= hi)) {
        return Err(Error::Precondition(format!("dimension {d} has lo > hi")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = Design::new(n, bounds.len(), &mut rng);
    Ok((0..n).map(|row| design.draw(row, bounds, &mut rng)).collect())
}

/// Stratum index of `x` in `[lo, hi]` split into `n` cells.
pub fn stratum_of(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * n as f64).floor().max(0.0) as usize).min(n - 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    pub labeled_frac: f64,
    pub collocation_frac: f64,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            labeled_frac: 0.2,
            collocation_frac: 0.5,
        }
    }
}

impl Split {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(self.labeled_frac) || !ok(self.collocation_frac) {
            return Err(Error::Precondition("split fractions must lie in (0, 1)".into()));
        }
        if self.labeled_frac + self.collocation_frac > 1.0 + 1e-12 {
            return Err(Error::Precondition("split fractions sum to more than 1".into()));
        }
        Ok(())
    }

    /// `(labeled, collocation, unseen)` counts for `n` samples.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let nl = (self.labeled_frac * n as f64).round() as usize;
        let nc = ((self.collocation_frac * n as f64).round() as usize).min(n - nl.min(n));
        (nl.min(n), nc, n - nl.min(n) - nc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub pd: Vec<f64>,
    pub pg_star: Vec<f64>,
    /// `[λ, μ̄_g, μ_g, μ̄_l, μ_l]`.
    pub duals_star: Vec<f64>,
    /// Dual recovery fell back to LP duals (non-unique multipliers).
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub case_id: String,
    pub labeled: Vec<LabeledPoint>,
    pub collocation: Vec<Vec<f64>>,
    pub unseen_test: Vec<LabeledPoint>,
    pub input_domain: Vec<(f64, f64)>,
    pub seed: u64,
    /// Infeasible OPF solves that forced a redraw.
    pub infeasible_redraws: usize,
}

fn label(case: &GridCase, ptdf: &PtdfMatrix, pd: &[f64]) -> Result<LabeledPoint> {
    let opf = solve_dcopf(case, ptdf, pd)?;
    let rec = recover_duals_from_kkt(case, ptdf, pd, &opf)?;
    Ok(LabeledPoint {
        pd: pd.to_vec(),
        pg_star: opf.pg,
        duals_star: rec.duals.to_vec(),
        degenerate: rec.degenerate,
    })
}

pub fn build_dataset(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    n_total: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    build_dataset_parallel(case, ptdf, n_total, split, seed, 1)
}

/// As [`build_dataset`], labelling on `threads` workers. Results are merged in
/// sample order, so the dataset does not depend on the worker count.
pub fn build_dataset_parallel(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    n_total: usize,
    split: Split,
    seed: u64,
    threads: usize,
) -> Result<Dataset> {
    split.validate()?;
    if n_total == 0 {
        return Err(Error::Precondition("n_total must be positive".into()));
    }
    let domain = input_domain(case);
    let (n_lab, n_col, n_uns) = split.counts(n_total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut design = Design::new(n_total, domain.len(), &mut rng);
    let mut points: Vec<Vec<f64>> = (0..n_total)
        .map(|row| design.draw(row, &domain, &mut rng))
        .collect();

    // Rows [0, n_lab) are labelled, [n_lab, n_lab + n_col) collocation, the rest unseen.
    let needs_label: Vec<usize> = (0..n_lab).chain(n_lab + n_col..n_total).collect();
    let solve_all = |rows: &[usize], points: &[Vec<f64>]| -> Vec<Result<LabeledPoint>> {
        if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool");
            pool.install(|| rows.par_iter().map(|&r| label(case, ptdf, &points[r])).collect())
        } else {
            rows.iter().map(|&r| label(case, ptdf, &points[r])).collect()
        }
    };
    let first = solve_all(&needs_label, &points);

    let initially_infeasible = first
        .iter()
        .filter(|r| matches!(r, Err(Error::Infeasible(_))))
        .count();
    if !needs_label.is_empty() && 2 * initially_infeasible > needs_label.len() {
        return Err(Error::Precondition(format!(
            "{initially_infeasible} of {} sampled demands are infeasible; the input domain is likely mis-specified",
            needs_label.len()
        )));
    }

    let mut infeasible_redraws = 0usize;
    let mut labels: Vec<Option<LabeledPoint>> = Vec::with_capacity(needs_label.len());
    for (k, res) in first.into_iter().enumerate() {
        let row = needs_label[k];
        match res {
            Ok(p) => labels.push(Some(p)),
            Err(Error::Infeasible(_)) => {
                infeasible_redraws += 1;
                let mut found = None;
                for _ in 0..REDRAWS_PER_STRATUM {
                    let candidate = design.draw(row, &domain, &mut rng);
                    match label(case, ptdf, &candidate) {
                        Ok(p) => {
                            points[row] = candidate;
                            found = Some(p);
                            break;
                        }
                        Err(Error::Infeasible(_)) => infeasible_redraws += 1,
                        Err(e) => return Err(e),
                    }
                }
                // Exchange strata with collocation rows; they need no label.
                let mut swaps = 0;
                while found.is_none() && n_col > 0 && swaps < REDRAWS_PER_STRATUM {
                    swaps += 1;
                    let other = n_lab + rng.gen_range(0..n_col);
                    design.strata.swap(row, other);
                    points.swap(row, other);
                    match label(case, ptdf, &points[row]) {
                        Ok(p) => found = Some(p),
                        Err(Error::Infeasible(_)) => infeasible_redraws += 1,
                        Err(e) => return Err(e),
                    }
                }
                match found {
                    Some(p) => labels.push(Some(p)),
                    None => {
                        return Err(Error::Infeasible(format!(
                            "no feasible demand found for sample {row} after redraws"
                        )))
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }

    let mut labels = labels.into_iter().map(|p| p.expect("labelled"));
    let labeled: Vec<LabeledPoint> = labels.by_ref().take(n_lab).collect();
    let unseen_test: Vec<LabeledPoint> = labels.collect();
    debug_assert_eq!(unseen_test.len(), n_uns);
    let collocation = points[n_lab..n_lab + n_col].to_vec();

    Ok(Dataset {
        case_id: case.name.clone(),
        labeled,
        collocation,
        unseen_test,
        input_domain: domain,
        seed,
        infeasible_redraws,
    })
}

impl Dataset {
    /// Splits the labelled pool into training and validation parts, in order.
    pub fn train_validation_split(&self, train_frac: f64) -> (&[LabeledPoint], &[LabeledPoint]) {
        let n = self.labeled.len();
        let nt = ((train_frac.clamp(0.0, 1.0) * n as f64).round() as usize).clamp(n.min(1), n);
        self.labeled.split_at(nt)
    }

    /// Re-checks domain membership and primal feasibility of every label.
    pub fn validate(&self, case: &GridCase, ptdf: &PtdfMatrix) -> Result<()> {
        let inside = |pd: &[f64]| {
            pd.len() == self.input_domain.len()
                && pd
                    .iter()
                    .zip(&self.input_domain)
                    .all(|(p, (lo, hi))| *p >= lo - 1e-9 && *p <= hi + 1e-9)
        };
        for p in self.labeled.iter().chain(&self.unseen_test) {
            if !inside(&p.pd) {
                return Err(Error::Validation("labelled demand outside the domain".into()));
            }
            crate::error::dim_check("pg_star", case.n_gen(), p.pg_star.len())?;
            crate::error::dim_check("duals_star", case.n_duals(), p.duals_star.len())?;
            let bal: f64 = p.pg_star.iter().sum::<f64>() - p.pd.iter().sum::<f64>();
            let gen = crate::dcopf::generator_violation(case, &p.pg_star);
            let line = crate::dcopf::line_violation(case, ptdf, &p.pd, &p.pg_star);
            if bal.abs() > 1e-6 || gen > 1e-6 || line > 1e-6 {
                return Err(Error::Validation("label violates OPF constraints".into()));
            }
        }
        if self.collocation.iter().any(|pd| !inside(pd)) {
            return Err(Error::Validation("collocation demand outside the domain".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let nd = self.input_domain.len();
        let ng = self.labeled.first().or(self.unseen_test.first()).map_or(0, |p| p.pg_star.len());
        let nu = self.labeled.first().or(self.unseen_test.first()).map_or(0, |p| p.duals_star.len());
        let mut w = Writer::new(DATASET_MAGIC, DATASET_SCHEMA);
        w.meta("case_id", &self.case_id)
            .meta("seed", self.seed)
            .meta("n_labeled", self.labeled.len())
            .meta("n_collocation", self.collocation.len())
            .meta("n_unseen", self.unseen_test.len())
            .meta("infeasible_redraws", self.infeasible_redraws)
            .meta("n_gen", ng)
            .meta("n_dual", nu);
        let lo: Vec<f64> = self.input_domain.iter().map(|d| d.0).collect();
        let hi: Vec<f64> = self.input_domain.iter().map(|d| d.1).collect();
        w.block("domain", &Block::from_rows(&[lo, hi], nd));
        for (prefix, pool) in [("labeled", &self.labeled), ("unseen", &self.unseen_test)] {
            let pd: Vec<Vec<f64>> = pool.iter().map(|p| p.pd.clone()).collect();
            let pg: Vec<Vec<f64>> = pool.iter().map(|p| p.pg_star.clone()).collect();
            let du: Vec<Vec<f64>> = pool.iter().map(|p| p.duals_star.clone()).collect();
            let dg: Vec<Vec<f64>> = pool.iter().map(|p| vec![p.degenerate as u8 as f64]).collect();
            w.block(&format!("{prefix}.pd"), &Block::from_rows(&pd, nd))
                .block(&format!("{prefix}.pg_star"), &Block::from_rows(&pg, ng))
                .block(&format!("{prefix}.duals_star"), &Block::from_rows(&du, nu))
                .block(&format!("{prefix}.degenerate"), &Block::from_rows(&dg, 1));
        }
        w.block("collocation.pd", &Block::from_rows(&self.collocation, nd));
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = textio::parse(text, DATASET_MAGIC, DATASET_SCHEMA)?;
        let domain = doc.block("domain")?;
        if domain.rows != 2 {
            return Err(Error::Format("domain block must have two rows".into()));
        }
        let input_domain: Vec<(f64, f64)> = (0..domain.cols)
            .map(|d| (domain.data[d], domain.data[domain.cols + d]))
            .collect();
        let pool = |prefix: &str, expected: usize| -> Result<Vec<LabeledPoint>> {
            let pd = doc.block(&format!("{prefix}.pd"))?.to_rows();
            let pg = doc.block(&format!("{prefix}.pg_star"))?.to_rows();
            let du = doc.block(&format!("{prefix}.duals_star"))?.to_rows();
            let dg = doc.block(&format!("{prefix}.degenerate"))?.to_rows();
            if [pd.len(), pg.len(), du.len(), dg.len()].iter().any(|&l| l != expected) {
                return Err(Error::Format(format!("{prefix} blocks disagree on length")));
            }
            Ok(pd
                .into_iter()
                .zip(pg)
                .zip(du)
                .zip(dg)
                .map(|(((pd, pg_star), duals_star), dg)| LabeledPoint {
                    pd,
                    pg_star,
                    duals_star,
                    degenerate: dg[0] != 0.0,
                })
                .collect())
        };
        let labeled = pool("labeled", doc.meta_parse("n_labeled")?)?;
        let unseen_test = pool("unseen", doc.meta_parse("n_unseen")?)?;
        let collocation = doc.block("collocation.pd")?.to_rows();
        if collocation.len() != doc.meta_parse::<usize>("n_collocation")? {
            return Err(Error::Format("collocation count mismatch".into()));
        }
        Ok(Self {
            case_id: doc.meta("case_id")?.to_string(),
            labeled,
            collocation,
            unseen_test,
            input_domain,
            seed: doc.meta_parse("seed")?,
            infeasible_redraws: doc.meta_parse("infeasible_redraws")?,
        })
    }
}

pub fn save_dataset<W: Write>(ds: &Dataset, mut sink: W) -> Result<()> {
    sink.write_all(ds.to_text().as_bytes())?;
    Ok(())
}

pub fn load_dataset<R: Read>(mut source: R) -> Result<Dataset> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    Dataset::from_text(&text)
}
