//! Grid case model and power transfer distribution factors.
//!
//! Case files are TOML documents. Bus references are 1-based in the file and
//! 0-based in [`GridCase`]:
//!
//! ```toml
//! name = "two-bus"
//! n_bus = 2
//! slack_bus = 1
//! base_mva = 100.0
//!
//! [[generators]]
//! bus = 1
//! p_min = 0.0
//! p_max = 100.0
//! cost = 10.0
//!
//! [[loads]]
//! bus = 2
//! p_max_nominal = 50.0
//!
//! [[lines]]
//! from_bus = 1
//! to_bus = 2
//! susceptance = 10.0
//! flow_limit = 80.0
//! ```

use std::collections::VecDeque;
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    /// Linear cost, $/MWh.
    pub cost: f64,
}

impl Generator {
    pub fn range(&self) -> f64 {
        self.p_max - self.p_min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    /// Demand at 100 % loading, MW.
    pub p_max_nominal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    /// Series susceptance, p.u. (1/x).
    pub susceptance: f64,
    /// Thermal limit, MW.
    pub flow_limit: f64,
}

/// Static network model. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCase {
    pub name: String,
    pub n_bus: usize,
    pub slack_bus: usize,
    pub base_mva: f64,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub lines: Vec<Line>,
}

#[derive(Deserialize, Serialize)]
struct CaseFile {
    #[serde(default)]
    name: Option<String>,
    n_bus: usize,
    slack_bus: usize,
    #[serde(default = "default_base")]
    base_mva: f64,
    generators: Vec<Generator>,
    loads: Vec<Load>,
    lines: Vec<Line>,
}

fn default_base() -> f64 {
    100.0
}

impl GridCase {
    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_load(&self) -> usize {
        self.loads.len()
    }

    pub fn n_line(&self) -> usize {
        self.lines.len()
    }

    /// Sum of nominal demands (the "maximum loading").
    pub fn max_loading(&self) -> f64 {
        self.loads.iter().map(|l| l.p_max_nominal).sum()
    }

    pub fn total_capacity(&self) -> f64 {
        self.generators.iter().map(|g| g.p_max).sum()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.generators.iter().map(|g| g.cost).collect()
    }

    pub fn nominal_demand(&self) -> Vec<f64> {
        self.loads.iter().map(|l| l.p_max_nominal).collect()
    }

    /// Size of the dual vector `[λ, μ̄_g, μ_g, μ̄_l, μ_l]`.
    pub fn n_duals(&self) -> usize {
        1 + 2 * self.n_gen() + 2 * self.n_line()
    }

    /// Net nodal injections for generation `pg` and demand `pd`.
    pub fn injections(&self, pg: &[f64], pd: &[f64]) -> Vec<f64> {
        let mut inj = vec![0.0; self.n_bus];
        for (g, p) in self.generators.iter().zip(pg) {
            inj[g.bus] += p;
        }
        for (l, p) in self.loads.iter().zip(pd) {
            inj[l.bus] -= p;
        }
        inj
    }

    /// Checks every structural invariant, including connectivity.
    pub fn validate(&self) -> Result<()> {
        let v = |msg: String| Err(Error::Validation(msg));
        if self.n_bus == 0 {
            return v("case has no buses".into());
        }
        if self.slack_bus >= self.n_bus {
            return v(format!("slack bus {} out of range", self.slack_bus + 1));
        }
        if self.generators.is_empty() {
            return v("case has no generators".into());
        }
        if self.loads.is_empty() {
            return v("case has no loads".into());
        }
        if !(self.base_mva.is_finite() && self.base_mva > 0.0) {
            return v("base_mva must be positive".into());
        }
        for (i, g) in self.generators.iter().enumerate() {
            if g.bus >= self.n_bus {
                return v(format!("generator {} at unknown bus", i + 1));
            }
            if !(g.p_min.is_finite() && g.p_max.is_finite() && g.cost.is_finite()) {
                return v(format!("generator {} has non-finite data", i + 1));
            }
            if g.p_min < 0.0 || g.p_min > g.p_max {
                return v(format!(
                    "generator {} needs 0 <= p_min <= p_max, got [{}, {}]",
                    i + 1,
                    g.p_min,
                    g.p_max
                ));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            if l.bus >= self.n_bus {
                return v(format!("load {} at unknown bus", i + 1));
            }
            if !(l.p_max_nominal.is_finite() && l.p_max_nominal >= 0.0) {
                return v(format!("load {} has invalid nominal demand", i + 1));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.from_bus >= self.n_bus || l.to_bus >= self.n_bus {
                return v(format!("line {} references an unknown bus", i + 1));
            }
            if l.from_bus == l.to_bus {
                return v(format!("line {} is a self-loop", i + 1));
            }
            if !(l.susceptance.is_finite() && l.susceptance > 0.0) {
                return v(format!("line {} needs susceptance > 0", i + 1));
            }
            if !(l.flow_limit.is_finite() && l.flow_limit > 0.0) {
                return v(format!("line {} needs flow_limit > 0", i + 1));
            }
        }
        self.check_connected()
    }

    fn check_connected(&self) -> Result<()> {
        let mut adj = vec![Vec::new(); self.n_bus];
        for l in &self.lines {
            adj[l.from_bus].push(l.to_bus);
            adj[l.to_bus].push(l.from_bus);
        }
        let mut seen = vec![false; self.n_bus];
        let mut queue = VecDeque::from([self.slack_bus]);
        seen[self.slack_bus] = true;
        while let Some(b) = queue.pop_front() {
            for &n in &adj[b] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        let missing: Vec<String> = seen
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(b, _)| (b + 1).to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Disconnected(format!(
                "buses {} are unreachable from the slack bus",
                missing.join(", ")
            )))
        }
    }

    /// Serialises back to the case-file schema (1-based buses).
    pub fn to_toml(&self) -> String {
        let shift = |b: usize| b + 1;
        let file = CaseFile {
            name: Some(self.name.clone()),
            n_bus: self.n_bus,
            slack_bus: shift(self.slack_bus),
            base_mva: self.base_mva,
            generators: self
                .generators
                .iter()
                .map(|g| Generator {
                    bus: shift(g.bus),
                    ..g.clone()
                })
                .collect(),
            loads: self
                .loads
                .iter()
                .map(|l| Load {
                    bus: shift(l.bus),
                    ..l.clone()
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| Line {
                    from_bus: shift(l.from_bus),
                    to_bus: shift(l.to_bus),
                    ..l.clone()
                })
                .collect(),
        };
        toml::to_string(&file).expect("case serialisation cannot fail")
    }
}

/// Reads and validates a case file.
pub fn load_case<R: Read>(mut source: R) -> Result<GridCase> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    parse_case(&text)
}

pub fn parse_case(text: &str) -> Result<GridCase> {
    let file: CaseFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let to_zero = |b: usize, what: &str| -> Result<usize> {
        if b == 0 {
            Err(Error::Validation(format!("{what}: bus numbers are 1-based")))
        } else {
            Ok(b - 1)
        }
    };
    let mut generators = Vec::with_capacity(file.generators.len());
    for g in file.generators {
        generators.push(Generator {
            bus: to_zero(g.bus, "generator")?,
            ..g
        });
    }
    let mut loads = Vec::with_capacity(file.loads.len());
    for l in file.loads {
        loads.push(Load {
            bus: to_zero(l.bus, "load")?,
            ..l
        });
    }
    let mut lines = Vec::with_capacity(file.lines.len());
    for l in file.lines {
        lines.push(Line {
            from_bus: to_zero(l.from_bus, "line")?,
            to_bus: to_zero(l.to_bus, "line")?,
            ..l
        });
    }
    let case = GridCase {
        name: file.name.unwrap_or_else(|| "case".to_string()),
        n_bus: file.n_bus,
        slack_bus: to_zero(file.slack_bus, "slack_bus")?,
        base_mva: file.base_mva,
        generators,
        loads,
        lines,
    };
    case.validate()?;
    Ok(case)
}

/// Case files shipped with the crate, by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "case39" => Some(include_str!("../cases/case39.toml")),
        "case5" => Some(include_str!("../cases/case5.toml")),
        "case3" => Some(include_str!("../cases/case3.toml")),
        _ => None,
    }
}

pub fn bundled_names() -> &'static [&'static str] {
    &["case3", "case5", "case39"]
}

pub fn load_bundled(name: &str) -> Result<GridCase> {
    let text = bundled(name).ok_or_else(|| Error::Validation(format!("no bundled case `{name}`")))?;
    parse_case(text)
}

/// Line-by-bus sensitivity matrix, slack-referenced.
#[derive(Clone, Debug, PartialEq)]
pub struct PtdfMatrix {
    /// `n_line × n_bus`.
    pub entries: DMatrix<f64>,
}

impl PtdfMatrix {
    pub fn n_lines(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_buses(&self) -> usize {
        self.entries.ncols()
    }

    pub fn get(&self, line: usize, bus: usize) -> f64 {
        self.entries[(line, bus)]
    }

    /// Line flows for nodal injections `inj` (MW).
    pub fn flows(&self, inj: &[f64]) -> Vec<f64> {
        (0..self.n_lines())
            .map(|l| (0..self.n_buses()).map(|b| self.entries[(l, b)] * inj[b]).sum())
            .collect()
    }

    /// Columns of the generator buses: `n_line × n_gen`.
    pub fn generator_columns(&self, case: &GridCase) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_lines(), case.n_gen(), |l, i| {
            self.entries[(l, case.generators[i].bus)]
        })
    }

    /// Columns of the load buses: `n_line × n_load`.
    pub fn load_columns(&self, case: &GridCase) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_lines(), case.n_load(), |l, k| {
            self.entries[(l, case.loads[k].bus)]
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest L1 norm over rows.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.n_lines())
            .map(|l| self.entries.row(l).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Computes slack-referenced PTDFs: the reduced nodal susceptance matrix is
/// inverted and left-multiplied by the branch susceptance incidence.
pub fn compute_ptdf(case: &GridCase) -> Result<PtdfMatrix> {
    let n = case.n_bus;
    let s = case.slack_bus;
    let reduced: Vec<usize> = (0..n).filter(|&b| b != s).collect();
    let pos = |b: usize| -> Option<usize> {
        if b == s {
            None
        } else if b < s {
            Some(b)
        } else {
            Some(b - 1)
        }
    };

    let mut bred = DMatrix::<f64>::zeros(n - 1, n - 1);
    for l in &case.lines {
        let (f, t, b) = (pos(l.from_bus), pos(l.to_bus), l.susceptance);
        if let Some(f) = f {
            bred[(f, f)] += b;
        }
        if let Some(t) = t {
            bred[(t, t)] += b;
        }
        if let (Some(f), Some(t)) = (f, t) {
            bred[(f, t)] -= b;
            bred[(t, f)] -= b;
        }
    }
    let inv = if n > 1 {
        bred.clone().try_inverse().ok_or_else(|| {
            Error::Numerical("reduced susceptance matrix is singular".into())
        })?
    } else {
        bred
    };
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("reduced susceptance inverse is not finite".into()));
    }

    let mut entries = DMatrix::<f64>::zeros(case.n_line(), n);
    for (li, l) in case.lines.iter().enumerate() {
        for (k, &bus) in reduced.iter().enumerate() {
            let tf = pos(l.from_bus).map_or(0.0, |f| inv[(f, k)]);
            let tt = pos(l.to_bus).map_or(0.0, |t| inv[(t, k)]);
            entries[(li, bus)] = l.susceptance * (tf - tt);
        }
    }
    Ok(PtdfMatrix { entries })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn two_bus(cost: f64, p_max: f64, limit: f64, load: f64) -> GridCase {
        GridCase {
            name: "two-bus".into(),
            n_bus: 2,
            slack_bus: 0,
            base_mva: 100.0,
            generators: vec![Generator {
                bus: 0,
                p_min: 0.0,
                p_max,
                cost,
            }],
            loads: vec![Load {
                bus: 1,
                p_max_nominal: load,
            }],
            lines: vec![Line {
                from_bus: 0,
                to_bus: 1,
                susceptance: 10.0,
                flow_limit: limit,
            }],
        }
    }

    pub fn three_bus_ring() -> GridCase {
        let line = |f, t| Line {
            from_bus: f,
            to_bus: t,
            susceptance: 5.0,
            flow_limit: 100.0,
        };
        GridCase {
            name: "ring".into(),
            n_bus: 3,
            slack_bus: 0,
            base_mva: 100.0,
            generators: vec![
                Generator {
                    bus: 0,
                    p_min: 0.0,
                    p_max: 200.0,
                    cost: 10.0,
                },
                Generator {
                    bus: 1,
                    p_min: 0.0,
                    p_max: 200.0,
                    cost: 20.0,
                },
            ],
            loads: vec![Load {
                bus: 2,
                p_max_nominal: 150.0,
            }],
            lines: vec![line(0, 1), line(1, 2), line(2, 0)],
        }
    }
}
