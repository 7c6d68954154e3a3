//! JSON output schemas and markdown tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use pinnopf::pinn::{Evaluation, LossBreakdown, TrainConfig, TrainHistory};
use pinnopf::verifier::{WorstCase, WorstCaseKind};

use crate::{validity_row, variant_label};

/// Where a result came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub case: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

impl Provenance {
    pub fn new<const N: usize>(command: &str, case: &str, hash: &str, seeds: [(&str, u64); N]) -> Self {
        Self::with_seeds(
            command,
            case,
            hash,
            seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        )
    }

    pub fn with_seeds(command: &str, case: &str, hash: &str, seeds: BTreeMap<String, u64>) -> Self {
        Provenance {
            tool: "pinnopf".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            case: case.into(),
            config_hash: hash.into(),
            seeds,
        }
    }
}

/// Loss terms of one epoch: `[total, mae_p, mae_l, mae_eps]`.
pub type LossRecord = [f64; 4];

fn record(b: &LossBreakdown) -> LossRecord {
    [b.total, b.mae_p, b.mae_l, b.mae_eps]
}

/// Sidecar written next to every trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCard {
    pub provenance: Provenance,
    pub config: TrainConfig,
    pub best_epoch: Option<usize>,
    pub train_loss: Vec<LossRecord>,
    pub validation_loss: Vec<LossRecord>,
}

impl TrainCard {
    pub fn new(provenance: Provenance, config: TrainConfig, history: &TrainHistory) -> Self {
        TrainCard {
            provenance,
            config,
            best_epoch: history.best_epoch,
            train_loss: history.train.iter().map(record).collect(),
            validation_loss: history.validation.iter().map(record).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub variant: Option<String>,
    pub label: String,
    pub pool: String,
    pub n: usize,
    pub mae_pct: f64,
    pub v_g_mw: f64,
    pub v_line_mw: f64,
    pub v_dist_pct: f64,
    pub v_opt_pct: f64,
    pub max_v_g_mw: f64,
    pub max_v_line_mw: f64,
    pub max_v_dist_pct: f64,
    pub share_gen_violated: f64,
    pub share_line_violated: f64,
    pub train_config_hash: Option<String>,
    pub train_seed: Option<u64>,
}

impl EvalRow {
    pub fn new(model: String, card: Option<&TrainCard>, pool: &str, ev: &Evaluation) -> Self {
        let variant = card.map(|c| c.config.variant.name().to_string());
        EvalRow {
            model,
            label: variant_label(variant.as_deref()),
            variant,
            pool: pool.into(),
            n: ev.n,
            mae_pct: ev.mean.mae_pct,
            v_g_mw: ev.mean.v_g,
            v_line_mw: ev.mean.v_line,
            v_dist_pct: ev.mean.v_dist,
            v_opt_pct: ev.mean.v_opt,
            max_v_g_mw: ev.max_v_g,
            max_v_line_mw: ev.max_v_line,
            max_v_dist_pct: ev.max_v_dist,
            share_gen_violated: ev.share_gen_violated,
            share_line_violated: ev.share_line_violated,
            train_config_hash: card.map(|c| c.provenance.config_hash.clone()),
            train_seed: card.map(|c| c.config.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub kind: String,
    pub provenance: Provenance,
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityRow {
    pub passed: bool,
    pub min_big_m_slack: f64,
    pub max_complementarity: f64,
    pub max_relu_error: f64,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseRow {
    pub objective: String,
    pub value: f64,
    pub units: String,
    /// Violations as a share of the maximum system loading.
    pub pct_of_max_loading: Option<f64>,
    /// MW for distance, $/h for sub-optimality, MW otherwise.
    pub absolute: f64,
    pub argmax_pd: Vec<f64>,
    pub best_bound: Option<f64>,
    /// Bound minus incumbent; absent when no finite bound was proven.
    pub gap: Option<f64>,
    pub nodes: usize,
    pub milps_solved: usize,
    pub unstable_neurons: usize,
    pub witness: String,
    pub validity: ValidityRow,
}

impl WorstCaseRow {
    pub fn new(wc: &WorstCase, max_loading: f64) -> Self {
        let pct = matches!(wc.kind, WorstCaseKind::GenViolation | WorstCaseKind::LineViolation)
            .then(|| 100.0 * wc.value / max_loading);
        WorstCaseRow {
            objective: wc.kind.name().into(),
            value: wc.value,
            units: wc.kind.units().into(),
            pct_of_max_loading: pct,
            absolute: wc.absolute,
            argmax_pd: wc.argmax_pd.clone(),
            best_bound: finite(wc.certificate.best_bound),
            gap: finite(wc.bound_gap),
            nodes: wc.certificate.nodes,
            milps_solved: wc.milps_solved,
            unstable_neurons: wc.unstable_neurons,
            witness: wc.witness.clone(),
            validity: validity_row(wc),
        }
    }

    pub fn proven(&self) -> bool {
        self.gap.is_some_and(|g| g <= 0.0) && self.validity.passed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationFile {
    pub kind: String,
    pub provenance: Provenance,
    pub model: String,
    pub variant: Option<String>,
    pub max_loading_mw: f64,
    pub node_limit: usize,
    pub results: Vec<WorstCaseRow>,
}

impl VerificationFile {
    fn get(&self, objective: &str) -> Option<&WorstCaseRow> {
        self.results.iter().find(|r| r.objective == objective)
    }
}

/// One row of the worst-case tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstRow {
    pub label: String,
    pub model: String,
    pub case: String,
    pub v_g_mw: Option<f64>,
    pub v_g_pct: Option<f64>,
    pub v_line_mw: Option<f64>,
    pub v_line_pct: Option<f64>,
    pub v_dist_pct: Option<f64>,
    pub v_opt_pct: Option<f64>,
    /// Largest gap over the objectives; absent if any objective lacks a bound.
    pub max_gap: Option<f64>,
    pub all_valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub label: String,
    pub model: String,
    pub source: Provenance,
}

/// Aggregated report contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub tool: String,
    pub version: String,
    pub average: Vec<EvalRow>,
    pub worst_case: Vec<WorstRow>,
    pub provenance: Vec<ProvenanceRow>,
}

fn label_rank(label: &str) -> usize {
    ["NN", "Pg Abs", "Pg Sqr", "Pg Exp", "KKT"]
        .iter()
        .position(|l| *l == label)
        .unwrap_or(usize::MAX)
}

fn order(a: (&str, &str), b: (&str, &str)) -> std::cmp::Ordering {
    label_rank(a.0).cmp(&label_rank(b.0)).then_with(|| a.cmp(&b))
}

pub fn aggregate(evaluations: &[EvaluationFile], verifications: &[VerificationFile]) -> ReportBundle {
    let mut average: Vec<EvalRow> = evaluations.iter().flat_map(|f| f.rows.iter().cloned()).collect();
    average.sort_by(|a, b| order((&a.label, &a.model), (&b.label, &b.model)));

    let mut worst_case: Vec<WorstRow> = verifications
        .iter()
        .map(|f| {
            let value = |o: &str| f.get(o).map(|r| r.value);
            let pct = |o: &str| f.get(o).and_then(|r| r.pct_of_max_loading);
            let max_gap = f
                .results
                .iter()
                .try_fold(0.0f64, |acc, r| r.gap.map(|g| acc.max(g)));
            WorstRow {
                label: variant_label(f.variant.as_deref()),
                model: f.model.clone(),
                case: f.provenance.case.clone(),
                v_g_mw: value("gen_violation"),
                v_g_pct: pct("gen_violation"),
                v_line_mw: value("line_violation"),
                v_line_pct: pct("line_violation"),
                v_dist_pct: value("distance"),
                v_opt_pct: value("suboptimality"),
                max_gap,
                all_valid: f.results.iter().all(|r| r.validity.passed),
            }
        })
        .collect();
    worst_case.sort_by(|a, b| order((&a.label, &a.model), (&b.label, &b.model)));

    let mut provenance: Vec<ProvenanceRow> = evaluations
        .iter()
        .flat_map(|f| {
            f.rows.iter().map(|r| ProvenanceRow {
                label: r.label.clone(),
                model: r.model.clone(),
                source: f.provenance.clone(),
            })
        })
        .chain(verifications.iter().map(|f| ProvenanceRow {
            label: variant_label(f.variant.as_deref()),
            model: f.model.clone(),
            source: f.provenance.clone(),
        }))
        .collect();
    provenance.sort_by(|a, b| {
        order((&a.label, &a.model), (&b.label, &b.model)).then_with(|| a.source.command.cmp(&b.source.command))
    });

    ReportBundle {
        tool: "pinnopf".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        average,
        worst_case,
        provenance,
    }
}

fn cell(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// Average-performance table for evaluation rows.
pub fn evaluation_table(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    s.push_str("| Model | Pool | N | MAE (%) | v_g (MW) | v_line (MW) | v_dist (%) | v_opt (%) |\n");
    s.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} ({}) | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
            r.label, r.model, r.pool, r.n, r.mae_pct, r.v_g_mw, r.v_line_mw, r.v_dist_pct, r.v_opt_pct
        );
    }
    s
}

/// Per-objective table for one verification run.
pub fn verification_table(f: &VerificationFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {} on {}", f.model, f.provenance.case);
    s.push_str("| Objective | Value | Units | % max loading | Absolute | Gap | Nodes | Valid |\n");
    s.push_str("|---|---:|---|---:|---:|---:|---:|---|\n");
    for r in &f.results {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {} | {} | {:.4} | {} | {} | {} |",
            r.objective,
            r.value,
            r.units,
            cell(r.pct_of_max_loading, 2),
            r.absolute,
            cell(r.gap, 6),
            r.nodes,
            if r.validity.passed { "yes" } else { "no" }
        );
    }
    s
}

pub fn markdown(b: &ReportBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# pinnopf report\n\nGenerated by {} {}.\n", b.tool, b.version);

    s.push_str("## Average performance\n\n");
    if b.average.is_empty() {
        s.push_str("No evaluation inputs.\n\n");
    } else {
        s.push_str(&evaluation_table(&b.average));
        s.push('\n');
    }

    s.push_str("## Worst-case constraint violations\n\n");
    if b.worst_case.is_empty() {
        s.push_str("No verification inputs.\n\n");
    } else {
        s.push_str("| Model | v_g (MW) | v_g (% max loading) | v_line (MW) | v_line (% max loading) | Gap | Valid |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|---|\n");
        for r in &b.worst_case {
            let _ = writeln!(
                s,
                "| {} ({}) | {} | {} | {} | {} | {} | {} |",
                r.label,
                r.model,
                cell(r.v_g_mw, 3),
                cell(r.v_g_pct, 2),
                cell(r.v_line_mw, 3),
                cell(r.v_line_pct, 2),
                cell(r.max_gap, 6),
                if r.all_valid { "yes" } else { "no" }
            );
        }
        s.push('\n');

        s.push_str("## Worst-case distance and sub-optimality\n\n");
        s.push_str("| Model | v_dist (%) | v_opt (%) |\n|---|---:|---:|\n");
        for r in &b.worst_case {
            let _ = writeln!(
                s,
                "| {} ({}) | {} | {} |",
                r.label,
                r.model,
                cell(r.v_dist_pct, 3),
                cell(r.v_opt_pct, 3)
            );
        }
        s.push('\n');
    }

    s.push_str("## Provenance\n\n| Model | Command | Case | Config hash | Seeds | Version |\n|---|---|---|---|---|---|\n");
    for p in &b.provenance {
        let seeds: Vec<String> = p.source.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            s,
            "| {} ({}) | {} | {} | {} | {} | {} |",
            p.label,
            p.model,
            p.source.command,
            p.source.case,
            &p.source.config_hash[..p.source.config_hash.len().min(16)],
            seeds.join(" "),
            p.source.version
        );
    }
    s
}
