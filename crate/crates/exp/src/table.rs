//! Result tables: per-equation activation tables, the benchmark comparison
//! with published baselines and the transfer-method comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pinnx_core::activations::Family;
use pinnx_core::metrics::EvalRegion;
use pinnx_core::pde::Equation;
use pinnx_core::trainer::TlMethod;

use crate::error::{IoContext, Result};
use crate::runner::RunSummary;

/// Published extrapolation L2 errors of methods that are not reimplemented.
pub fn baselines(equation: Equation) -> &'static [(&'static str, f64)] {
    match equation {
        Equation::AllenCahn => &[("SA-PINN", 0.18), ("w-s PINN", 0.14), ("DPM", 0.18)],
        Equation::Kdv => &[("s-d PINN", 0.14)],
        Equation::Burgers => &[("SA-PINN", 0.08), ("DPM", 0.09)],
    }
}

/// Activation rows in display order.
pub fn row_families(equation: Equation) -> Vec<Family> {
    let mut rows = vec![Family::Tanh, Family::XPlusSinSq, Family::Abu, Family::LcTanh, Family::LcSin];
    if equation == Equation::Kdv {
        rows.push(Family::LcXSinSq);
    }
    rows
}

pub fn family_title(f: Family) -> &'static str {
    match f {
        Family::Tanh => "tanh",
        Family::XPlusSinSq => "x + sin^2(x)",
        Family::Abu => "ABU-PINN",
        Family::LcTanh => "lctanh",
        Family::LcSin => "lcsin",
        Family::LcXSinSq => "lc(x + sin^2(x))",
    }
}

/// Missing values render as `n/a`.
fn cell(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.digits$}"),
        _ => "n/a".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn markdown(&self) -> String {
        let mut s = format!("### {}\n\n| {} |\n|", self.title, self.header.join(" | "));
        for _ in &self.header {
            s.push_str("---|");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Extrapolation L2/MAE without and with transfer learning, one row per
/// activation family. `with TL` uses each run's configured method.
pub fn activation_table(equation: Equation, runs: &[&RunSummary]) -> Table {
    let header = ["AF", "L2 without TL", "L2 with TL", "MAE without TL", "MAE with TL"].map(String::from).to_vec();
    let rows = row_families(equation)
        .into_iter()
        .map(|f| {
            let run = runs.iter().find(|r| r.family == f);
            let without = run.and_then(|r| r.initial_region(EvalRegion::Extrapolation));
            let with = run.and_then(|r| r.transfer_region(r.primary_method, EvalRegion::Extrapolation));
            vec![
                family_title(f).to_string(),
                cell(without.map(|s| s.l2.mean), 2),
                cell(with.map(|s| s.l2.mean), 2),
                cell(without.map(|s| s.mae.mean), 2),
                cell(with.map(|s| s.mae.mean), 2),
            ]
        })
        .collect();
    Table { title: format!("{} extrapolation errors", equation_title(equation)), header, rows }
}

/// The activation with the lowest with-TL extrapolation L2 against the
/// published baselines.
pub fn benchmark_table(equation: Equation, runs: &[&RunSummary]) -> Table {
    let header = vec!["Method".to_string(), "L2 extrapolation error".to_string()];
    let mut rows = Vec::new();
    let best = runs
        .iter()
        .filter_map(|r| r.transfer_region(r.primary_method, EvalRegion::Extrapolation).map(|s| (r, s.l2.mean)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((r, with)) = best {
        let name = family_title(r.family);
        rows.push(vec![format!("{name} w/o TL (ours)"), cell(r.initial_region(EvalRegion::Extrapolation).map(|s| s.l2.mean), 2)]);
        rows.push(vec![format!("{name} w/ TL (ours)"), cell(Some(with), 2)]);
    }
    for (name, v) in baselines(equation) {
        rows.push(vec![format!("{name} (published)"), format!("{v:.2}")]);
    }
    Table { title: format!("{} comparison", equation_title(equation)), header, rows }
}

/// Forgetting on `[0, 0.8]` and reduction on `(0.8, 1.0]` per method, for a
/// run that was transferred with several methods.
pub fn method_table(run: &RunSummary) -> Table {
    let header = ["TL method", "forgetting L2 %", "forgetting MAE %", "reduction L2 %", "reduction MAE %"]
        .map(String::from)
        .to_vec();
    let rows = TlMethod::ALL
        .iter()
        .map(|&m| {
            let e = run.method(m).map(|s| s.effect_per_seed);
            vec![
                m.name().to_string(),
                cell(e.map(|e| e.forgetting_l2_pct), 1),
                cell(e.map(|e| e.forgetting_mae_pct), 1),
                cell(e.map(|e| e.reduction_l2_pct), 1),
                cell(e.map(|e| e.reduction_mae_pct), 1),
            ]
        })
        .collect();
    Table { title: format!("{} {} transfer methods", equation_title(run.equation), run.activation), header, rows }
}

fn equation_title(e: Equation) -> &'static str {
    match e {
        Equation::AllenCahn => "Allen-Cahn",
        Equation::Kdv => "KdV",
        Equation::Burgers => "Burgers",
    }
}

/// Builds every table the given runs support and writes markdown and CSV
/// files into `out`. Returns the written paths.
pub fn cmd_table(summaries: &[RunSummary], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).at(out)?;
    let mut by_eq: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        by_eq.entry(s.equation.id()).or_default().push(s);
    }
    let mut tables: Vec<(String, Table)> = Vec::new();
    for eq in Equation::ALL {
        let Some(runs) = by_eq.get(eq.id()) else { continue };
        tables.push((format!("{}_activations", eq.id()), activation_table(eq, runs)));
        tables.push((format!("{}_benchmark", eq.id()), benchmark_table(eq, runs)));
        for r in runs.iter().filter(|r| r.transfer.len() > 1) {
            tables.push((format!("{}_methods_{}", eq.id(), crate::config::slug(&r.run_id)), method_table(r)));
        }
    }
    let mut written = Vec::new();
    let mut all = String::new();
    for (stem, t) in &tables {
        let p = out.join(format!("{stem}.csv"));
        fs::write(&p, t.csv()).at(&p)?;
        written.push(p);
        all.push_str(&t.markdown());
        all.push('\n');
    }
    let p = out.join("tables.md");
    fs::write(&p, all).at(&p)?;
    written.push(p);
    Ok(written)
}
