use super::stats::{mean, spearman, standard_error, welch_greater};
use super::table::{num, Table};
use super::HarnessError;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Per-cell means of a samples table.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub mode: String,
    pub cell: String,
    /// `lambda, eta, k, optimizer, layer` as written in the samples table.
    pub settings: Vec<String>,
    pub n: usize,
    pub mean_objective: f64,
    pub se_objective: f64,
    pub mean_pll: f64,
    pub se_pll: f64,
    pub mean_value: f64,
}

const SETTINGS: [&str; 5] = ["lambda", "eta", "k", "optimizer", "layer"];

/// Groups rows by `(mode, cell)` in order of first appearance.
pub fn summarize_cells(samples: &Table) -> Result<Vec<CellSummary>, HarnessError> {
    let modes = samples.strings("mode")?;
    let cells = samples.strings("cell")?;
    let obj = samples.floats("objective")?;
    let pll = samples.floats("pll")?;
    let val = samples.floats("value")?;
    let set_cols: Vec<usize> = SETTINGS.iter().map(|c| samples.column(c)).collect::<Result<_, _>>()?;
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for i in 0..samples.len() {
        let key = (modes[i].to_string(), cells[i].to_string());
        let e = groups.entry(key.clone()).or_default();
        if e.is_empty() {
            order.push(key);
        }
        e.push(i);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let idx = &groups[&key];
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let (o, p, v) = (pick(&obj), pick(&pll), pick(&val));
            CellSummary {
                settings: set_cols.iter().map(|&c| samples.rows[idx[0]][c].clone()).collect(),
                mode: key.0,
                cell: key.1,
                n: idx.len(),
                mean_objective: mean(&o),
                se_objective: standard_error(&o),
                mean_pll: mean(&p),
                se_pll: standard_error(&p),
                mean_value: mean(&v),
            }
        })
        .collect())
}

/// Rank correlation of lambda with objective and likelihood, per group of
/// otherwise identical settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Trend {
    pub mode: String,
    /// `eta, k, optimizer, layer` shared by the group.
    pub group: String,
    pub lambdas: usize,
    pub n: usize,
    pub rho_objective: f64,
    /// One-sided p-value for objective decreasing in lambda.
    pub p_objective: f64,
    pub rho_pll: f64,
    /// One-sided p-value for likelihood increasing in lambda.
    pub p_pll: f64,
}

/// Guided cell against the unguided chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedVsUnguided {
    pub mode: String,
    pub cell: String,
    pub guided_mean: f64,
    pub unguided_mean: f64,
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for the guided mean exceeding the unguided mean.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TradeoffTests {
    pub trends: Vec<Trend>,
    pub comparisons: Vec<GuidedVsUnguided>,
}

pub fn tradeoff_tests(samples: &Table) -> Result<TradeoffTests, HarnessError> {
    let modes = samples.strings("mode")?;
    let cells = samples.strings("cell")?;
    let lambda = samples.floats("lambda")?;
    let obj = samples.floats("objective")?;
    let pll = samples.floats("pll")?;
    let rest: Vec<Vec<&str>> = SETTINGS[1..].iter().map(|c| samples.strings(c)).collect::<Result<_, _>>()?;
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    let mut unguided: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..samples.len() {
        if cells[i] == "unguided" {
            unguided.entry(modes[i].to_string()).or_default().push(obj[i]);
            continue;
        }
        let g = rest.iter().map(|c| c[i]).collect::<Vec<_>>().join("/");
        groups.entry((modes[i].to_string(), g)).or_default().push(i);
    }
    let mut out = TradeoffTests::default();
    for ((mode, group), idx) in &groups {
        let lams: Vec<f64> = idx.iter().map(|&i| lambda[i]).collect();
        let distinct: BTreeSet<u64> = lams.iter().map(|l| l.to_bits()).collect();
        if distinct.len() < 2 {
            continue;
        }
        let so = spearman(&lams, &idx.iter().map(|&i| obj[i]).collect::<Vec<_>>());
        let sp = spearman(&lams, &idx.iter().map(|&i| pll[i]).collect::<Vec<_>>());
        out.trends.push(Trend {
            mode: mode.clone(),
            group: group.clone(),
            lambdas: distinct.len(),
            n: idx.len(),
            rho_objective: so.rho,
            p_objective: so.p_one_sided(true),
            rho_pll: sp.rho,
            p_pll: sp.p_one_sided(false),
        });
    }
    for s in summarize_cells(samples)? {
        if s.cell == "unguided" {
            continue;
        }
        let Some(base) = unguided.get(&s.mode) else { continue };
        let vals: Vec<f64> = (0..samples.len())
            .filter(|&i| modes[i] == s.mode && cells[i] == s.cell)
            .map(|i| obj[i])
            .collect();
        let (t, df, p) = welch_greater(&vals, base);
        out.comparisons.push(GuidedVsUnguided {
            mode: s.mode.clone(),
            cell: s.cell.clone(),
            guided_mean: mean(&vals),
            unguided_mean: mean(base),
            t,
            df,
            p,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub budget: usize,
    pub salient: bool,
    pub guided: bool,
    pub n: usize,
    pub mean_acquisition: f64,
    pub se_acquisition: f64,
    pub mean_edits: f64,
}

/// Cell means plus, per budget, the main effects of edit selection and of
/// guidance (each averaged over the other factor).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    /// `(budget, salient minus uniform, guided minus unguided)`.
    pub gaps: Vec<(usize, f64, f64)>,
}

impl AblationSummary {
    pub fn cell(&self, budget: usize, salient: bool, guided: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.budget == budget && r.salient == salient && r.guided == guided)
    }
}

pub fn summarize_ablation(designs: &Table) -> Result<AblationSummary, HarnessError> {
    let budget = designs.floats("budget")?;
    let sel = designs.strings("selection")?;
    let guid = designs.strings("guidance")?;
    let acq = designs.floats("acquisition")?;
    let edits = designs.floats("edits")?;
    let mut groups: BTreeMap<(usize, bool, bool), Vec<usize>> = BTreeMap::new();
    for i in 0..designs.len() {
        groups
            .entry((budget[i] as usize, sel[i] == "salient", guid[i] == "on"))
            .or_default()
            .push(i);
    }
    let mut out = AblationSummary::default();
    for (&(b, s, g), idx) in groups.iter().rev() {
        let a: Vec<f64> = idx.iter().map(|&i| acq[i]).collect();
        let e: Vec<f64> = idx.iter().map(|&i| edits[i]).collect();
        out.rows.push(AblationRow {
            budget: b,
            salient: s,
            guided: g,
            n: idx.len(),
            mean_acquisition: mean(&a),
            se_acquisition: standard_error(&a),
            mean_edits: mean(&e),
        });
    }
    out.rows.sort_by(|x, y| x.budget.cmp(&y.budget).then(y.salient.cmp(&x.salient)).then(y.guided.cmp(&x.guided)));
    let budgets: BTreeSet<usize> = out.rows.iter().map(|r| r.budget).collect();
    for b in budgets {
        let m = |s, g| out.cell(b, s, g).map(|r| r.mean_acquisition);
        if let (Some(sg), Some(su), Some(ug), Some(uu)) = (m(true, true), m(true, false), m(false, true), m(false, false)) {
            out.gaps.push((b, (sg + su - ug - uu) / 2.0, (sg + ug - su - uu) / 2.0));
        }
    }
    Ok(out)
}

fn missing_refs(refs: &[&str], known: &BTreeSet<&str>) -> Vec<String> {
    refs.iter().filter(|r| !known.contains(*r)).map(|r| r.to_string()).collect()
}

/// Reads whatever result tables exist in `dir` and writes `report.csv`
/// (section, key, value) and `report.md`. Fails if a trace or front row
/// names a sample absent from `samples.csv`, or a design names an unknown
/// seed.
pub fn write_report(dir: &Path) -> Result<Table, HarnessError> {
    let mut rep = Table::new(&["section", "key", "value"]);
    let mut md = String::from("# Run report\n");
    let put = |rep: &mut Table, section: &str, key: String, value: String| {
        rep.push(vec![section.to_string(), key, value]);
    };
    let read = |name: &str| -> Result<Option<Table>, HarnessError> {
        let p = dir.join(name);
        if p.exists() {
            Table::read(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let mut found = false;
    if let Some(metrics) = read("metrics.csv")? {
        found = true;
        md.push_str("\n## Training\n\n| metric | value |\n|---|---|\n");
        for r in &metrics.rows {
            put(&mut rep, "train", r[0].clone(), r[1].clone());
            md.push_str(&format!("| {} | {} |\n", r[0], r[1]));
        }
    }
    if let Some(samples) = read("samples.csv")? {
        found = true;
        let ids: BTreeSet<&str> = samples.strings("sample_id")?.into_iter().collect();
        for name in ["traces.csv", "front.csv"] {
            if let Some(t) = read(name)? {
                let bad = missing_refs(&t.strings("sample_id")?, &ids);
                if !bad.is_empty() {
                    return Err(HarnessError::Runtime(format!("{name} references unknown samples {bad:?}")));
                }
            }
        }
        md.push_str("\n## Sampling\n\n| mode | cell | n | objective | pll |\n|---|---|---|---|---|\n");
        for s in summarize_cells(&samples)? {
            let key = format!("{}:{}", s.mode, s.cell);
            put(&mut rep, "sample_objective", key.clone(), num(s.mean_objective));
            put(&mut rep, "sample_pll", key, num(s.mean_pll));
            md.push_str(&format!(
                "| {} | {} | {} | {:.4} ± {:.4} | {:.3} ± {:.3} |\n",
                s.mode, s.cell, s.n, s.mean_objective, s.se_objective, s.mean_pll, s.se_pll
            ));
        }
        let tests = tradeoff_tests(&samples)?;
        if !tests.trends.is_empty() {
            md.push_str("\n| mode | settings | rho(lambda, objective) | p | rho(lambda, pll) | p |\n|---|---|---|---|---|---|\n");
        }
        for t in &tests.trends {
            let key = format!("{}:{}", t.mode, t.group);
            put(&mut rep, "trend_objective_rho", key.clone(), num(t.rho_objective));
            put(&mut rep, "trend_objective_p", key.clone(), num(t.p_objective));
            put(&mut rep, "trend_pll_rho", key.clone(), num(t.rho_pll));
            put(&mut rep, "trend_pll_p", key, num(t.p_pll));
            md.push_str(&format!(
                "| {} | {} | {:.3} | {:.2e} | {:.3} | {:.2e} |\n",
                t.mode, t.group, t.rho_objective, t.p_objective, t.rho_pll, t.p_pll
            ));
        }
        for c in &tests.comparisons {
            put(&mut rep, "guided_vs_unguided_p", format!("{}:{}", c.mode, c.cell), num(c.p));
        }
    }
    if let Some(m) = read("mcmc_summary.csv")? {
        found = true;
        md.push_str("\n## MCMC comparison\n\n| quantity | value |\n|---|---|\n");
        for r in &m.rows {
            put(&mut rep, "mcmc", r[0].clone(), r[1].clone());
            md.push_str(&format!("| {} | {} |\n", r[0], r[1]));
        }
    }
    if let Some(inf) = read("infill.csv")? {
        found = true;
        let rec = inf.floats("recovery")?;
        let viol = inf.floats("conserved_violations")?;
        put(&mut rep, "infill", "mean_recovery".into(), num(mean(&rec)));
        put(&mut rep, "infill", "conserved_violations".into(), num(viol.iter().sum()));
        md.push_str(&format!(
            "\n## Infilling\n\n{} sequences, mean recovery {:.4}, conserved violations {}\n",
            inf.len(),
            mean(&rec),
            viol.iter().sum::<f64>()
        ));
    }
    for (name, section) in [("designs.csv", "optimize"), ("ablation_designs.csv", "ablation")] {
        let Some(d) = read(name)? else { continue };
        found = true;
        let seeds = d.strings("seed_id")?;
        if seeds.iter().any(|s| s.is_empty()) {
            return Err(HarnessError::Runtime(format!("{name} has designs without a seed")));
        }
        let edits = d.floats("edits")?;
        let budget = d.floats("budget")?;
        let over = edits.iter().zip(&budget).filter(|(e, b)| e > b).count();
        let viol: f64 = d.floats("constraint_violations")?.iter().sum();
        let cons: f64 = d.floats("conserved_violations")?.iter().sum();
        let acq = d.floats("acquisition")?;
        put(&mut rep, section, "designs".into(), d.len().to_string());
        put(&mut rep, section, "over_budget".into(), over.to_string());
        put(&mut rep, section, "constraint_violations".into(), num(viol));
        put(&mut rep, section, "conserved_violations".into(), num(cons));
        put(&mut rep, section, "mean_acquisition".into(), num(mean(&acq)));
        md.push_str(&format!(
            "\n## {section}\n\n{} designs, mean acquisition {:.4}, over budget {over}, constraint violations {viol}, conserved violations {cons}\n",
            d.len(),
            mean(&acq)
        ));
        if section == "ablation" {
            let s = summarize_ablation(&d)?;
            md.push_str("\n| budget | selection | guidance | n | acquisition | edits |\n|---|---|---|---|---|---|\n");
            for r in &s.rows {
                md.push_str(&format!(
                    "| {} | {} | {} | {} | {:.4} ± {:.4} | {:.2} |\n",
                    r.budget,
                    if r.salient { "salient" } else { "uniform" },
                    if r.guided { "on" } else { "off" },
                    r.n,
                    r.mean_acquisition,
                    r.se_acquisition,
                    r.mean_edits
                ));
            }
            for (b, sg, gg) in &s.gaps {
                put(&mut rep, "ablation_selection_gap", b.to_string(), num(*sg));
                put(&mut rep, "ablation_guidance_gap", b.to_string(), num(*gg));
            }
        }
    }
    if !found {
        return Err(HarnessError::Runtime(format!("no result tables in {}", dir.display())));
    }
    rep.write(&dir.join("report.csv"))?;
    std::fs::write(dir.join("report.md"), md)?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Table {
        let mut t = Table::new(&["sample_id", "mode", "cell", "lambda", "eta", "k", "optimizer", "layer", "objective", "pll", "value"]);
        let mut add = |id: &str, cell: &str, lam: &str, o: f64, p: f64| {
            let g = if lam.is_empty() { ["", "", "", ""] } else { ["0.5", "5", "sgd", "last"] };
            let mut row = vec![id.to_string(), "diffusion".into(), cell.into(), lam.into()];
            row.extend(g.iter().map(|s| s.to_string()));
            row.extend([num(o), num(p), num(o)]);
            t.push(row);
        };
        for i in 0..6 {
            add(&format!("u{i}"), "unguided", "", 0.1 + 0.01 * i as f64, -50.0);
            add(&format!("a{i}"), "a", "0.1", 0.6 + 0.01 * i as f64, -60.0 + i as f64);
            add(&format!("b{i}"), "b", "1", 0.4 + 0.01 * i as f64, -55.0 + i as f64);
            add(&format!("c{i}"), "c", "10", 0.2 + 0.01 * i as f64, -52.0 + i as f64);
        }
        t
    }

    #[test]
    fn cell_summaries_and_trends() {
        let t = samples();
        let s = summarize_cells(&t).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].cell, "unguided");
        assert!((s[1].mean_objective - 0.625).abs() < 1e-12);
        let tests = tradeoff_tests(&t).unwrap();
        assert_eq!(tests.trends.len(), 1);
        let tr = &tests.trends[0];
        assert!(tr.rho_objective < -0.8 && tr.p_objective < 0.01);
        assert!(tr.rho_pll > 0.5 && tr.p_pll < 0.01);
        let a = tests.comparisons.iter().find(|c| c.cell == "a").unwrap();
        assert!(a.p < 1e-6);
    }

    #[test]
    fn ablation_main_effects() {
        let mut t = Table::new(&["budget", "selection", "guidance", "acquisition", "edits"]);
        for (sel, g, a) in [("salient", "on", 4.0), ("salient", "off", 3.0), ("uniform", "on", 2.0), ("uniform", "off", 0.0)] {
            for _ in 0..3 {
                t.push(vec!["2".into(), sel.into(), g.into(), num(a), "2".into()]);
            }
        }
        let s = summarize_ablation(&t).unwrap();
        assert_eq!(s.rows.len(), 4);
        assert!(s.rows[0].salient && s.rows[0].guided);
        assert_eq!(s.gaps, vec![(2, 2.5, 1.5)]);
    }

    #[test]
    fn report_checks_referential_integrity() {
        let dir = tempfile::tempdir().unwrap();
        samples().write(&dir.path().join("samples.csv")).unwrap();
        let mut front = Table::new(&["sample_id", "objective", "pll"]);
        front.push(vec!["a0".into(), "0.6".into(), "-60".into()]);
        front.write(&dir.path().join("front.csv")).unwrap();
        let rep = write_report(dir.path()).unwrap();
        assert!(!rep.is_empty());
        assert!(dir.path().join("report.md").exists());
        front.push(vec!["zz".into(), "0.6".into(), "-60".into()]);
        front.write(&dir.path().join("front.csv")).unwrap();
        assert!(write_report(dir.path()).is_err());
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_report(dir.path()).is_err());
    }
}
