use super::config::ExperimentConfig;
use super::experiments::{
    run_ablation, run_infill, run_mcmc, run_optimize, run_sampling, select_seeds, AblationCell, DesignRecord, McmcReport,
    Mode, SamplingRun,
};
use super::report::{summarize_ablation, summarize_cells, write_report};
use super::setup::{build_corpus, prepare_model, save_checkpoint, Corpus, Prepared};
use super::svg::{chart, Series, Style};
use super::table::{num, opt, Table};
use super::HarnessError;
use crate::exec::{collect_ok, par_map};
use crate::lambo::dominates;
use crate::model::{clean_value, ExpectedClass};
use crate::rng::Streams;
use crate::seqcore::Alphabet;
use crate::train::{heldout_cross_entropy, DiffusionKind, LossKind};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Train,
    Sample,
    Infill,
    Optimize,
    Ablate,
    Report,
}

impl FromStr for Verb {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        Ok(match s {
            "train" => Verb::Train,
            "sample" => Verb::Sample,
            "infill" => Verb::Infill,
            "optimize" => Verb::Optimize,
            "ablate" => Verb::Ablate,
            "report" => Verb::Report,
            other => return Err(HarnessError::Config(format!("unknown verb {other:?}"))),
        })
    }
}

struct Out<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Out<'_> {
    fn table(&mut self, name: &str, t: &Table) -> Result<(), HarnessError> {
        let p = self.dir.join(name);
        t.write(&p)?;
        self.written.push(p);
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), HarnessError> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, body)?;
        self.written.push(p);
        Ok(())
    }
}

/// Runs one CLI verb and returns the files it wrote.
pub fn run_verb(verb: Verb, cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut out = Out { dir, written: Vec::new() };
    if verb == Verb::Report {
        write_report(dir)?;
        out.written.push(dir.join("report.csv"));
        out.written.push(dir.join("report.md"));
        return Ok(out.written);
    }
    let resolved = toml::to_string(cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    out.text("resolved_config.toml", &resolved)?;
    let streams = Streams::new(seed);
    let corpus = build_corpus(cfg, &streams)?;
    let prepared = prepare_model(cfg, &corpus, &streams)?;
    match verb {
        Verb::Train => train_outputs(&mut out, cfg, &corpus, &prepared)?,
        Verb::Sample => sample_outputs(&mut out, cfg, &corpus, &prepared, &streams)?,
        Verb::Infill => infill_outputs(&mut out, cfg, &corpus, &prepared, &streams)?,
        Verb::Optimize => {
            let seeds = select_seeds(cfg, &corpus)?;
            let designs = run_optimize(&prepared, &corpus, &seeds, &cfg.lambo, "lambo", &streams)?;
            out.table("designs.csv", &design_table(&designs, cfg, &corpus, None))?;
            let mut trace = Table::new(&["design_id", "step", "acquisition"]);
            for d in &designs {
                for (k, v) in d.trace.iter().enumerate() {
                    trace.push(vec![d.id.clone(), k.to_string(), num(*v)]);
                }
            }
            out.table("design_traces.csv", &trace)?;
            let steps = designs.first().map_or(0, |d| d.trace.len());
            let points = (0..steps)
                .map(|k| {
                    let col: Vec<f64> = designs.iter().map(|d| d.trace[k]).collect();
                    (k as f64, super::stats::mean(&col))
                })
                .collect();
            out.text(
                "designs.svg",
                &chart(
                    "Incumbent acquisition",
                    "diffusion step",
                    "mean acquisition",
                    &[Series {
                        label: "mean".into(),
                        points,
                    }],
                    Style::Line,
                ),
            )?;
        }
        Verb::Ablate => {
            let seeds = select_seeds(cfg, &corpus)?;
            let runs = run_ablation(&prepared, cfg, &corpus, &seeds, &streams)?;
            ablation_outputs(&mut out, cfg, &corpus, &runs)?;
        }
        Verb::Report => unreachable!(),
    }
    Ok(out.written)
}

fn train_outputs(out: &mut Out, cfg: &ExperimentConfig, corpus: &Corpus, prepared: &Prepared) -> Result<(), HarnessError> {
    let ck = out.dir.join("checkpoint.json");
    save_checkpoint(&prepared.model, &ck)?;
    out.written.push(ck);
    let mut log = Table::new(&["step", "kind", "loss", "lr"]);
    for r in &prepared.log {
        log.push(vec![r.step.to_string(), r.kind.as_str().to_string(), num(r.loss), num(r.lr)]);
    }
    out.table("train_log.csv", &log)?;
    let mut metrics = Table::new(&["metric", "value"]);
    let model = &prepared.model;
    if cfg.train.diffusion == DiffusionKind::Categorical && !corpus.heldout.is_empty() {
        let ce = heldout_cross_entropy(model, &corpus.heldout, &prepared.schedule)?;
        metrics.push(vec!["heldout_cross_entropy".into(), num(ce)]);
        if let Some(hmm) = &corpus.hmm {
            let h = hmm.entropy_rate();
            metrics.push(vec!["entropy_rate".into(), num(h)]);
            metrics.push(vec!["cross_entropy_ratio".into(), num(ce / h)]);
        }
    }
    for (o, obj) in corpus.objectives.iter().enumerate() {
        let errs = collect_ok(par_map(&corpus.heldout, |_, s| {
            clean_value(model, s, &ExpectedClass { objective: o }).map(|v| (v - obj.label(obj.value(s)) as f64).abs())
        }))?;
        metrics.push(vec![format!("heldout_class_mae_{o}"), num(super::stats::mean(&errs))]);
    }
    out.table("metrics.csv", &metrics)?;
    let series: Vec<Series> = [LossKind::Generative, LossKind::Discriminative]
        .into_iter()
        .map(|k| Series {
            label: k.as_str().to_string(),
            points: prepared
                .log
                .iter()
                .filter(|r| r.kind == k)
                .map(|r| (r.step as f64, r.loss))
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    out.text("loss.svg", &chart("Training loss", "update", "loss", &series, Style::Line))
}

const SAMPLE_HEADER: [&str; 13] = [
    "sample_id", "mode", "cell", "index", "lambda", "eta", "k", "optimizer", "layer", "sequence", "objective", "pll", "value",
];

fn samples_table(runs: &[&SamplingRun], alphabet: &Alphabet) -> Table {
    let mut t = Table::new(&SAMPLE_HEADER);
    for run in runs {
        for r in &run.records {
            let cell = &run.cells[r.cell];
            let mut row = vec![r.id.clone(), r.mode.as_str().into(), cell.id(), r.index.to_string()];
            row.extend(cell.fields());
            row.extend([r.seq.decode(alphabet, false), num(r.objective), num(r.pll), num(r.value)]);
            t.push(row);
        }
    }
    t
}

fn sample_outputs(
    out: &mut Out,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    prepared: &Prepared,
    streams: &Streams,
) -> Result<(), HarnessError> {
    let diffusion = run_sampling(prepared, cfg, corpus, Mode::Diffusion, streams)?;
    let ar = if cfg.sampling.autoregressive {
        Some(run_sampling(prepared, cfg, corpus, Mode::Autoregressive, streams)?)
    } else {
        None
    };
    let runs: Vec<&SamplingRun> = std::iter::once(&diffusion).chain(ar.as_ref()).collect();
    let samples = samples_table(&runs, &cfg.alphabet);
    out.table("samples.csv", &samples)?;

    let mut traces = Table::new(&["sample_id", "row", "t", "sequence", "objective", "pll", "value", "kl", "final_loss"]);
    for run in &runs {
        for r in &run.records {
            let Some(tr) = &r.trace else { continue };
            for (k, row) in tr.rows.iter().enumerate() {
                traces.push(vec![
                    r.id.clone(),
                    k.to_string(),
                    row.t.to_string(),
                    row.seq.decode(&cfg.alphabet, false),
                    opt(row.objective),
                    opt(row.pll),
                    opt(row.value),
                    opt(row.kl),
                    opt(row.losses.last().copied()),
                ]);
            }
        }
    }
    out.table("traces.csv", &traces)?;

    let summaries = summarize_cells(&samples)?;
    let mut tradeoff = Table::new(&[
        "mode", "cell", "lambda", "eta", "k", "optimizer", "layer", "n", "mean_objective", "se_objective", "mean_pll",
        "se_pll", "mean_value",
    ]);
    for s in &summaries {
        let mut row = vec![s.mode.clone(), s.cell.clone()];
        row.extend(s.settings.iter().cloned());
        row.extend([
            s.n.to_string(),
            num(s.mean_objective),
            num(s.se_objective),
            num(s.mean_pll),
            num(s.se_pll),
            num(s.mean_value),
        ]);
        tradeoff.push(row);
    }
    out.table("tradeoff.csv", &tradeoff)?;

    let all: Vec<&super::experiments::SampleRecord> = runs.iter().flat_map(|r| &r.records).collect();
    let pts: Vec<[f64; 2]> = all.iter().map(|r| [r.objective, r.pll]).collect();
    let mut front = Table::new(&["sample_id", "mode", "objective", "pll"]);
    for (i, r) in all.iter().enumerate() {
        if !pts.iter().any(|q| dominates(q, &pts[i])) {
            front.push(vec![r.id.clone(), r.mode.as_str().into(), num(r.objective), num(r.pll)]);
        }
    }
    out.table("front.csv", &front)?;

    let series: Vec<Series> = runs
        .iter()
        .map(|run| {
            let mode = run.records.first().map_or("diffusion", |r| r.mode.as_str());
            Series {
                label: mode.to_string(),
                points: summaries
                    .iter()
                    .filter(|s| s.mode == mode)
                    .map(|s| (s.mean_pll, s.mean_objective))
                    .collect(),
            }
        })
        .collect();
    out.text(
        "tradeoff.svg",
        &chart("Objective vs likelihood per grid cell", "mean pseudo-log-likelihood", "mean objective", &series, Style::Scatter),
    )?;
    for run in &runs {
        for (c, cell) in run.cells.iter().enumerate() {
            let chains: Vec<Series> = run
                .records
                .iter()
                .filter(|r| r.cell == c)
                .filter_map(|r| {
                    r.trace.as_ref().map(|tr| Series {
                        label: format!("chain {}", r.index),
                        points: tr
                            .rows
                            .iter()
                            .enumerate()
                            .filter_map(|(k, row)| row.objective.map(|o| (k as f64, o)))
                            .collect(),
                    })
                })
                .collect();
            if chains.is_empty() {
                continue;
            }
            let mode = run.records[0].mode.as_str();
            out.text(
                &format!("cells/{mode}_{}.svg", cell.id()),
                &chart(&format!("{mode} {}", cell.id()), "reverse step", "objective", &chains, Style::Line),
            )?;
        }
    }
    if cfg.mcmc.chains > 0 {
        let rep = run_mcmc(prepared, cfg, corpus, &diffusion, streams)?;
        mcmc_outputs(out, &rep)?;
    }
    Ok(())
}

fn mcmc_outputs(out: &mut Out, rep: &McmcReport) -> Result<(), HarnessError> {
    let mut t = Table::new(&["step", "mean_energy", "se_energy"]);
    for (k, (m, s)) in rep.mean_energy.iter().zip(&rep.se_energy).enumerate() {
        t.push(vec![k.to_string(), num(*m), num(*s)]);
    }
    out.table("mcmc.csv", &t)?;
    let reference = super::stats::mean(&rep.reference_energy);
    let mut s = Table::new(&["quantity", "value"]);
    let rows = [
        ("reference_lambda", num(rep.reference_lambda)),
        ("reference_steps", rep.reference_steps.to_string()),
        ("reference_mean_energy", num(reference)),
        ("reference_mean_objective", num(super::stats::mean(&rep.reference_objective))),
        ("mcmc_steps", (rep.mean_energy.len() - 1).to_string()),
        ("mcmc_final_mean_energy", num(*rep.mean_energy.last().expect("seed energy"))),
        ("mcmc_final_mean_objective", num(rep.final_objective)),
        ("mcmc_acceptance_rate", num(rep.acceptance_rate)),
        ("crossing_step", rep.crossing.map(|c| c.to_string()).unwrap_or_default()),
        (
            "step_ratio_lower_bound",
            num(rep.crossing.unwrap_or(rep.mean_energy.len()) as f64 / rep.reference_steps as f64),
        ),
    ];
    for (k, v) in rows {
        s.push(vec![k.to_string(), v]);
    }
    out.table("mcmc_summary.csv", &s)?;
    let n = rep.mean_energy.len() as f64;
    out.text(
        "mcmc.svg",
        &chart(
            "MH-MCMC energy vs guided diffusion",
            "proposals",
            "mean energy",
            &[
                Series {
                    label: "MCMC".into(),
                    points: rep.mean_energy.iter().enumerate().map(|(k, e)| (k as f64, *e)).collect(),
                },
                Series {
                    label: "guided diffusion".into(),
                    points: vec![(0.0, reference), (n - 1.0, reference)],
                },
            ],
            Style::Line,
        ),
    )
}

fn infill_outputs(
    out: &mut Out,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    prepared: &Prepared,
    streams: &Streams,
) -> Result<(), HarnessError> {
    let recs = run_infill(prepared, cfg, corpus, streams)?;
    let mut t = Table::new(&["infill_id", "seed", "design", "start", "end", "recovery", "conserved_violations", "objective"]);
    for r in &recs {
        t.push(vec![
            r.id.clone(),
            r.seed.decode(&cfg.alphabet, false),
            r.design.decode(&cfg.alphabet, false),
            r.start.to_string(),
            r.end.to_string(),
            num(r.recovery),
            r.conserved_violations.to_string(),
            opt(r.objective),
        ]);
    }
    out.table("infill.csv", &t)?;
    let rec: Vec<f64> = recs.iter().map(|r| r.recovery).collect();
    let baseline = 1.0 / cfg.alphabet.len() as f64;
    let mut s = Table::new(&["metric", "value"]);
    s.push(vec!["mean_recovery".into(), num(super::stats::mean(&rec))]);
    s.push(vec!["chance_recovery".into(), num(baseline)]);
    s.push(vec!["recovery_ratio".into(), num(super::stats::mean(&rec) / baseline)]);
    s.push(vec![
        "conserved_violations".into(),
        recs.iter().map(|r| r.conserved_violations).sum::<usize>().to_string(),
    ]);
    out.table("infill_summary.csv", &s)
}

fn design_table(designs: &[DesignRecord], cfg: &ExperimentConfig, corpus: &Corpus, cell: Option<&AblationCell>) -> Table {
    let mut header: Vec<String> = ["design_id", "seed_id", "seed", "design"].iter().map(|s| s.to_string()).collect();
    if cell.is_some() {
        header.extend(["cell", "selection", "guidance"].iter().map(|s| s.to_string()));
    }
    header.extend(["budget", "edits", "seed_acquisition", "acquisition"].iter().map(|s| s.to_string()));
    for (i, _) in corpus.objectives.iter().enumerate() {
        header.push(format!("posterior_{i}_{}", cfg.objectives[i].name()));
    }
    for (i, _) in corpus.objectives.iter().enumerate() {
        header.push(format!("truth_{i}_{}", cfg.objectives[i].name()));
    }
    header.extend(["constraint_violations", "conserved_violations"].iter().map(|s| s.to_string()));
    let mut t = Table::new(&header);
    for d in designs {
        let mut row = vec![
            d.id.clone(),
            d.seed_id.clone(),
            d.seed.decode(&cfg.alphabet, false),
            d.design.decode(&cfg.alphabet, false),
        ];
        if let Some(c) = cell {
            row.extend([
                c.id(),
                if c.salient { "salient" } else { "uniform" }.to_string(),
                if c.guided { "on" } else { "off" }.to_string(),
            ]);
        }
        row.extend([d.budget.to_string(), d.edits.to_string(), num(d.seed_acquisition), num(d.acquisition)]);
        row.extend(d.posterior.iter().map(|v| num(*v)));
        row.extend(d.truth.iter().map(|v| num(*v)));
        row.extend([d.constraint_violations.to_string(), d.conserved_violations.to_string()]);
        t.push(row);
    }
    t
}

fn ablation_outputs(
    out: &mut Out,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    runs: &[(AblationCell, Vec<DesignRecord>)],
) -> Result<(), HarnessError> {
    let mut all = Table::default();
    for (cell, designs) in runs {
        let t = design_table(designs, cfg, corpus, Some(cell));
        if all.header.is_empty() {
            all.header = t.header.clone();
        }
        all.rows.extend(t.rows);
    }
    out.table("ablation_designs.csv", &all)?;
    let s = summarize_ablation(&all)?;
    let mut t = Table::new(&["budget", "selection", "guidance", "n", "mean_acquisition", "se_acquisition", "mean_edits"]);
    for r in &s.rows {
        t.push(vec![
            r.budget.to_string(),
            if r.salient { "salient" } else { "uniform" }.into(),
            if r.guided { "on" } else { "off" }.into(),
            r.n.to_string(),
            num(r.mean_acquisition),
            num(r.se_acquisition),
            num(r.mean_edits),
        ]);
    }
    out.table("ablation.csv", &t)?;
    let mut g = Table::new(&["budget", "selection_gap", "guidance_gap"]);
    for (b, sg, gg) in &s.gaps {
        g.push(vec![b.to_string(), num(*sg), num(*gg)]);
    }
    out.table("ablation_gaps.csv", &g)?;
    let series: Vec<Series> = [(true, true), (true, false), (false, true), (false, false)]
        .into_iter()
        .map(|(sal, gd)| Series {
            label: format!(
                "{} / {}",
                if sal { "salient" } else { "uniform" },
                if gd { "guided" } else { "unguided" }
            ),
            points: s
                .rows
                .iter()
                .filter(|r| r.salient == sal && r.guided == gd)
                .map(|r| (r.budget as f64, r.mean_acquisition))
                .collect(),
        })
        .collect();
    out.text(
        "ablation.svg",
        &chart("Final acquisition by edit budget", "edit budget", "mean acquisition", &series, Style::Line),
    )
}
