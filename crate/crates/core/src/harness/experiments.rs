use super::config::{ChainKind, ExperimentConfig, SamplingConfig};
use super::objectives::CompiledObjective;
use super::setup::{Corpus, Prepared};
use super::HarnessError;
use crate::exec::{collect_ok, par_map};
use crate::lambo::{lambo2_optimize, Acquisition, ConstraintSet, LamboConfig, ParetoState};
use crate::model::{clean_value, Denoiser, ExpectedClass, GuidanceLayer, ValueHead};
use crate::noise::NoiseSchedule;
use crate::rng::Streams;
use crate::sample::{
    autoregressive_sample, mh_mcmc, pseudo_log_likelihood, sample_continuous, sample_discrete, Chain, GuidanceConfig,
    Guided, InnerOptimizer, SampleTrace,
};
use crate::seqcore::{PositionMask, Sequence};
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Diffusion,
    Autoregressive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Diffusion => "diffusion",
            Mode::Autoregressive => "autoregressive",
        }
    }
}

/// One point of the guidance grid; `None` is the unguided chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub guidance: Option<GuidanceConfig>,
}

fn optimizer_name(o: InnerOptimizer) -> &'static str {
    match o {
        InnerOptimizer::Sgd => "sgd",
        InnerOptimizer::Adagrad => "adagrad",
    }
}

fn layer_name(l: GuidanceLayer) -> &'static str {
    match l {
        GuidanceLayer::First => "first",
        GuidanceLayer::Last => "last",
    }
}

impl Cell {
    pub fn id(&self) -> String {
        match &self.guidance {
            None => "unguided".to_string(),
            Some(g) => format!(
                "lambda{}_eta{}_k{}_{}_{}",
                g.lambda,
                g.eta,
                g.steps,
                optimizer_name(g.optimizer),
                layer_name(g.layer.unwrap_or_default())
            ),
        }
    }

    /// `(lambda, eta, steps, optimizer, layer)` as CSV fields; empty when unguided.
    pub fn fields(&self) -> [String; 5] {
        match &self.guidance {
            None => Default::default(),
            Some(g) => [
                g.lambda.to_string(),
                g.eta.to_string(),
                g.steps.to_string(),
                optimizer_name(g.optimizer).to_string(),
                layer_name(g.layer.unwrap_or_default()).to_string(),
            ],
        }
    }
}

/// Unguided cell (when enabled) followed by the Cartesian product of the
/// grid, lambda varying slowest.
pub fn grid_cells(s: &SamplingConfig) -> Vec<Cell> {
    let g = &s.grid;
    let mut cells = Vec::new();
    if s.unguided {
        cells.push(Cell { guidance: None });
    }
    for &lambda in &g.lambda {
        for &eta in &g.eta {
            for &steps in &g.steps {
                for &optimizer in &g.optimizer {
                    for &layer in &g.layer {
                        cells.push(Cell {
                            guidance: Some(GuidanceConfig {
                                eta,
                                lambda,
                                temperature: g.temperature,
                                steps,
                                optimizer,
                                layer: Some(layer),
                                kl_form: g.kl_form,
                            }),
                        });
                    }
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `mode:cell:index`, unique within a run.
    pub id: String,
    pub mode: Mode,
    pub cell: usize,
    pub index: usize,
    pub seq: Sequence,
    /// Ground-truth guided objective.
    pub objective: f64,
    pub pll: f64,
    /// Model estimate of the guided objective (expected class).
    pub value: f64,
    pub trace: Option<SampleTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRun {
    pub cells: Vec<Cell>,
    pub records: Vec<SampleRecord>,
}

fn guided_objective<'a>(cfg: &ExperimentConfig, corpus: &'a Corpus) -> Result<&'a CompiledObjective, HarnessError> {
    corpus
        .objectives
        .get(cfg.sampling.objective)
        .ok_or_else(|| HarnessError::Config("sampling needs at least one objective".into()))
}

/// Draws `sampling.samples` sequences per grid cell in `mode`.
pub fn run_sampling(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    mode: Mode,
    streams: &Streams,
) -> Result<SamplingRun, HarnessError> {
    let s = &cfg.sampling;
    let cells = grid_cells(s);
    let truth = guided_objective(cfg, corpus)?;
    let head = ExpectedClass { objective: s.objective };
    let (model, schedule) = (&prepared.model, &prepared.schedule);
    let items: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..s.samples).map(move |i| (c, i))).collect();
    let results = par_map(&items, |_, &(c, i)| -> Result<SampleRecord, HarnessError> {
        let cell = &cells[c];
        let cell_id = cell.id();
        let mut rng = streams.stream(&format!("sample.{}.{cell_id}", mode.as_str()), i as u64);
        let record = i < s.traced;
        let guided = cell.guidance.as_ref().map(|g| Guided { cfg: g, value: &head });
        let (seq, mut trace) = match mode {
            Mode::Diffusion => {
                let mut chain = Chain::new(schedule, s.steps).recording(record);
                chain.guidance = guided;
                match s.kind {
                    ChainKind::Discrete => sample_discrete(model, &chain, &mut rng)?,
                    ChainKind::Continuous => sample_continuous(model, &chain, &mut rng)?,
                }
            }
            Mode::Autoregressive => autoregressive_sample(model, schedule, guided, None, record, &mut rng)?,
        };
        if record {
            trace.annotate(model, &|w| truth.value(w))?;
        }
        Ok(SampleRecord {
            id: format!("{}:{cell_id}:{i}", mode.as_str()),
            mode,
            cell: c,
            index: i,
            objective: truth.value(&seq),
            pll: pseudo_log_likelihood(model, &seq)?,
            value: clean_value(model, &seq, &head)?,
            seq,
            trace: record.then_some(trace),
        })
    });
    Ok(SamplingRun {
        cells,
        records: collect_ok(results)?,
    })
}

/// Guided chains over every training step compared with MH-MCMC on the
/// energy `-PLL - value_weight * value`.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcReport {
    pub reference_lambda: f64,
    pub reference_steps: usize,
    /// Energy and objective of each reference sample.
    pub reference_energy: Vec<f64>,
    pub reference_objective: Vec<f64>,
    /// Mean and standard error of the chain energies after each proposal.
    pub mean_energy: Vec<f64>,
    pub se_energy: Vec<f64>,
    /// Mean objective of the final MCMC states.
    pub final_objective: f64,
    pub acceptance_rate: f64,
    /// First proposal count at which the mean chain energy is at or below
    /// the reference mean; `None` if never within the run.
    pub crossing: Option<usize>,
}

fn energy(model: &Denoiser, head: &dyn ValueHead, weight: f64, w: &Sequence) -> Result<f64, HarnessError> {
    Ok(-pseudo_log_likelihood(model, w)? - weight * clean_value(model, w, head)?)
}

/// Grid lambda whose diffusion-mode mean objective is closest to `target`.
fn closest_lambda(run: &SamplingRun, target: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (c, cell) in run.cells.iter().enumerate() {
        let Some(g) = &cell.guidance else { continue };
        let vals: Vec<f64> = run
            .records
            .iter()
            .filter(|r| r.cell == c && r.mode == Mode::Diffusion)
            .map(|r| r.objective)
            .collect();
        if vals.is_empty() {
            continue;
        }
        let gap = (super::stats::mean(&vals) - target).abs();
        if best.map_or(true, |b| gap < b.2) {
            best = Some((c, g.lambda, gap));
        }
    }
    best.map(|(c, l, _)| (c, l))
}

pub fn run_mcmc(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    run: &SamplingRun,
    streams: &Streams,
) -> Result<McmcReport, HarnessError> {
    let m = &cfg.mcmc;
    let truth = guided_objective(cfg, corpus)?;
    let head = ExpectedClass {
        objective: cfg.sampling.objective,
    };
    let (model, schedule) = (&prepared.model, &prepared.schedule);
    let base = run
        .cells
        .iter()
        .find_map(|c| c.guidance.clone())
        .ok_or_else(|| HarnessError::Config("the MCMC comparison needs a guided grid cell".into()))?;
    let guidance = match m.reference_lambda {
        Some(lambda) => GuidanceConfig { lambda, ..base },
        None => {
            let (c, _) = closest_lambda(run, m.target).expect("guided cell present");
            run.cells[c].guidance.clone().expect("guided")
        }
    };
    let steps = schedule.steps();
    let reference = collect_ok(par_map(&(0..m.reference_chains).collect::<Vec<_>>(), |_, &i| {
        let mut rng = streams.stream("mcmc.reference", i as u64);
        let chain = Chain::new(schedule, steps).guided(&guidance, &head);
        let (w, _) = sample_discrete(model, &chain, &mut rng)?;
        Ok::<_, HarnessError>((energy(model, &head, m.value_weight, &w)?, truth.value(&w)))
    }))?;
    let reference_energy: Vec<f64> = reference.iter().map(|r| r.0).collect();
    let reference_objective: Vec<f64> = reference.iter().map(|r| r.1).collect();
    let alphabet = &cfg.alphabet;
    let pad = alphabet.pad_index();
    let residues: Vec<usize> = (0..alphabet.len()).filter(|&i| i != pad).collect();
    let tokens = if pad + 1 == alphabet.len() {
        alphabet.len() - 1
    } else {
        alphabet.len()
    };
    let l = model.length();
    let mutable: Vec<usize> = (0..l).collect();
    let chains = collect_ok(par_map(&(0..m.chains).collect::<Vec<_>>(), |_, &i| {
        let mut rng = streams.stream("mcmc.chain", i as u64);
        let start = Sequence::new((0..l).map(|_| residues[rng.gen_range(0..residues.len())]).collect());
        let failure = std::sync::Mutex::new(None);
        let f = |w: &Sequence| match energy(model, &head, m.value_weight, w) {
            Ok(e) => e,
            Err(e) => {
                failure.lock().expect("unpoisoned").get_or_insert(e);
                f64::INFINITY
            }
        };
        let res = mh_mcmc(&f, &start, &mutable, tokens, m.temperature, m.steps, &mut rng);
        match failure.into_inner().expect("unpoisoned") {
            Some(e) => Err(e),
            None => Ok(res),
        }
    }))?;
    let steps_run = m.steps + 1;
    let mut mean_energy = Vec::with_capacity(steps_run);
    let mut se_energy = Vec::with_capacity(steps_run);
    for k in 0..steps_run {
        let col: Vec<f64> = chains.iter().map(|c| c.energies[k]).collect();
        mean_energy.push(super::stats::mean(&col));
        se_energy.push(super::stats::standard_error(&col));
    }
    let target = super::stats::mean(&reference_energy);
    let crossing = mean_energy.iter().position(|&e| e <= target);
    let finals: Vec<f64> = chains.iter().map(|c| truth.value(&c.seq)).collect();
    let accepted: usize = chains.iter().map(|c| c.accepted).sum();
    Ok(McmcReport {
        reference_lambda: guidance.lambda,
        reference_steps: steps,
        reference_energy,
        reference_objective,
        mean_energy,
        se_energy,
        final_objective: super::stats::mean(&finals),
        acceptance_rate: accepted as f64 / (m.chains * m.steps).max(1) as f64,
        crossing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillRecord {
    pub id: String,
    pub seed: Sequence,
    pub design: Sequence,
    /// Infilled region `[start, end)`.
    pub start: usize,
    pub end: usize,
    /// Fraction of region positions restored to the seed token.
    pub recovery: f64,
    /// Positions outside the region that differ from the seed.
    pub conserved_violations: usize,
    pub objective: Option<f64>,
}

/// Masks a random contiguous region of each held-out sequence and infills it.
pub fn run_infill(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    streams: &Streams,
) -> Result<Vec<InfillRecord>, HarnessError> {
    let ic = &cfg.infill;
    let (model, schedule) = (&prepared.model, &prepared.schedule);
    let l = model.length();
    let width = ((ic.region_fraction * l as f64).round() as usize).clamp(1, l);
    let count = ic.count.min(corpus.heldout.len());
    let truth = corpus.objectives.get(cfg.sampling.objective);
    let head = ExpectedClass {
        objective: cfg.sampling.objective,
    };
    let guidance = GuidanceConfig {
        eta: ic.eta,
        lambda: ic.lambda,
        steps: ic.inner_steps,
        ..GuidanceConfig::default()
    };
    if ic.guided && truth.is_none() {
        return Err(HarnessError::Config("guided infilling needs an objective".into()));
    }
    collect_ok(par_map(&corpus.heldout[..count], |i, seed| {
        let mut rng = streams.stream("infill", i as u64);
        let start = rng.gen_range(0..=l - width);
        let conserved = PositionMask::infill_region(l, start..start + width);
        let mut chain = Chain::new(schedule, cfg.sampling.steps).infill(seed, &conserved);
        if ic.guided {
            chain = chain.guided(&guidance, &head);
        }
        let (design, _) = sample_discrete(model, &chain, &mut rng)?;
        let recovered = (start..start + width).filter(|&j| design.get(j) == seed.get(j)).count();
        let conserved_violations = (0..l).filter(|&j| conserved.is_conserved(j) && design.get(j) != seed.get(j)).count();
        Ok(InfillRecord {
            id: format!("infill:{i}"),
            seed: seed.clone(),
            objective: truth.map(|o| o.value(&design)),
            design,
            start,
            end: start + width,
            recovery: recovered as f64 / width as f64,
            conserved_violations,
        })
    }))
}

/// Starting sequences for design, with their edit restrictions.
#[derive(Debug, Clone)]
pub struct SeedSet {
    pub ids: Vec<String>,
    pub seqs: Vec<Sequence>,
    pub immutable: Vec<PositionMask>,
    pub rules: Vec<ConstraintSet>,
    /// Pareto state over the seeds' true objective classes.
    pub state: ParetoState,
}

/// Takes feasible, low-value sequences from the held-out split, then the
/// training split, in order.
pub fn select_seeds(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<SeedSet, HarnessError> {
    let d = &cfg.design;
    if corpus.objectives.is_empty() {
        return Err(HarnessError::Config("design needs at least one objective".into()));
    }
    let l = cfg.model.length;
    let widest = cfg.ablation.budgets.iter().copied().chain([cfg.lambo.budget]).max().unwrap_or(0);
    if widest + d.immutable_suffix > l {
        return Err(HarnessError::Config(format!(
            "edit budget {widest} exceeds the {} editable positions",
            l - d.immutable_suffix
        )));
    }
    let pool = corpus
        .heldout
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("heldout:{i}"), s))
        .chain(corpus.train.iter().enumerate().map(|(i, s)| (format!("train:{i}"), s)));
    let mut set = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (id, seq) in pool {
        if set.0.len() == d.seeds {
            break;
        }
        if let Some(cap) = d.max_seed_value {
            if corpus.objectives[0].value(seq) > cap {
                continue;
            }
        }
        let rules = ConstraintSet::for_seed(seq, &cfg.alphabet, &cfg.lambo.constraints)?;
        if !rules.is_feasible(seq) {
            continue;
        }
        let mut bits = vec![false; l];
        for b in bits.iter_mut().skip(l - d.immutable_suffix) {
            *b = true;
        }
        if d.lock_cysteines {
            for &c in rules.canonical_cysteines() {
                bits[c] = true;
            }
        }
        let immutable = PositionMask::new(bits);
        if immutable.mutable_positions().len() < widest {
            continue;
        }
        set.0.push(id);
        set.1.push(seq.clone());
        set.2.push(immutable);
        set.3.push(rules);
    }
    if set.0.len() < d.seeds {
        return Err(HarnessError::Runtime(format!(
            "only {} of {} requested seeds pass the filters",
            set.0.len(),
            d.seeds
        )));
    }
    let baseline: Vec<Vec<f64>> = set
        .1
        .iter()
        .map(|s| corpus.objectives.iter().map(|o| o.label(o.value(s)) as f64).collect())
        .collect();
    let state = ParetoState::new(&baseline, corpus.objectives.len(), None)?;
    Ok(SeedSet {
        ids: set.0,
        seqs: set.1,
        immutable: set.2,
        rules: set.3,
        state,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRecord {
    pub id: String,
    pub seed_id: String,
    pub seed: Sequence,
    pub design: Sequence,
    pub budget: usize,
    pub edits: usize,
    pub seed_acquisition: f64,
    pub acquisition: f64,
    /// Expected class of each objective under the ensemble.
    pub posterior: Vec<f64>,
    /// Ground-truth objective values of the design.
    pub truth: Vec<f64>,
    pub constraint_violations: usize,
    /// Immutable positions that differ from the seed.
    pub conserved_violations: usize,
    pub trace: Vec<f64>,
}

/// Runs LaMBO-2 from every seed with `lambo`, streams keyed by `tag`.
pub fn run_optimize(
    prepared: &Prepared,
    corpus: &Corpus,
    seeds: &SeedSet,
    lambo: &LamboConfig,
    tag: &str,
    streams: &Streams,
) -> Result<Vec<DesignRecord>, HarnessError> {
    let model = &prepared.model;
    let objectives: Vec<usize> = (0..corpus.objectives.len()).collect();
    let acquisition = Acquisition::new(model, objectives.clone(), &seeds.state, lambo.ehvi_cap)?;
    let schedule: &NoiseSchedule = &prepared.schedule;
    collect_ok(par_map(&seeds.seqs, |i, seed| {
        let mut rng = streams.stream(&format!("optimize.{tag}"), i as u64);
        let d = lambo2_optimize(model, schedule, seed, &seeds.immutable[i], &acquisition, lambo, &seeds.rules[i], &mut rng)?;
        let posterior = objectives
            .iter()
            .map(|&o| clean_value(model, &d.seq, &ExpectedClass { objective: o }))
            .collect::<Result<Vec<_>, _>>()?;
        let imm = &seeds.immutable[i];
        Ok::<_, HarnessError>(DesignRecord {
            id: format!("{tag}:{i}"),
            seed_id: seeds.ids[i].clone(),
            seed: seed.clone(),
            budget: lambo.budget,
            edits: d.edits(seed),
            seed_acquisition: d.seed_value,
            acquisition: d.value,
            posterior,
            truth: corpus.objectives.iter().map(|o| o.value(&d.seq)).collect(),
            constraint_violations: seeds.rules[i].check(&d.seq).len(),
            conserved_violations: (0..seed.len())
                .filter(|&j| imm.is_conserved(j) && d.seq.get(j) != seed.get(j))
                .count(),
            design: d.seq,
            trace: d.trace,
        })
    }))
}

/// One cell of the edit-selection by guidance ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationCell {
    pub budget: usize,
    pub salient: bool,
    pub guided: bool,
}

impl AblationCell {
    pub fn id(&self) -> String {
        format!(
            "b{}_{}_{}",
            self.budget,
            if self.salient { "salient" } else { "uniform" },
            if self.guided { "guided" } else { "unguided" }
        )
    }

    pub fn lambo(&self, cfg: &ExperimentConfig) -> LamboConfig {
        let mut l = cfg.lambo.clone();
        l.budget = self.budget;
        l.saliency_temperature = if self.salient {
            cfg.ablation.salient_temperature
        } else {
            cfg.ablation.uniform_temperature
        };
        if !self.guided {
            l.guidance.eta = 0.0;
        }
        l
    }
}

pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<AblationCell> {
    let mut out = Vec::new();
    for &budget in &cfg.ablation.budgets {
        for salient in [true, false] {
            for guided in [true, false] {
                out.push(AblationCell { budget, salient, guided });
            }
        }
    }
    out
}

pub fn run_ablation(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seeds: &SeedSet,
    streams: &Streams,
) -> Result<Vec<(AblationCell, Vec<DesignRecord>)>, HarnessError> {
    ablation_cells(cfg)
        .into_iter()
        .map(|cell| {
            let designs = run_optimize(prepared, corpus, seeds, &cell.lambo(cfg), &cell.id(), streams)?;
            Ok((cell, designs))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_one_cell_per_combination() {
        let mut s = SamplingConfig::default();
        s.grid.eta = vec![0.1, 0.5];
        s.grid.optimizer = vec![InnerOptimizer::Sgd, InnerOptimizer::Adagrad];
        let cells = grid_cells(&s);
        assert_eq!(cells.len(), 1 + 5 * 2 * 2);
        assert_eq!(cells[0].id(), "unguided");
        let ids: std::collections::BTreeSet<String> = cells.iter().map(Cell::id).collect();
        assert_eq!(ids.len(), cells.len());
        assert_eq!(cells[1].id(), "lambda0.001_eta0.1_k5_sgd_last");
    }

    #[test]
    fn ablation_covers_four_cells_per_budget() {
        let cfg = ExperimentConfig::default();
        let cells = ablation_cells(&cfg);
        assert_eq!(cells.len(), 12);
        for b in [2, 8, 32] {
            assert_eq!(cells.iter().filter(|c| c.budget == b).count(), 4);
        }
        let off = AblationCell {
            budget: 2,
            salient: false,
            guided: false,
        }
        .lambo(&cfg);
        assert_eq!(off.guidance.eta, 0.0);
        assert_eq!(off.saliency_temperature, cfg.ablation.uniform_temperature);
    }
}
