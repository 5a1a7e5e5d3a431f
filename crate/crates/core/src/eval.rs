//! Repair metrics, comparison tables and the robustness harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::{AnomalyRepair, RandomRepair, TtcRepair};
use crate::corpus::{fuzz_scenarios, BankedScenario, Corpus, TemplateTable};
use crate::error::{Error, Result};
use crate::policy::DrivingPolicy;
use crate::repair::{AdReftPlugin, RepairModel, Selection};
use crate::rng;
use crate::sim::{run_episode, EpisodeResult, EpisodeTrace, RepairPlugin, SimConfig, TemplateId};
use crate::train::{collect_samples, monitor_scores, AnnotationConfig};

/// A repair method under evaluation. Stateful plug-ins are rebuilt for every
/// episode so results do not depend on evaluation order.
pub enum RepairMethod<'m> {
    None,
    Random { intervene_prob: f64, seed: u64 },
    Ttc(TtcRepair),
    Anomaly(AnomalyRepair),
    Learned(&'m RepairModel),
    /// The learned monitor with uniformly random repair actions.
    LearnedRandomActions { model: &'m RepairModel, seed: u64 },
}

impl RepairMethod<'_> {
    pub fn plugin(&self, sim: &SimConfig, episode: u64) -> Result<Option<Box<dyn RepairPlugin + '_>>> {
        Ok(match self {
            RepairMethod::None => None,
            RepairMethod::Random { intervene_prob, seed } => {
                let seed = rng::derive_seed(*seed, "eval.random", episode);
                Some(Box::new(RandomRepair::new(*intervene_prob, seed)?))
            }
            RepairMethod::Ttc(rule) => Some(Box::new(rule.clone())),
            RepairMethod::Anomaly(detector) => Some(Box::new(detector.clone())),
            RepairMethod::Learned(model) => Some(Box::new(AdReftPlugin::new(model, sim, Selection::Greedy))),
            RepairMethod::LearnedRandomActions { model, seed } => {
                let rng = rng::indexed(*seed, "eval.random_actions", episode);
                Some(Box::new(AdReftPlugin::new(model, sim, Selection::Random { rng })))
            }
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateReport {
    pub template: String,
    pub violations: usize,
    pub fixed: usize,
    pub successes: usize,
    pub degraded: usize,
    pub pct_fix: f64,
    pub pct_degraded: f64,
    pub delta_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorQuality {
    pub positives: usize,
    pub negatives: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean monitor score over ground-truth critical and non-critical states.
    pub mean_score_positive: f64,
    pub mean_score_negative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub method: String,
    pub pct_fix: f64,
    pub pct_degraded: f64,
    pub delta_e: f64,
    /// Mean `|a_ads - a_final|` over intervened steps.
    pub intensity: f64,
    pub intervened_steps: usize,
    pub templates: Vec<TemplateReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorQuality>,
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

#[derive(Default)]
struct Tally {
    violations: usize,
    fixed: usize,
    successes: usize,
    degraded: usize,
}

impl Tally {
    fn report(&self, template: &str) -> TemplateReport {
        let pct_fix = percent(self.fixed, self.violations);
        let pct_degraded = percent(self.degraded, self.successes);
        TemplateReport {
            template: template.to_string(),
            violations: self.violations,
            fixed: self.fixed,
            successes: self.successes,
            degraded: self.degraded,
            pct_fix,
            pct_degraded,
            delta_e: pct_fix - pct_degraded,
        }
    }
}

/// Re-runs every banked scenario with the method's plug-in. A violation
/// counts as fixed only when the repaired run reaches the destination; a
/// success counts as degraded when the repaired run collides. `on_trace`
/// sees every repaired episode in corpus order.
pub fn evaluate(
    corpus: &Corpus,
    method: &RepairMethod,
    name: &str,
    policy: &DrivingPolicy,
    sim: &SimConfig,
    mut on_trace: impl FnMut(&BankedScenario, &EpisodeTrace),
) -> Result<RepairReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut per_template: BTreeMap<TemplateId, Tally> = BTreeMap::new();
    let mut intervened = 0usize;
    let mut deviation = 0.0;
    for (i, banked) in corpus.entries.iter().enumerate() {
        let mut plugin = method.plugin(sim, i as u64)?;
        let trace = run_episode(&banked.scenario, policy, plugin.as_mut().map(|p| p.as_mut() as &mut dyn RepairPlugin), sim)?;
        for step in trace.intervened_steps() {
            intervened += 1;
            deviation += (step.a_ads - step.a_final).abs();
        }
        let tally = per_template.entry(banked.scenario.template_id).or_default();
        match banked.outcome.result {
            EpisodeResult::Collision => {
                tally.violations += 1;
                tally.fixed += usize::from(trace.outcome.result == EpisodeResult::Success);
            }
            EpisodeResult::Success => {
                tally.successes += 1;
                tally.degraded += usize::from(trace.outcome.result == EpisodeResult::Collision);
            }
            EpisodeResult::Timeout => {}
        }
        on_trace(banked, &trace);
    }

    let mut total = Tally::default();
    let templates = per_template
        .iter()
        .map(|(t, tally)| {
            total.violations += tally.violations;
            total.fixed += tally.fixed;
            total.successes += tally.successes;
            total.degraded += tally.degraded;
            tally.report(t.name())
        })
        .collect();
    let all = total.report("all");
    Ok(RepairReport {
        method: name.to_string(),
        pct_fix: all.pct_fix,
        pct_degraded: all.pct_degraded,
        delta_e: all.delta_e,
        intensity: if intervened == 0 { 0.0 } else { deviation / intervened as f64 },
        intervened_steps: intervened,
        templates,
        monitor: None,
    })
}

/// Precision, recall and F1 of the monitor at its calibrated threshold.
/// Ground truth marks the states within the annotation window before a
/// collision in the unrepaired replay.
pub fn monitor_quality(
    model: &RepairModel,
    scenarios: &[&BankedScenario],
    policy: &DrivingPolicy,
    sim: &SimConfig,
    window: &AnnotationConfig,
) -> Result<MonitorQuality> {
    let truth = AnnotationConfig {
        use_clearance: false,
        ..window.clone()
    };
    let samples = collect_samples(scenarios, model, policy, sim, &truth, 1)?;
    let refs: Vec<_> = samples.iter().collect();
    let scores = monitor_scores(model, &refs)?;
    let (mut tp, mut fp, mut positives) = (0, 0, 0);
    let (mut sum_pos, mut sum_neg) = (0.0, 0.0);
    for (s, &y) in samples.iter().zip(&scores) {
        let flagged = y > model.lambda_safe;
        let positive = s.label.y_safe == 1;
        positives += usize::from(positive);
        if positive {
            sum_pos += y;
        } else {
            sum_neg += y;
        }
        tp += usize::from(flagged && positive);
        fp += usize::from(flagged && !positive);
    }
    let precision = percent(tp, tp + fp);
    let recall = percent(tp, positives);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let negatives = samples.len() - positives;
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(MonitorQuality {
        positives,
        negatives,
        true_positives: tp,
        false_positives: fp,
        precision,
        recall,
        f1,
        mean_score_positive: mean(sum_pos, positives),
        mean_score_negative: mean(sum_neg, negatives),
    })
}

/// Aligned comparison table, one row per report.
pub fn render_table(reports: &[RepairReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>7} {:>7} {:>7} {:>9} {:>10} {:>7} {:>7} {:>7}",
        "method", "%Fix", "%Deg", "dE", "intensity", "intervened", "P", "R", "F1"
    );
    for r in reports {
        let (p, rc, f) = r
            .monitor
            .as_ref()
            .map_or(("-".into(), "-".into(), "-".into()), |m| {
                (format!("{:.2}", m.precision), format!("{:.2}", m.recall), format!("{:.2}", m.f1))
            });
        let _ = writeln!(
            out,
            "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>9.3} {:>10} {:>7} {:>7} {:>7}",
            r.method, r.pct_fix, r.pct_degraded, r.delta_e, r.intensity, r.intervened_steps, p, rc, f
        );
    }
    out
}

#[derive(Serialize)]
struct TemplateLine<'a> {
    method: &'a str,
    #[serde(flatten)]
    stats: &'a TemplateReport,
}

/// One JSON record per template and a final `all` record.
pub fn report_lines(report: &RepairReport) -> String {
    let mut out = String::new();
    for t in &report.templates {
        let line = TemplateLine {
            method: &report.method,
            stats: t,
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(report).expect("plain data"));
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub template: String,
    /// Collisions among the first `i + 1` fuzzed scenarios.
    pub cumulative: Vec<usize>,
}

impl RobustnessCurve {
    pub fn total(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }
}

/// Runs `count` freshly fuzzed scenarios per template and accumulates the
/// collisions. The same seed yields the same scenario stream, so two
/// methods can be compared index by index.
pub fn robustness_run(
    templates: &[TemplateId],
    count: usize,
    seed: u64,
    table: &TemplateTable,
    policy: &DrivingPolicy,
    sim: &SimConfig,
    method: &RepairMethod,
) -> Result<Vec<RobustnessCurve>> {
    let mut curves = Vec::with_capacity(templates.len());
    for &template in templates {
        let scenarios = fuzz_scenarios(template, count, rng::derive_seed(seed, "robustness", 0), table)?;
        let mut cumulative = Vec::with_capacity(count);
        let mut collisions = 0;
        for (i, scenario) in scenarios.iter().enumerate() {
            let mut plugin = method.plugin(sim, i as u64)?;
            let trace = run_episode(scenario, policy, plugin.as_mut().map(|p| p.as_mut() as &mut dyn RepairPlugin), sim)?;
            collisions += usize::from(trace.outcome.result == EpisodeResult::Collision);
            cumulative.push(collisions);
        }
        curves.push(RobustnessCurve {
            template: template.name().to_string(),
            cumulative,
        });
    }
    Ok(curves)
}
