//! Random scenario fuzzing and corpus banking.

mod index;
pub mod templates;

use std::path::Path;

pub use index::{parse_index, write_index, IndexEntry, INDEX_FILE};
pub use templates::{TemplateRanges, TemplateTable};

use crate::error::{Error, Result};
use crate::policy::DrivingPolicy;
use crate::rng;
use crate::sim::{run_episode, EpisodeOutcome, EpisodeResult, Scenario, SimConfig, TemplateId};

/// Default number of fuzzing attempts per template before giving up.
pub const DEFAULT_ATTEMPT_CAP: usize = 5000;

/// `count` scenarios of `template`; scenario `i` depends only on `(seed, template, i)`.
pub fn fuzz_scenarios(template: TemplateId, count: usize, seed: u64, table: &TemplateTable) -> Result<Vec<Scenario>> {
    let ranges = table.ranges(template)?;
    Ok((0..count as u64)
        .map(|i| fuzz_one(template, ranges, seed, i))
        .collect())
}

fn fuzz_one(template: TemplateId, ranges: &TemplateRanges, seed: u64, i: u64) -> Scenario {
    let mut r = rng::indexed(seed, template.name(), i);
    let scenario_seed = rng::derive_seed(seed, template.name(), i);
    templates::generate(template, ranges, scenario_seed, &mut r)
}

/// A scenario with its outcome under the unrepaired policy.
#[derive(Clone, Debug, PartialEq)]
pub struct BankedScenario {
    pub file: String,
    pub scenario: Scenario,
    pub outcome: EpisodeOutcome,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub entries: Vec<BankedScenario>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub templates: Vec<TemplateId>,
    pub violations: usize,
    pub successes: usize,
    pub seed: u64,
    pub attempt_cap: usize,
}

impl Corpus {
    pub fn violations(&self) -> impl Iterator<Item = &BankedScenario> {
        self.entries
            .iter()
            .filter(|e| e.outcome.result == EpisodeResult::Collision)
    }

    pub fn successes(&self) -> impl Iterator<Item = &BankedScenario> {
        self.entries
            .iter()
            .filter(|e| e.outcome.result == EpisodeResult::Success)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self) -> Vec<IndexEntry> {
        self.entries
            .iter()
            .map(|e| IndexEntry {
                file: e.file.clone(),
                template: e.scenario.template_id,
                outcome: Some(e.outcome.result),
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for e in &self.entries {
            e.scenario.save(&dir.join(&e.file))?;
        }
        let index = dir.join(INDEX_FILE);
        std::fs::write(&index, write_index(&self.index())).map_err(|e| Error::io(index, e))
    }

    /// Loads a corpus directory. Entries without a recorded outcome are
    /// replayed under `policy` to recover it.
    pub fn load(dir: &Path, policy: &DrivingPolicy, sim: &SimConfig) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut entries = Vec::new();
        for item in parse_index(&text)? {
            let scenario = Scenario::load(&dir.join(&item.file))?;
            if scenario.template_id != item.template {
                return Err(Error::format(
                    "corpus index",
                    format!("{} is listed as {} but declares {}", item.file, item.template, scenario.template_id),
                ));
            }
            let outcome = run_episode(&scenario, policy, None, sim)?.outcome;
            if let Some(recorded) = item.outcome {
                if recorded != outcome.result {
                    return Err(Error::Irreproducible(item.file));
                }
            }
            entries.push(BankedScenario {
                file: item.file,
                scenario,
                outcome,
            });
        }
        Ok(Self { entries })
    }
}

/// Fuzzes each template until the requested numbers of collision and
/// success scenarios are banked. Timeouts are discarded. Every banked
/// scenario is replayed once to confirm its outcome.
pub fn build_corpus(
    spec: &CorpusSpec,
    table: &TemplateTable,
    policy: &DrivingPolicy,
    sim: &SimConfig,
) -> Result<Corpus> {
    let mut entries = Vec::new();
    for &template in &spec.templates {
        let ranges = table.ranges(template)?;
        let (mut violations, mut successes) = (0, 0);
        let mut attempts = 0;
        while violations < spec.violations || successes < spec.successes {
            if attempts >= spec.attempt_cap {
                return Err(Error::FuzzBudgetExhausted {
                    template: template.name().into(),
                    attempts,
                    violations,
                    successes,
                });
            }
            let scenario = fuzz_one(template, ranges, spec.seed, attempts as u64);
            attempts += 1;
            let outcome = run_episode(&scenario, policy, None, sim)?.outcome;
            let (kind, slot) = match outcome.result {
                EpisodeResult::Collision if violations < spec.violations => ("violation", &mut violations),
                EpisodeResult::Success if successes < spec.successes => ("success", &mut successes),
                _ => continue,
            };
            let file = format!("{}_{kind}_{:03}.toml", template.short(), *slot);
            let replay = run_episode(&scenario, policy, None, sim)?.outcome;
            if replay != outcome {
                return Err(Error::Irreproducible(file));
            }
            *slot += 1;
            entries.push(BankedScenario {
                file,
                scenario,
                outcome,
            });
        }
    }
    Ok(Corpus { entries })
}
