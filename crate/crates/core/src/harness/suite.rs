//! Preset experiment suites: variants, aggregation over seeds and ordering
//! verdicts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{EnvId, Learner, RunConfig};
use super::log::RunLog;
use super::plot::{aggregate, plot_curves, Curve};
use super::train::{mean_std, run_dir, train_and_save};
use super::HarnessError;
use crate::representation::RepresentationMode as M;

/// Number of trailing evaluation points averaged into a run's final score.
pub const FINAL_WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteId {
    Motivation,
    StateAblation,
    PixelMain,
    PixelAblationFlow,
    PixelAblationStack,
    PixelAblationFrames,
    Discrete,
}

impl SuiteId {
    pub const ALL: [SuiteId; 7] = [
        SuiteId::Motivation,
        SuiteId::StateAblation,
        SuiteId::PixelMain,
        SuiteId::PixelAblationFlow,
        SuiteId::PixelAblationStack,
        SuiteId::PixelAblationFrames,
        SuiteId::Discrete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteId::Motivation => "motivation",
            SuiteId::StateAblation => "state_ablation",
            SuiteId::PixelMain => "pixel_main",
            SuiteId::PixelAblationFlow => "pixel_ablation_flow",
            SuiteId::PixelAblationStack => "pixel_ablation_stack",
            SuiteId::PixelAblationFrames => "pixel_ablation_frames",
            SuiteId::Discrete => "discrete",
        }
    }
}

impl fmt::Display for SuiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown suite `{s}`")))
    }
}

/// Desk-scale state-space preset on the pendulum.
pub fn state_preset() -> RunConfig {
    RunConfig {
        name: "state_full".into(),
        total_steps: 100_000,
        eval_interval: 5_000,
        action_repeat: 4,
        sac_updates_per_step: 4,
        sac_hidden_dim: 64,
        sac_batch_size: 128,
        ..RunConfig::state_defaults()
    }
}

/// Desk-scale pixel preset on the pendulum.
pub fn pixel_preset() -> RunConfig {
    RunConfig {
        name: "pixel_flare_n2".into(),
        mode: M::FlarePixel,
        frames: 2,
        total_steps: 150_000,
        eval_interval: 10_000,
        pendulum_frame_size: 16,
        augment_pad: 2,
        conv_layers: 2,
        conv_filters: 8,
        latent_dim: 32,
        head_dim: 64,
        sac_hidden_dim: 64,
        sac_batch_size: 64,
        ..RunConfig::default()
    }
}

/// Desk-scale discrete preset on dot-catch.
pub fn discrete_preset() -> RunConfig {
    RunConfig {
        name: "dqn_flare_n3".into(),
        env: EnvId::DotCatch,
        learner: Learner::Dqn,
        mode: M::FlarePixel,
        frames: 3,
        total_steps: 200_000,
        initial_steps: 5_000,
        eval_interval: 10_000,
        eval_episodes: 50,
        action_repeat: 1,
        replay_capacity: 100_000,
        augment_pad: 0,
        conv_layers: 2,
        conv_filters: 8,
        latent_dim: 32,
        head_dim: 64,
        dqn_hidden_dim: 64,
        dqn_update_every: 4,
        ..RunConfig::default()
    }
}

fn state_variant(name: &str, mode: M) -> RunConfig {
    RunConfig {
        name: name.into(),
        mode,
        frames: if matches!(mode, M::StateFull | M::StatePositionOnly) {
            1
        } else {
            4
        },
        ..state_preset()
    }
}

fn pixel_variant(name: &str, mode: M, frames: usize) -> RunConfig {
    RunConfig {
        name: name.into(),
        mode,
        frames,
        ..pixel_preset()
    }
}

/// The variants of a suite, in legend order.
pub fn suite_configs(id: SuiteId) -> Vec<RunConfig> {
    let full = || state_variant("state_full", M::StateFull);
    let flare2 = || pixel_variant("pixel_flare_n2", M::FlarePixel, 2);
    match id {
        SuiteId::Motivation => vec![
            full(),
            state_variant("state_position_only", M::StatePositionOnly),
            state_variant("state_flare", M::StateFlare),
        ],
        SuiteId::StateAblation => vec![
            full(),
            state_variant("state_position_only", M::StatePositionOnly),
            state_variant("state_flare", M::StateFlare),
            state_variant("state_stack", M::StateStack),
            state_variant("state_recurrent", M::StateRecurrent),
        ],
        SuiteId::PixelMain => vec![
            full(),
            flare2(),
            pixel_variant("pixel_frame_stack_n2", M::FrameStackPixel, 2),
        ],
        SuiteId::PixelAblationFlow => vec![
            full(),
            flare2(),
            pixel_variant("pixel_flow_n2", M::PixelFlow, 2),
        ],
        SuiteId::PixelAblationStack => vec![
            full(),
            flare2(),
            pixel_variant("pixel_latent_concat_n2", M::LatentConcatPixel, 2),
        ],
        SuiteId::PixelAblationFrames => vec![
            full(),
            flare2(),
            pixel_variant("pixel_flare_n3", M::FlarePixel, 3),
            pixel_variant("pixel_flare_n5", M::FlarePixel, 5),
        ],
        SuiteId::Discrete => vec![
            discrete_preset(),
            RunConfig {
                name: "dqn_single_frame".into(),
                mode: M::FrameStackPixel,
                frames: 1,
                ..discrete_preset()
            },
        ],
    }
}

/// Per-variant aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub curve: Curve,
    /// Per-seed mean of the last `FINAL_WINDOW` evaluation returns.
    pub finals: Vec<f64>,
    /// Per-seed area under the evaluation curve divided by its step span.
    pub aucs: Vec<f64>,
}

impl VariantResult {
    pub fn final_mean(&self) -> f64 {
        mean_std(&self.finals).0
    }

    pub fn final_std(&self) -> f64 {
        mean_std(&self.finals).1
    }

    pub fn auc_mean(&self) -> f64 {
        mean_std(&self.aucs).0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub id: SuiteId,
    pub variants: Vec<VariantResult>,
    pub verdicts: Vec<Verdict>,
    /// Runs that failed, as `variant/seed: error`.
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn summary_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "seeds",
            "final_mean",
            "final_std",
            "auc_mean",
            "auc_std",
        ])?;
        for v in &self.variants {
            let (auc_mean, auc_std) = mean_std(&v.aucs);
            w.write_record([
                v.name.clone(),
                v.seeds.len().to_string(),
                v.final_mean().to_string(),
                v.final_std().to_string(),
                auc_mean.to_string(),
                auc_std.to_string(),
            ])?;
        }
        String::from_utf8(
            w.into_inner()
                .map_err(|e| HarnessError::Log(e.to_string()))?,
        )
        .map_err(|e| HarnessError::Log(e.to_string()))
    }

    pub fn verdicts_text(&self) -> String {
        let mut out = String::new();
        for v in &self.verdicts {
            out.push_str(&format!(
                "{} {}: {}\n",
                if v.passed { "PASS" } else { "FAIL" },
                v.name,
                v.detail
            ));
        }
        if !self.complete() {
            out.push_str(&format!("INCOMPLETE: {}\n", self.failures.join("; ")));
        }
        out
    }
}

pub fn final_score(log: &RunLog) -> f64 {
    let means = log.eval_means();
    let tail = &means[means.len().saturating_sub(FINAL_WINDOW)..];
    mean_std(tail).0
}

/// Trapezoidal area under the evaluation curve over its step span.
pub fn normalized_auc(log: &RunLog) -> f64 {
    let (steps, means) = (log.steps(), log.eval_means());
    match steps.len() {
        0 => f64::NAN,
        1 => means[0],
        n => {
            let area: f64 = (1..n)
                .map(|i| 0.5 * (means[i] + means[i - 1]) * (steps[i] - steps[i - 1]) as f64)
                .sum();
            area / (steps[n - 1] - steps[0]) as f64
        }
    }
}

/// Aggregates saved logs into curves, scores and verdicts.
pub fn summarize(
    id: SuiteId,
    logs: &[(String, Vec<(u64, RunLog)>)],
    failures: Vec<String>,
) -> Result<SuiteResult, HarnessError> {
    let mut variants = Vec::new();
    for (name, runs) in logs {
        if runs.is_empty() {
            continue;
        }
        let only: Vec<RunLog> = runs.iter().map(|(_, l)| l.clone()).collect();
        variants.push(VariantResult {
            name: name.clone(),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            curve: aggregate(&only)?,
            finals: only.iter().map(final_score).collect(),
            aucs: only.iter().map(normalized_auc).collect(),
        });
    }
    let mut result = SuiteResult {
        id,
        variants,
        verdicts: Vec::new(),
        failures,
    };
    result.verdicts = verdicts(&result);
    Ok(result)
}

fn verdicts(r: &SuiteResult) -> Vec<Verdict> {
    let fin = |n: &str| r.variant(n).map(VariantResult::final_mean);
    let auc = |n: &str| r.variant(n).map(VariantResult::auc_mean);
    let missing = |name: &str| Verdict {
        name: name.into(),
        passed: false,
        detail: "missing variants".into(),
    };
    let mut out = Vec::new();
    match r.id {
        SuiteId::Motivation => {
            out.push(match (fin("state_full"), fin("state_position_only"), fin("state_flare")) {
                (Some(full), Some(pos), Some(flare)) => Verdict {
                    name: "flare_beats_position_only_and_full_leads".into(),
                    passed: flare - pos >= 0.25 * full && full >= flare,
                    detail: format!(
                        "full {full:.2}, flare {flare:.2}, position-only {pos:.2}; gap {:.2} vs required {:.2}",
                        flare - pos,
                        0.25 * full
                    ),
                },
                _ => missing("flare_beats_position_only_and_full_leads"),
            });
        }
        SuiteId::StateAblation => {
            out.push(match (fin("state_full"), fin("state_flare"), fin("state_stack"), fin("state_recurrent")) {
                (Some(full), Some(flare), Some(stack), Some(rec)) => {
                    let gap = (flare - stack).max(flare - rec);
                    Verdict {
                        name: "flare_beats_stack_and_recurrent".into(),
                        passed: flare >= stack && flare >= rec && gap >= 0.15 * full,
                        detail: format!(
                            "flare {flare:.2}, stack {stack:.2}, recurrent {rec:.2}; largest gap {gap:.2} vs required {:.2}",
                            0.15 * full
                        ),
                    }
                }
                _ => missing("flare_beats_stack_and_recurrent"),
            });
        }
        SuiteId::PixelMain => {
            out.push(match (fin("pixel_flare_n2"), fin("pixel_frame_stack_n2")) {
                (Some(flare), Some(stack)) => Verdict {
                    name: "flare_at_least_frame_stack".into(),
                    passed: flare >= stack,
                    detail: format!("flare {flare:.2}, frame stack {stack:.2}"),
                },
                _ => missing("flare_at_least_frame_stack"),
            });
        }
        SuiteId::PixelAblationStack => {
            out.push(
                match (
                    fin("state_full"),
                    fin("pixel_flare_n2"),
                    fin("pixel_latent_concat_n2"),
                ) {
                    (Some(full), Some(flare), Some(concat)) => Verdict {
                        name: "flare_beats_latent_concat".into(),
                        passed: flare - concat >= 0.15 * full,
                        detail: format!(
                        "flare {flare:.2}, latent concat {concat:.2}; gap {:.2} vs required {:.2}",
                        flare - concat,
                        0.15 * full
                    ),
                    },
                    _ => missing("flare_beats_latent_concat"),
                },
            );
        }
        SuiteId::PixelAblationFlow => {
            out.push(match (auc("pixel_flare_n2"), auc("pixel_flow_n2")) {
                (Some(flare), Some(flow)) => Verdict {
                    name: "flare_auc_at_least_pixel_flow".into(),
                    passed: flare >= flow,
                    detail: format!("normalized AUC flare {flare:.2}, pixel flow {flow:.2}"),
                },
                _ => missing("flare_auc_at_least_pixel_flow"),
            });
        }
        SuiteId::PixelAblationFrames => {
            out.push(match (fin("pixel_flare_n2"), fin("pixel_flare_n5")) {
                (Some(n2), Some(n5)) => Verdict {
                    name: "two_frames_at_least_five".into(),
                    passed: n2 >= n5,
                    detail: format!("n=2 {n2:.2}, n=5 {n5:.2}"),
                },
                _ => missing("two_frames_at_least_five"),
            });
        }
        SuiteId::Discrete => {
            out.push(match (fin("dqn_flare_n3"), fin("dqn_single_frame")) {
                (Some(flare), Some(single)) => Verdict {
                    name: "flare_dqn_catches_more".into(),
                    passed: flare - single >= 0.20,
                    detail: format!("catch rate flare {flare:.3}, single frame {single:.3}; gap {:.3} vs required 0.200", flare - single),
                },
                _ => missing("flare_dqn_catches_more"),
            });
        }
    }
    out
}

/// Reuses a finished run when its saved configuration matches exactly.
fn cached_log(root: &Path, cfg: &RunConfig, seed: u64) -> Option<RunLog> {
    let dir = run_dir(root, cfg, seed);
    let saved = std::fs::read_to_string(dir.join("config.toml")).ok()?;
    if saved != cfg.to_toml_string().ok()? || !dir.join("checkpoint.json").exists() {
        return None;
    }
    RunLog::load(&dir.join("log.csv")).ok()
}

pub fn suite_dir(root: &Path, id: SuiteId) -> PathBuf {
    root.join("suites").join(id.name())
}

/// Runs every variant and seed of a suite under `root`, reusing finished
/// runs, then writes `summary.csv`, `verdicts.txt` and `curves.svg`.
pub fn run_suite(
    id: SuiteId,
    seeds: &[u64],
    root: &Path,
    mut progress: impl FnMut(&str),
) -> Result<SuiteResult, HarnessError> {
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for cfg in suite_configs(id) {
        let mut runs = Vec::new();
        for &seed in seeds {
            if let Some(log) = cached_log(root, &cfg, seed) {
                progress(&format!("{}/seed_{seed}: reused", cfg.name));
                runs.push((seed, log));
                continue;
            }
            progress(&format!("{}/seed_{seed}: training", cfg.name));
            match train_and_save(&cfg, seed, root, |_| {}) {
                Ok(out) => runs.push((seed, out.log)),
                Err(e) => failures.push(format!("{}/seed_{seed}: {e}", cfg.name)),
            }
        }
        logs.push((cfg.name.clone(), runs));
    }
    let result = summarize(id, &logs, failures)?;
    let dir = suite_dir(root, id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("summary.csv"), result.summary_csv()?)?;
    std::fs::write(dir.join("verdicts.txt"), result.verdicts_text())?;
    let groups: Vec<(String, Vec<RunLog>)> = logs
        .into_iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(n, r)| (n, r.into_iter().map(|(_, l)| l).collect()))
        .collect();
    if !groups.is_empty() {
        plot_curves(&groups, &dir.join("curves.svg"))?;
    }
    Ok(result)
}

/// Reloads a suite's saved logs and recomputes its aggregates.
pub fn load_suite(id: SuiteId, seeds: &[u64], root: &Path) -> Result<SuiteResult, HarnessError> {
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for cfg in suite_configs(id) {
        let mut runs = Vec::new();
        for &seed in seeds {
            match cached_log(root, &cfg, seed) {
                Some(log) => runs.push((seed, log)),
                None => failures.push(format!("{}/seed_{seed}: no finished run", cfg.name)),
            }
        }
        logs.push((cfg.name, runs));
    }
    summarize(id, &logs, failures)
}

/// Groups log paths `<root>/<variant>/seed_<n>/log.csv` by variant name.
pub fn group_by_variant(paths: &[PathBuf]) -> Result<Vec<(String, Vec<RunLog>)>, HarnessError> {
    let mut groups: BTreeMap<String, Vec<RunLog>> = BTreeMap::new();
    for p in paths {
        let name = p
            .parent()
            .and_then(Path::parent)
            .and_then(Path::file_name)
            .map_or_else(
                || p.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
        groups.entry(name).or_default().push(RunLog::load(p)?);
    }
    Ok(groups.into_iter().collect())
}
