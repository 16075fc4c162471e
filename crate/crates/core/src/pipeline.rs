//! The story-editing pipeline: split into acts, pick propositions, rewrite
//! under a counterfactual, patch, prefilter and self-consistency filter.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{ParseError, PipelineError, ValidationError};
use crate::gateway::{ChatRequest, Gateway};
use crate::model::{
    join_segments, ActSplit, CandidateStatus, CounterfactualStory, FilterVotes, PatchedCandidate, PrefilterReason,
    Proposition, Provenance, Story,
};
use crate::prompt::{self, mark_lines, Stage, TemplateSet};
use crate::text::{collapse_whitespace, match_sentence, word_count};

pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const DEFAULT_COUNTERFACT_MODEL: &str = "gpt-4-turbo";

/// Stages the pipeline sends to a model.
pub const PIPELINE_STAGES: [Stage; 5] =
    [Stage::ThreeAct, Stage::PropExtract, Stage::PropScore, Stage::Counterfact, Stage::Filter];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub retain_scores: BTreeSet<u8>,
    pub max_changes: usize,
    pub filter_samples: u32,
    pub filter_threshold: u32,
    pub max_propositions_per_story: usize,
    pub min_story_words: usize,
    /// Count unparseable filter samples as "no" votes instead of failing.
    pub lenient_filter: bool,
    /// Stage name to model; stages not listed use `default_model`.
    pub stage_models: BTreeMap<String, String>,
    pub default_model: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retain_scores: [2, 3].into(),
            max_changes: 5,
            filter_samples: 5,
            filter_threshold: 4,
            max_propositions_per_story: 3,
            min_story_words: 100,
            lenient_filter: true,
            stage_models: [(Stage::Counterfact.name().to_string(), DEFAULT_COUNTERFACT_MODEL.to_string())].into(),
            default_model: DEFAULT_MODEL.to_string(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let err = |m: String| Err(ValidationError::Config(m));
        if self.filter_samples == 0 {
            return err("filter_samples must be at least 1".into());
        }
        if self.filter_threshold == 0 || self.filter_threshold > self.filter_samples {
            return err(format!("filter_threshold {} must lie in 1..={}", self.filter_threshold, self.filter_samples));
        }
        if let Some(s) = self.retain_scores.iter().find(|s| !(1..=4).contains(*s)) {
            return err(format!("retain_scores contains {s}, outside 1..=4"));
        }
        for stage in self.stage_models.keys() {
            if !PIPELINE_STAGES.iter().any(|s| s.name() == stage) {
                return err(format!("stage_models names unknown stage {stage}"));
            }
        }
        Ok(())
    }

    pub fn model_for(&self, stage: Stage) -> &str {
        self.stage_models.get(stage.name()).unwrap_or(&self.default_model)
    }

    pub fn resolved_stage_models(&self) -> BTreeMap<String, String> {
        PIPELINE_STAGES.iter().map(|s| (s.name().to_string(), self.model_for(*s).to_string())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefilterOutcome {
    pub pass: bool,
    pub reason: Option<PrefilterReason>,
}

/// Reject rewrites that leave an act untouched or change too much.
pub fn prefilter(original: &ActSplit, cf: &CounterfactualStory, config: &PipelineConfig) -> PrefilterOutcome {
    let same = |a: &str, b: &str| collapse_whitespace(a) == collapse_whitespace(b);
    let reason = if same(&cf.act2, &original.act2.text) {
        Some(PrefilterReason::Act2Unchanged)
    } else if same(&cf.act3, &original.act3.text) {
        Some(PrefilterReason::Act3Unchanged)
    } else if cf.change_count() > config.max_changes {
        Some(PrefilterReason::TooManyChanges)
    } else {
        None
    };
    PrefilterOutcome { pass: reason.is_none(), reason }
}

/// Original act 1 followed by the counterfactual acts 2 and 3.
pub fn patch(original: &ActSplit, cf: &CounterfactualStory) -> String {
    join_segments(&[&original.act1.text, &cf.act2, &cf.act3])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub accepted: bool,
    pub yes_votes: u32,
    pub total: u32,
    pub parse_failures: u32,
    pub explanation: String,
    pub error_lines: Vec<String>,
    pub contradicted_lines: Vec<String>,
}

/// Propositions after scoring, and the subset kept for editing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub scored: Vec<Proposition>,
    pub retained: Vec<Proposition>,
    pub malformed_bullets: usize,
}

/// Keep propositions whose score is retained, in document order, capped.
pub fn retain(scored: &[Proposition], config: &PipelineConfig) -> Vec<Proposition> {
    scored
        .iter()
        .filter(|p| p.score.is_some_and(|s| config.retain_scores.contains(&s)))
        .take(config.max_propositions_per_story)
        .cloned()
        .collect()
}

/// Ground-truth error lines: marked lines the judge also reported, or all
/// marked lines when the judge's report matches none of them.
pub fn ground_truth_error_lines(marked: &[String], reported: &[String]) -> Vec<String> {
    let hit: Vec<String> = marked
        .iter()
        .filter(|m| reported.iter().any(|r| match_sentence(r, std::slice::from_ref(*m))))
        .cloned()
        .collect();
    if hit.is_empty() {
        marked.to_vec()
    } else {
        hit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoryStatus {
    Ok,
    NoPropositions,
    Failed,
}

/// What happened to one story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryOutcome {
    pub story_id: String,
    pub status: StoryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub act_retries: u32,
    /// Candidates that survived the prefilter, accepted or not by the judge.
    pub candidates: Vec<PatchedCandidate>,
    /// Candidates removed by the prefilter.
    pub rejects: Vec<PatchedCandidate>,
}

/// Collects the request digests a story consumed.
#[derive(Debug, Default)]
struct Trace {
    digests: Vec<String>,
}

pub struct Pipeline<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    config: &'a PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        gateway: &'a Gateway,
        templates: &'a TemplateSet,
        config: &'a PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline { gateway, templates, config })
    }

    pub fn config(&self) -> &PipelineConfig {
        self.config
    }

    fn ask(
        &self,
        stage: Stage,
        values: &[(&str, &str)],
        samples: u32,
        draw: u32,
        trace: &mut Trace,
    ) -> Result<Vec<String>, PipelineError> {
        let prompt = self.templates.render(stage, values)?;
        let request = ChatRequest::prompt(self.config.model_for(stage), prompt).with_samples(samples).with_draw(draw);
        trace.digests.push(request.digest());
        Ok(self.gateway.complete(&request)?.completions)
    }

    fn ask_one(
        &self,
        stage: Stage,
        values: &[(&str, &str)],
        draw: u32,
        trace: &mut Trace,
    ) -> Result<String, PipelineError> {
        Ok(self.ask(stage, values, 1, draw, trace)?.swap_remove(0))
    }

    /// Split a story into three acts, retrying once on an unlocatable line.
    pub fn extract_acts(&self, story: &Story) -> Result<(ActSplit, u32), PipelineError> {
        self.extract_acts_traced(story, &mut Trace::default())
    }

    fn extract_acts_traced(&self, story: &Story, trace: &mut Trace) -> Result<(ActSplit, u32), PipelineError> {
        let words = word_count(&story.text);
        if words < self.config.min_story_words {
            return Err(PipelineError::StoryTooShort { id: story.id.clone(), words, min: self.config.min_story_words });
        }
        let values = [("story_text", story.text.as_str())];
        let first = self.ask_one(Stage::ThreeAct, &values, 0, trace)?;
        match prompt::parse_three_act(&first, story) {
            Ok(split) => Ok((split, 0)),
            Err(ParseError::LineNotFound { act, line, .. }) => {
                log::warn!("story {}: act {act} line {line:?} not found; resampling", story.id);
                let second = self.ask_one(Stage::ThreeAct, &values, 1, trace)?;
                Ok((prompt::parse_three_act(&second, story)?, 1))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Extract act-1 propositions, score them and keep the moderately important ones.
    pub fn select_propositions(&self, split: &ActSplit) -> Result<Selection, PipelineError> {
        self.select_traced(split, &mut Trace::default())
    }

    fn select_traced(&self, split: &ActSplit, trace: &mut Trace) -> Result<Selection, PipelineError> {
        let act1 = split.act1.text.trim();
        let raw = self.ask_one(Stage::PropExtract, &[("act1", act1)], 0, trace)?;
        let extracted = match prompt::parse_propositions(&raw) {
            Ok(e) => e,
            Err(ParseError::NoPropositions) => {
                return Ok(Selection { scored: Vec::new(), retained: Vec::new(), malformed_bullets: 0 })
            }
            Err(e) => return Err(e.into()),
        };
        let pairs = prompt::format_fact_pairs(&extracted.propositions);
        let values = [
            ("act1", act1),
            ("act2", split.act2.text.trim()),
            ("act3", split.act3.text.trim()),
            ("list_of_fact_counterfactual_pairs", pairs.as_str()),
        ];
        let raw = self.ask_one(Stage::PropScore, &values, 0, trace)?;
        let scored = prompt::parse_scores(&raw, &extracted.propositions)?;
        let retained = retain(&scored, self.config);
        Ok(Selection { scored, retained, malformed_bullets: extracted.malformed })
    }

    /// Rewrite the story as if `prop` were false.
    pub fn counterfact(&self, split: &ActSplit, prop: &Proposition) -> Result<CounterfactualStory, PipelineError> {
        self.counterfact_traced(split, prop, &mut Trace::default())
    }

    fn counterfact_traced(
        &self,
        split: &ActSplit,
        prop: &Proposition,
        trace: &mut Trace,
    ) -> Result<CounterfactualStory, PipelineError> {
        let values = [
            ("act1", split.act1.text.trim()),
            ("act2", split.act2.text.trim()),
            ("act3", split.act3.text.trim()),
            ("fact", prop.statement.as_str()),
            ("counterfactual", prop.counterfactual.as_str()),
        ];
        let raw = self.ask_one(Stage::Counterfact, &values, 0, trace)?;
        Ok(prompt::parse_counterfactual(&raw)?)
    }

    /// Ask the judge `filter_samples` times whether the marked lines break continuity.
    pub fn consistency_filter(
        &self,
        patched_text: &str,
        marked_lines: &[String],
    ) -> Result<FilterOutcome, PipelineError> {
        self.filter_traced(patched_text, marked_lines, &mut Trace::default())
    }

    fn filter_traced(
        &self,
        patched_text: &str,
        marked_lines: &[String],
        trace: &mut Trace,
    ) -> Result<FilterOutcome, PipelineError> {
        if marked_lines.is_empty() {
            return Err(PipelineError::NoMarkedLines);
        }
        let marked = mark_lines(patched_text, marked_lines);
        let samples = self.ask(Stage::Filter, &[("patched_story", &marked)], self.config.filter_samples, 0, trace)?;
        let mut out = FilterOutcome {
            accepted: false,
            yes_votes: 0,
            total: samples.len() as u32,
            parse_failures: 0,
            explanation: String::new(),
            error_lines: Vec::new(),
            contradicted_lines: Vec::new(),
        };
        for sample in &samples {
            let judgment = match prompt::parse_filter_judgment(sample) {
                Ok(j) => j,
                Err(e) if self.config.lenient_filter => {
                    log::debug!("unparseable filter sample counted as no: {e}");
                    out.parse_failures += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if judgment.verdict.is_error() {
                if out.yes_votes == 0 {
                    out.explanation = judgment.explanation;
                    out.error_lines = judgment.error_lines;
                    out.contradicted_lines = judgment.contradicted_lines;
                }
                out.yes_votes += 1;
            }
        }
        out.accepted = out.yes_votes >= self.config.filter_threshold;
        Ok(out)
    }

    fn provenance(&self, digests: Vec<String>) -> Provenance {
        let template_digests = PIPELINE_STAGES
            .iter()
            .map(|s| (s.name().to_string(), self.templates.get(*s).digest().to_string()))
            .collect();
        Provenance { stage_models: self.config.resolved_stage_models(), template_digests, fixture_digests: digests }
    }

    /// All stages for one story. Errors are returned, not recorded; see [`run_story`](Self::run_story).
    pub fn run_pipeline(&self, story: &Story) -> Result<StoryOutcome, PipelineError> {
        story.validate()?;
        let mut trace = Trace::default();
        let (split, act_retries) = self.extract_acts_traced(story, &mut trace)?;
        let selection = self.select_traced(&split, &mut trace)?;
        let mut outcome = StoryOutcome {
            story_id: story.id.clone(),
            status: if selection.retained.is_empty() { StoryStatus::NoPropositions } else { StoryStatus::Ok },
            error: None,
            act_retries,
            candidates: Vec::new(),
            rejects: Vec::new(),
        };
        let shared = trace.digests.len();
        for (i, prop) in selection.retained.iter().enumerate() {
            trace.digests.truncate(shared);
            let cf = self.counterfact_traced(&split, prop, &mut trace)?;
            let patched_text = patch(&split, &cf);
            let mut candidate = PatchedCandidate {
                candidate_id: format!("{}-p{}", story.id, i + 1),
                story_id: story.id.clone(),
                proposition: prop.clone(),
                patched_text,
                original_act1: split.act1.text.clone(),
                counterfactual: cf,
                error_lines: Vec::new(),
                contradicted_lines: Vec::new(),
                explanation: String::new(),
                filter_votes: FilterVotes::default(),
                status: CandidateStatus::PrefilteredOut,
                prefilter_reason: None,
                provenance: Provenance::default(),
            };
            let pre = prefilter(&split, &candidate.counterfactual, self.config);
            if !pre.pass {
                candidate.prefilter_reason = pre.reason;
                candidate.provenance = self.provenance(trace.digests.clone());
                outcome.rejects.push(candidate);
                continue;
            }
            let marked = candidate.counterfactual.later_marked_lines();
            let verdict = if marked.is_empty() {
                None
            } else {
                Some(self.filter_traced(&candidate.patched_text, &marked, &mut trace)?)
            };
            match verdict {
                Some(f) => {
                    candidate.filter_votes = FilterVotes { yes: f.yes_votes, total: f.total };
                    candidate.status =
                        if f.accepted { CandidateStatus::PendingAnnotation } else { CandidateStatus::FilterRejected };
                    candidate.error_lines = ground_truth_error_lines(&marked, &f.error_lines);
                    candidate.contradicted_lines = f.contradicted_lines;
                    candidate.explanation = f.explanation;
                }
                None => candidate.status = CandidateStatus::FilterRejected,
            }
            candidate.provenance = self.provenance(trace.digests.clone());
            outcome.candidates.push(candidate);
        }
        Ok(outcome)
    }

    /// Like [`run_pipeline`](Self::run_pipeline) but folds a failure into the outcome.
    pub fn run_story(&self, story: &Story) -> StoryOutcome {
        self.run_pipeline(story).unwrap_or_else(|e| {
            log::warn!("story {} failed: {e}", story.id);
            StoryOutcome {
                story_id: story.id.clone(),
                status: StoryStatus::Failed,
                error: Some(e.to_string()),
                act_retries: 0,
                candidates: Vec::new(),
                rejects: Vec::new(),
            }
        })
    }

    /// Run every story, in parallel up to the gateway's in-flight bound.
    /// Outcomes come back in input order; one story's failure never stops the rest.
    pub fn run_batch(&self, stories: &[Story]) -> Vec<StoryOutcome> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<StoryOutcome>>> = stories.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.gateway.max_in_flight().clamp(1, stories.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(story) = stories.get(i) else { break };
                    let outcome = self.run_story(story);
                    *slots[i].lock().unwrap() = Some(outcome);
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().unwrap().expect("every slot filled")).collect()
    }
}

/// Summary written to `provenance.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub config: PipelineConfig,
    pub stage_models: BTreeMap<String, String>,
    pub template_digests: BTreeMap<String, String>,
    pub stories: Vec<StoryReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryReport {
    pub story_id: String,
    pub status: StoryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub act_retries: u32,
    pub candidates: usize,
    pub accepted_by_filter: usize,
    pub rejects: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), std::io::Error> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Write `candidates.jsonl`, `rejects.jsonl` and `provenance.json` into `dir`.
pub fn write_run_dir(
    dir: &Path,
    outcomes: &[StoryOutcome],
    config: &PipelineConfig,
    templates: &TemplateSet,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("candidates.jsonl"), outcomes.iter().flat_map(|o| &o.candidates))?;
    write_jsonl(&dir.join("rejects.jsonl"), outcomes.iter().flat_map(|o| &o.rejects))?;
    let provenance = RunProvenance {
        config: config.clone(),
        stage_models: config.resolved_stage_models(),
        template_digests: PIPELINE_STAGES
            .iter()
            .map(|s| (s.name().to_string(), templates.get(*s).digest().to_string()))
            .collect(),
        stories: outcomes
            .iter()
            .map(|o| StoryReport {
                story_id: o.story_id.clone(),
                status: o.status,
                error: o.error.clone(),
                act_retries: o.act_retries,
                candidates: o.candidates.len(),
                accepted_by_filter: o
                    .candidates
                    .iter()
                    .filter(|c| c.status == CandidateStatus::PendingAnnotation)
                    .count(),
                rejects: o.rejects.len(),
            })
            .collect(),
    };
    let mut body = serde_json::to_string_pretty(&provenance)?;
    body.push('\n');
    std::fs::write(dir.join("provenance.json"), body)?;
    Ok(())
}

/// Read back `candidates.jsonl`.
pub fn read_candidates(path: &Path) -> Result<Vec<PatchedCandidate>, crate::error::DatasetError> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| crate::error::DatasetError::Schema { line: i + 1, message: e.to_string() })
        })
        .collect()
}
