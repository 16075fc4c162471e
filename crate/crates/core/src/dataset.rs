//! Benchmark assembly, human-annotation bookkeeping and length statistics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use crate::error::{DatasetError, ValidationError};
use crate::gateway::{ChatRequest, Gateway};
use crate::model::{CandidateStatus, Example, Gold, Label, NegativeStrategy, PatchedCandidate, Story};
use crate::prompt::{self, GenerationKind, Stage, TemplateSet};
use crate::text::{locate_lines, segment_sentences, Sentence};

/// Annotations needed before a task can be resolved.
pub const MIN_VOTES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationVerdict {
    Legitimate,
    NotLegitimate,
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vote {
    pub annotator_id: String,
    pub verdict: AnnotationVerdict,
    /// Unix seconds.
    #[serde(default)]
    pub timestamp: u64,
}

/// A line of a vote file or vote log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub task_id: String,
    #[serde(flatten)]
    pub vote: Vote,
}

/// A candidate awaiting human review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub text: String,
    pub error_lines: Vec<String>,
    pub contradicted_lines: Vec<String>,
    pub explanation: String,
    #[serde(default)]
    pub votes: Vec<Vote>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Accepted,
    Rejected,
    Pending,
}

/// Majority rule over non-unsure votes; an unsure majority or a tie rejects.
pub fn resolve_annotations(task: &AnnotationTask) -> Result<Resolution, DatasetError> {
    let mut seen = HashSet::new();
    for v in &task.votes {
        if !seen.insert(v.annotator_id.as_str()) {
            return Err(DatasetError::DuplicateAnnotator {
                task: task.task_id.clone(),
                annotator: v.annotator_id.clone(),
            });
        }
    }
    Ok(resolve_counts(&task.votes))
}

fn resolve_counts(votes: &[Vote]) -> Resolution {
    if votes.len() < MIN_VOTES {
        return Resolution::Pending;
    }
    let count = |want| votes.iter().filter(|v| v.verdict == want).count();
    let (legit, not, unsure) = (
        count(AnnotationVerdict::Legitimate),
        count(AnnotationVerdict::NotLegitimate),
        count(AnnotationVerdict::Unsure),
    );
    if 2 * unsure > votes.len() {
        Resolution::Rejected
    } else if legit > not {
        Resolution::Accepted
    } else {
        Resolution::Rejected
    }
}

impl AnnotationTask {
    pub fn from_candidate(c: &PatchedCandidate) -> Self {
        AnnotationTask {
            task_id: c.candidate_id.clone(),
            text: c.patched_text.clone(),
            error_lines: c.error_lines.clone(),
            contradicted_lines: c.contradicted_lines.clone(),
            explanation: c.explanation.clone(),
            votes: Vec::new(),
        }
    }

    /// Add a vote. An identical repeat is ignored and returns `false`; a
    /// different vote by the same annotator is an error.
    pub fn add_vote(&mut self, vote: Vote) -> Result<bool, DatasetError> {
        match self.votes.iter().find(|v| v.annotator_id == vote.annotator_id) {
            Some(v) if *v == vote => Ok(false),
            Some(_) => {
                Err(DatasetError::DuplicateAnnotator { task: self.task_id.clone(), annotator: vote.annotator_id })
            }
            None => {
                self.votes.push(vote);
                Ok(true)
            }
        }
    }

    pub fn has_voted(&self, annotator: &str) -> bool {
        self.votes.iter().any(|v| v.annotator_id == annotator)
    }

    /// Sentences of the task text and the indices of the highlighted ones.
    pub fn highlights(&self) -> (Vec<Sentence>, Vec<usize>, Vec<usize>) {
        let sentences = segment_sentences(&self.text).unwrap_or_default();
        let err = locate_lines(&sentences, &self.error_lines);
        let contr = locate_lines(&sentences, &self.contradicted_lines);
        (sentences, err, contr)
    }
}

pub fn export_annotation_tasks(
    candidates: &[PatchedCandidate],
    path: &Path,
) -> Result<Vec<AnnotationTask>, DatasetError> {
    let tasks: Vec<AnnotationTask> = candidates.iter().map(AnnotationTask::from_candidate).collect();
    write_tasks(&tasks, path)?;
    Ok(tasks)
}

pub fn write_tasks(tasks: &[AnnotationTask], path: &Path) -> Result<(), DatasetError> {
    crate::pipeline::write_jsonl(path, tasks)?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DatasetError::Schema { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn read_tasks(path: &Path) -> Result<Vec<AnnotationTask>, DatasetError> {
    let tasks: Vec<AnnotationTask> = read_jsonl(path)?;
    let mut ids = HashSet::new();
    for t in &tasks {
        if !ids.insert(t.task_id.as_str()) {
            return Err(DatasetError::DuplicateId(t.task_id.clone()));
        }
    }
    Ok(tasks)
}

pub fn read_votes(path: &Path) -> Result<Vec<VoteRecord>, DatasetError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub added: usize,
    pub repeated: usize,
}

/// Merge vote records into tasks. Re-ingesting the same records changes nothing.
pub fn merge_votes(tasks: &mut [AnnotationTask], votes: &[VoteRecord]) -> Result<IngestReport, DatasetError> {
    let mut report = IngestReport::default();
    for record in votes {
        let task = tasks
            .iter_mut()
            .find(|t| t.task_id == record.task_id)
            .ok_or_else(|| DatasetError::UnknownTask(record.task_id.clone()))?;
        if task.add_vote(record.vote.clone())? {
            report.added += 1;
        } else {
            report.repeated += 1;
        }
    }
    Ok(report)
}

pub fn ingest_votes(tasks: &mut [AnnotationTask], path: &Path) -> Result<IngestReport, DatasetError> {
    merge_votes(tasks, &read_votes(path)?)
}

/// Set candidate statuses from resolved tasks; unresolved candidates keep theirs.
pub fn apply_resolutions(candidates: &mut [PatchedCandidate], tasks: &[AnnotationTask]) -> Result<(), DatasetError> {
    for c in candidates.iter_mut() {
        if let Some(t) = tasks.iter().find(|t| t.task_id == c.candidate_id) {
            match resolve_annotations(t)? {
                Resolution::Accepted => c.status = CandidateStatus::Accepted,
                Resolution::Rejected => c.status = CandidateStatus::RejectedByAnnotators,
                Resolution::Pending => {}
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- statistics

/// Descriptive statistics of word counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for one value.
    pub std: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

/// Percentile by linear interpolation between order statistics of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn length_stats(lengths: &[usize]) -> Result<LengthStats, DatasetError> {
    if lengths.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut v: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(LengthStats {
        count: v.len(),
        mean,
        std,
        min: v[0],
        p25: percentile(&v, 0.25),
        median: percentile(&v, 0.5),
        p75: percentile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

pub fn dataset_stats(manifest: &DatasetManifest) -> Result<LengthStats, DatasetError> {
    length_stats(&manifest.examples.iter().map(|e| e.word_count).collect::<Vec<_>>())
}

// ------------------------------------------------------------------ manifest

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestProvenance {
    #[serde(default)]
    pub template_digests: BTreeMap<String, String>,
    #[serde(default)]
    pub model_names: BTreeSet<String>,
    /// Unix seconds.
    #[serde(default)]
    pub created: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub negative_strategy: NegativeStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: ManifestProvenance,
    pub positives: usize,
    pub negatives: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<LengthStats>,
    #[serde(skip)]
    pub examples: Vec<Example>,
    /// Header fields this version does not know about.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, strategy: NegativeStrategy, examples: Vec<Example>) -> Self {
        let mut m = DatasetManifest {
            name: name.into(),
            negative_strategy: strategy,
            seed: None,
            provenance: ManifestProvenance::default(),
            positives: 0,
            negatives: 0,
            stats: None,
            examples,
            extra: BTreeMap::new(),
        };
        m.refresh();
        m
    }

    /// Recompute label counts and statistics from the examples.
    pub fn refresh(&mut self) {
        self.positives = self.examples.iter().filter(|e| e.label == Label::Positive).count();
        self.negatives = self.examples.len() - self.positives;
        self.stats = length_stats(&self.examples.iter().map(|e| e.word_count).collect::<Vec<_>>()).ok();
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids = HashSet::new();
        for e in &self.examples {
            if !ids.insert(e.example_id.as_str()) {
                return Err(DatasetError::DuplicateId(e.example_id.clone()));
            }
            e.validate()?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    kind: &'static str,
    #[serde(flatten)]
    manifest: &'a DatasetManifest,
}

/// Header line followed by one example per line.
pub fn export_jsonl(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &HeaderOut { kind: "manifest", manifest })?;
    out.write_all(b"\n")?;
    for e in &manifest.examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset file. The header line is optional; without it the
/// manifest is named after the file and its counts are derived.
pub fn import_jsonl(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let raw = std::fs::read_to_string(path)?;
    let mut header: Option<DatasetManifest> = None;
    let mut examples = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DatasetError::Schema { line: i + 1, message };
        let mut value: Value = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if value.get("kind").and_then(Value::as_str) == Some("manifest") {
            if header.is_some() || !examples.is_empty() {
                return Err(schema("manifest header must be the first line".into()));
            }
            value.as_object_mut().map(|o| o.remove("kind"));
            header = Some(serde_json::from_value(value).map_err(|e| schema(e.to_string()))?);
            continue;
        }
        let example: Example = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        example.validate().map_err(|e| schema(e.to_string()))?;
        examples.push(example);
    }
    let manifest = match header {
        Some(mut h) => {
            h.examples = examples;
            h
        }
        None => {
            let name = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            let strategy =
                examples.iter().find(|e| e.label == Label::Negative).map(|e| e.negative_strategy).unwrap_or_default();
            DatasetManifest::new(name, strategy, examples)
        }
    };
    manifest.validate()?;
    Ok(manifest)
}

// ------------------------------------------------------------------- builder

/// Everything needed to produce resolved negatives.
pub struct Resolver<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildFailure {
    pub candidate_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub manifest: DatasetManifest,
    /// Positives dropped because their negative could not be generated.
    pub failures: Vec<BuildFailure>,
}

pub struct BuildOptions<'a> {
    pub name: String,
    pub strategy: NegativeStrategy,
    pub seed: u64,
    pub created: u64,
    pub resolver: Option<Resolver<'a>>,
}

fn gold_of(c: &PatchedCandidate) -> Result<Gold, DatasetError> {
    if c.error_lines.is_empty() || c.contradicted_lines.is_empty() {
        return Err(ValidationError::Candidate {
            id: c.candidate_id.clone(),
            reason: "missing ground-truth lines".into(),
        }
        .into());
    }
    Ok(Gold {
        error_lines: c.error_lines.clone(),
        contradicted_lines: c.contradicted_lines.clone(),
        explanation: c.explanation.clone(),
    })
}

fn resolve_negative(r: &Resolver<'_>, c: &PatchedCandidate) -> Result<String, DatasetError> {
    let error_lines = c.error_lines.join("\n");
    let contradicted = c.contradicted_lines.join("\n");
    let prompt = r.templates.render(
        Stage::ResolveNegative,
        &[
            ("story", &c.patched_text),
            ("cont_error_expl", &c.explanation),
            ("cont_error_lines", &error_lines),
            ("contradicted_lines", &contradicted),
        ],
    )?;
    let response = r.gateway.complete(&ChatRequest::prompt(&r.model, prompt))?;
    prompt::parse_generation(&response.completions[0], GenerationKind::Resolved)
        .map_err(|e| ValidationError::Example { id: c.candidate_id.clone(), reason: e.to_string() }.into())
}

/// One positive per accepted candidate plus an equal number of negatives,
/// shuffled with `options.seed`.
pub fn build_dataset(
    accepted: &[PatchedCandidate],
    originals: &[Story],
    options: BuildOptions<'_>,
) -> Result<BuildOutput, DatasetError> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut failures = Vec::new();
    let mut provenance = ManifestProvenance { created: options.created, ..Default::default() };
    for c in accepted {
        provenance.template_digests.extend(c.provenance.template_digests.clone());
        provenance.model_names.extend(c.provenance.stage_models.values().cloned());
    }
    match options.strategy {
        NegativeStrategy::Original => {
            for c in accepted {
                positives.push(Example::positive(&c.candidate_id, &c.patched_text, gold_of(c)?, &c.story_id));
            }
            let mut used = BTreeSet::new();
            let sources: Vec<&Story> = accepted
                .iter()
                .filter_map(|c| originals.iter().find(|s| s.id == c.story_id))
                .chain(originals.iter())
                .filter(|s| used.insert(s.id.clone()))
                .take(positives.len())
                .collect();
            if sources.len() < positives.len() {
                return Err(DatasetError::InsufficientNegatives { needed: positives.len(), available: sources.len() });
            }
            negatives = sources
                .into_iter()
                .map(|s| Example::negative(format!("{}-orig", s.id), &s.text, NegativeStrategy::Original, &s.id))
                .collect();
        }
        NegativeStrategy::Counterfactual => {
            for c in accepted {
                positives.push(Example::positive(&c.candidate_id, &c.patched_text, gold_of(c)?, &c.story_id));
                let mut neg = Example::negative(
                    format!("{}-cf", c.candidate_id),
                    c.counterfactual.full_text(),
                    NegativeStrategy::Counterfactual,
                    &c.story_id,
                );
                neg.validated = Some(false);
                negatives.push(neg);
            }
        }
        NegativeStrategy::Resolved => {
            let resolver = options.resolver.as_ref().ok_or(DatasetError::GatewayRequired("resolved"))?;
            provenance.template_digests.insert(
                Stage::ResolveNegative.name().into(),
                resolver.templates.get(Stage::ResolveNegative).digest().into(),
            );
            provenance.model_names.insert(resolver.model.clone());
            for c in accepted {
                let gold = gold_of(c)?;
                match resolve_negative(resolver, c) {
                    Ok(text) => {
                        positives.push(Example::positive(&c.candidate_id, &c.patched_text, gold, &c.story_id));
                        let mut neg = Example::negative(
                            format!("{}-res", c.candidate_id),
                            text,
                            NegativeStrategy::Resolved,
                            &c.story_id,
                        );
                        neg.validated = Some(false);
                        negatives.push(neg);
                    }
                    Err(e) => {
                        log::warn!("resolved negative for {} failed: {e}", c.candidate_id);
                        failures.push(BuildFailure { candidate_id: c.candidate_id.clone(), error: e.to_string() });
                    }
                }
            }
        }
        NegativeStrategy::NotApplicable => {
            return Err(ValidationError::Config("a negative strategy is required".into()).into());
        }
    }
    let mut examples: Vec<Example> = positives.into_iter().chain(negatives).collect();
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let mut manifest = DatasetManifest::new(options.name, options.strategy, examples);
    manifest.seed = Some(options.seed);
    manifest.provenance = provenance;
    manifest.validate()?;
    Ok(BuildOutput { manifest, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use AnnotationVerdict::*;

    fn task(verdicts: &[AnnotationVerdict]) -> AnnotationTask {
        AnnotationTask {
            task_id: "t".into(),
            text: "A. B.".into(),
            error_lines: vec!["B.".into()],
            contradicted_lines: vec!["A.".into()],
            explanation: String::new(),
            votes: verdicts
                .iter()
                .enumerate()
                .map(|(i, v)| Vote { annotator_id: format!("a{i}"), verdict: *v, timestamp: 0 })
                .collect(),
        }
    }

    #[test]
    fn majority_rule() {
        assert_eq!(resolve_annotations(&task(&[Legitimate, Legitimate, NotLegitimate])).unwrap(), Resolution::Accepted);
        assert_eq!(
            resolve_annotations(&task(&[Legitimate, NotLegitimate, NotLegitimate])).unwrap(),
            Resolution::Rejected
        );
        assert_eq!(resolve_annotations(&task(&[Legitimate, Legitimate])).unwrap(), Resolution::Pending);
        assert_eq!(resolve_annotations(&task(&[Legitimate, Unsure, Unsure])).unwrap(), Resolution::Rejected);
        assert_eq!(resolve_annotations(&task(&[Legitimate, Legitimate, Unsure])).unwrap(), Resolution::Accepted);
        assert_eq!(resolve_annotations(&task(&[Legitimate, NotLegitimate, Unsure])).unwrap(), Resolution::Rejected);
    }

    #[test]
    fn duplicate_annotator() {
        let mut t = task(&[Legitimate]);
        assert!(!t.add_vote(t.votes[0].clone()).unwrap());
        let changed = Vote { verdict: NotLegitimate, ..t.votes[0].clone() };
        assert!(matches!(t.add_vote(changed.clone()), Err(DatasetError::DuplicateAnnotator { .. })));
        t.votes.push(changed);
        assert!(matches!(resolve_annotations(&t), Err(DatasetError::DuplicateAnnotator { .. })));
    }

    #[test]
    fn stats_small() {
        let s = length_stats(&[100, 200, 300]).unwrap();
        assert_eq!((s.mean, s.median, s.std), (200.0, 200.0, 100.0));
        assert_eq!(length_stats(&[7]).unwrap().std, 0.0);
        assert!(matches!(length_stats(&[]), Err(DatasetError::Empty)));
        let s = length_stats(&[1, 2, 3, 4]).unwrap();
        assert_eq!((s.p25, s.median, s.p75), (1.75, 2.5, 3.25));
    }
}
