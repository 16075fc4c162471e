//! Do summaries and modern retellings introduce more continuity errors than
//! the stories they were generated from?

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::StudyError;
use crate::eval::{Detector, DetectorConfig, Exemplar};
use crate::gateway::{ChatRequest, Gateway};
use crate::model::Story;
use crate::prompt::{parse_generation, GenerationKind, Stage, TemplateSet};

pub const DEFAULT_WORD_BUDGET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationTask {
    Summarize,
    AdaptModern,
}

impl GenerationTask {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationTask::Summarize => "summarize",
            GenerationTask::AdaptModern => "adapt_modern",
        }
    }
}

fn default_budget() -> Option<usize> {
    Some(DEFAULT_WORD_BUDGET)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub task: GenerationTask,
    pub generator_model: String,
    #[serde(default = "default_budget")]
    pub word_budget: Option<usize>,
    pub detector: DetectorConfig,
}

/// Produce the derived text for one story.
pub fn generate(
    story: &Story,
    task: GenerationTask,
    model: &str,
    word_budget: Option<usize>,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<String, StudyError> {
    let (prompt, kind) = match task {
        GenerationTask::Summarize => {
            let budget = word_budget.ok_or(StudyError::MissingBudget)?.to_string();
            (
                templates.render(Stage::Summarize, &[("story", &story.text), ("num_words", &budget)])?,
                GenerationKind::Summary,
            )
        }
        GenerationTask::AdaptModern => {
            (templates.render(Stage::AdaptModern, &[("ORIGINAL_FAIRYTALE", &story.text)])?, GenerationKind::Retelling)
        }
    };
    let reply = gateway.complete(&ChatRequest::prompt(model, prompt))?;
    Ok(parse_generation(&reply.completions[0], kind)?)
}

/// Fraction of flagged texts; failed detections are left out of the
/// denominator. `None` when nothing succeeded.
pub fn detection_rate(flags: &[Option<bool>]) -> Option<f64> {
    let ok: Vec<bool> = flags.iter().flatten().copied().collect();
    if ok.is_empty() {
        None
    } else {
        Some(ok.iter().filter(|f| **f).count() as f64 / ok.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairResult {
    pub story_id: String,
    /// `None` when detection failed.
    pub original_flagged: Option<bool>,
    pub generated_flagged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub task: String,
    pub original_rate: Option<f64>,
    pub generated_rate: Option<f64>,
    /// generated / original
    pub ratio: Option<f64>,
    pub n_pairs: usize,
    pub original_failures: usize,
    pub generated_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rates: RateRow,
    pub pairs: Vec<PairResult>,
    /// Generated texts, keyed by story id, in input order.
    pub generated: Vec<(String, String)>,
}

pub fn rate_row(task: GenerationTask, pairs: &[PairResult]) -> RateRow {
    let orig: Vec<Option<bool>> = pairs.iter().map(|p| p.original_flagged).collect();
    let generated: Vec<Option<bool>> = pairs.iter().map(|p| p.generated_flagged).collect();
    let (o, g) = (detection_rate(&orig), detection_rate(&generated));
    RateRow {
        task: task.as_str().into(),
        original_rate: o,
        generated_rate: g,
        ratio: match (o, g) {
            (Some(o), Some(g)) if o > 0.0 => Some(g / o),
            _ => None,
        },
        n_pairs: pairs.len(),
        original_failures: orig.iter().filter(|f| f.is_none()).count(),
        generated_failures: generated.iter().filter(|f| f.is_none()).count(),
    }
}

fn flag(detector: &Detector<'_>, text: &str, what: &str, id: &str) -> Option<bool> {
    match detector.run(text) {
        Ok(d) => Some(d.response.verdict.is_error()),
        Err(e) => {
            log::warn!("{id}: detection on {what} failed: {e}");
            None
        }
    }
}

/// A finished pair and the generated text, if any.
type StudySlot = (PairResult, Option<String>);

pub fn run_study(
    stories: &[Story],
    config: &StudyConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    exemplars: &[Exemplar],
) -> Result<StudyReport, StudyError> {
    if stories.is_empty() {
        return Err(StudyError::NoStories);
    }
    if config.task == GenerationTask::Summarize && config.word_budget.is_none() {
        return Err(StudyError::MissingBudget);
    }
    let detector = Detector::new(&config.detector, gateway, templates, exemplars)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<StudySlot>>> = Mutex::new(vec![None; stories.len()]);
    let workers = gateway.max_in_flight().clamp(1, stories.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(story) = stories.get(i) else { break };
                let original_flagged = flag(&detector, &story.text, "original", &story.id);
                let generated =
                    match generate(story, config.task, &config.generator_model, config.word_budget, gateway, templates)
                    {
                        Ok(t) => Some(t),
                        Err(e) => {
                            log::warn!("{}: generation failed: {e}", story.id);
                            None
                        }
                    };
                let generated_flagged =
                    generated.as_deref().and_then(|t| flag(&detector, t, "generated text", &story.id));
                let pair = PairResult { story_id: story.id.clone(), original_flagged, generated_flagged };
                results.lock().unwrap()[i] = Some((pair, generated));
            });
        }
    });
    let mut pairs = Vec::with_capacity(stories.len());
    let mut texts = Vec::new();
    for (pair, text) in results.into_inner().unwrap().into_iter().flatten() {
        if let Some(t) = text {
            texts.push((pair.story_id.clone(), t));
        }
        pairs.push(pair);
    }
    if pairs.iter().all(|p| p.original_flagged.is_none() && p.generated_flagged.is_none()) {
        return Err(StudyError::AllFailed);
    }
    Ok(StudyReport { rates: rate_row(config.task, &pairs), pairs, generated: texts })
}

/// Writes `pairs.csv` and `rates.csv` into `dir`.
pub fn write_study(dir: &Path, report: &StudyReport) -> Result<(), StudyError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("pairs.csv"))?;
    for p in &report.pairs {
        w.serialize(p)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("rates.csv"))?;
    w.serialize(&report.rates)?;
    w.flush()?;
    Ok(())
}
