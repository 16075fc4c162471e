//! Detectors, the verifier loop, baselines, metrics and resumable runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::dataset::DatasetManifest;
use crate::error::EvalError;
use crate::gateway::{ChatRequest, Gateway, ReasoningEffort, Usage};
use crate::model::{Example, Gold, Label, Verdict};
use crate::prompt::{self, serialize_detection, DetectionResponse, Stage, TemplateSet};
use crate::text::{any_match, segment_sentences};

pub const DEFAULT_MAX_GENERATOR_SAMPLES: u32 = 5;
pub const DEFAULT_ENTAILMENT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    Vanilla,
    Cot,
    Fewshot,
}

impl PromptStrategy {
    pub fn stage(self) -> Stage {
        match self {
            PromptStrategy::Vanilla => Stage::DetectVanilla,
            PromptStrategy::Cot => Stage::DetectCot,
            PromptStrategy::Fewshot => Stage::DetectFewshot,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::Vanilla => "vanilla",
            PromptStrategy::Cot => "cot",
            PromptStrategy::Fewshot => "fewshot",
        }
    }
}

fn default_max_samples() -> u32 {
    DEFAULT_MAX_GENERATOR_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub model_name: String,
    #[serde(default = "default_max_samples")]
    pub max_generator_samples: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub model_name: String,
    pub strategy: PromptStrategy,
    #[serde(default)]
    pub reasoning_effort: Option<ReasoningEffort>,
    #[serde(default)]
    pub extended_thinking: bool,
    /// Score unparseable responses as "no error" instead of failing.
    #[serde(default)]
    pub lenient_parse: bool,
    #[serde(default)]
    pub verifier: Option<VerifierConfig>,
}

impl DetectorConfig {
    pub fn new(model_name: impl Into<String>, strategy: PromptStrategy) -> Self {
        DetectorConfig {
            model_name: model_name.into(),
            strategy,
            reasoning_effort: None,
            extended_thinking: false,
            lenient_parse: false,
            verifier: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let c: DetectorConfig = crate::config::load_file(path).map_err(EvalError::Config)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.model_name.trim().is_empty() {
            return Err(EvalError::Config("model_name is empty".into()));
        }
        if let Some(v) = &self.verifier {
            if v.max_generator_samples == 0 {
                return Err(EvalError::Config("max_generator_samples must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match &self.verifier {
            Some(_) => format!("{}+verifier", self.strategy.as_str()),
            None => self.strategy.as_str().to_string(),
        }
    }
}

// ----------------------------------------------------------------- exemplars

/// A worked example shown to the few-shot detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub example_id: String,
    pub text: String,
    pub label: Label,
    #[serde(default)]
    pub gold: Option<Gold>,
    #[serde(default)]
    pub explanation: Option<String>,
}

impl Exemplar {
    pub fn response(&self) -> DetectionResponse {
        match &self.gold {
            Some(g) => DetectionResponse {
                explanation: g.explanation.clone(),
                error_lines: g.error_lines.clone(),
                contradicted_lines: g.contradicted_lines.clone(),
                decision_raw: "There is a continuity error in the story.".into(),
                verdict: Verdict::ErrorFound,
                scratchpad: None,
            },
            None => DetectionResponse::no_error(self.explanation.clone().unwrap_or_default()),
        }
    }
}

/// The two fixed exemplars, one positive and one negative.
pub fn bundled_exemplars() -> Vec<Exemplar> {
    serde_json::from_str(include_str!("../data/fewshot_exemplars.json")).expect("bundled exemplars parse")
}

pub fn format_exemplars(exemplars: &[Exemplar]) -> String {
    exemplars
        .iter()
        .map(|e| format!("<example>\n<story>\n{}\n</story>\n{}</example>", e.text, serialize_detection(&e.response())))
        .collect::<Vec<_>>()
        .join("\n\n")
}

// ----------------------------------------------------------------- detection

/// One detector answer together with its cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub response: DetectionResponse,
    pub parse_failed: bool,
    pub verifier_exhausted: bool,
    pub generator_calls: u32,
    pub verifier_calls: u32,
    pub usage: Usage,
}

pub struct Detector<'a> {
    pub config: &'a DetectorConfig,
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub exemplars: &'a [Exemplar],
}

impl<'a> Detector<'a> {
    pub fn new(
        config: &'a DetectorConfig,
        gateway: &'a Gateway,
        templates: &'a TemplateSet,
        exemplars: &'a [Exemplar],
    ) -> Result<Self, EvalError> {
        config.validate()?;
        if config.strategy == PromptStrategy::Fewshot {
            let has = |l| exemplars.iter().any(|e: &Exemplar| e.label == l);
            if exemplars.len() != 2 || !has(Label::Positive) || !has(Label::Negative) {
                return Err(EvalError::Config("few-shot needs one positive and one negative exemplar".into()));
            }
        }
        Ok(Detector { config, gateway, templates, exemplars })
    }

    fn request(&self, model: &str, prompt: String, draw: u32) -> ChatRequest {
        ChatRequest::prompt(model, prompt)
            .with_reasoning_effort(self.config.reasoning_effort)
            .with_extended_thinking(self.config.extended_thinking)
            .with_draw(draw)
    }

    /// Sample the generator once and parse its answer.
    pub fn detect(&self, text: &str, draw: u32) -> Result<Detection, EvalError> {
        if text.trim().is_empty() {
            return Err(EvalError::EmptyExample(String::new()));
        }
        let examples = format_exemplars(self.exemplars);
        let values: Vec<(&str, &str)> = match self.config.strategy {
            PromptStrategy::Fewshot => vec![("examples", &examples), ("story", text)],
            _ => vec![("story", text)],
        };
        let prompt = self.templates.render(self.config.strategy.stage(), &values)?;
        let reply = self.gateway.complete(&self.request(&self.config.model_name, prompt, draw))?;
        let (response, parse_failed) = match prompt::parse_detection(&reply.completions[0]) {
            Ok(r) => (r, false),
            Err(e) if self.config.lenient_parse => {
                log::debug!("unparseable detection scored as no error: {e}");
                (DetectionResponse::no_error(format!("unparseable response: {e}")), true)
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Detection {
            response,
            parse_failed,
            verifier_exhausted: false,
            generator_calls: 1,
            verifier_calls: 0,
            usage: reply.usage,
        })
    }

    /// Resample the generator until the verifier accepts a proposed error,
    /// the generator reports none, or the sample budget runs out.
    pub fn detect_with_verifier(&self, text: &str) -> Result<Detection, EvalError> {
        let verifier =
            self.config.verifier.as_ref().ok_or_else(|| EvalError::Config("no verifier configured".into()))?;
        let mut usage = Usage::default();
        let mut verifier_calls = 0;
        for draw in 0..verifier.max_generator_samples {
            let mut d = self.detect(text, draw)?;
            usage += d.usage;
            let done = |mut d: Detection, usage: Usage, verifier_calls: u32| {
                d.generator_calls = draw + 1;
                d.verifier_calls = verifier_calls;
                d.usage = usage;
                d
            };
            if d.response.verdict == Verdict::NoError {
                return Ok(done(d, usage, verifier_calls));
            }
            let error_lines = d.response.error_lines.join("\n");
            let contradicted = d.response.contradicted_lines.join("\n");
            let prompt = self.templates.render(
                Stage::Verifier,
                &[
                    ("story", text),
                    ("cont_error_expl", &d.response.explanation),
                    ("cont_error_lines", &error_lines),
                    ("contradicted_lines", &contradicted),
                ],
            )?;
            let reply = self.gateway.complete(&ChatRequest::prompt(&verifier.model_name, prompt).with_draw(draw))?;
            verifier_calls += 1;
            usage += reply.usage;
            let accepted = match prompt::parse_verifier_with(&reply.completions[0], self.config.lenient_parse) {
                Ok(v) => v.answer,
                Err(e) if self.config.lenient_parse => {
                    log::debug!("unparseable verifier answer treated as rejection: {e}");
                    false
                }
                Err(e) => return Err(e.into()),
            };
            if accepted {
                d.parse_failed = false;
                return Ok(done(d, usage, verifier_calls));
            }
        }
        Ok(Detection {
            response: DetectionResponse::no_error("every proposed error was rejected by the verifier"),
            parse_failed: false,
            verifier_exhausted: true,
            generator_calls: verifier.max_generator_samples,
            verifier_calls,
            usage,
        })
    }

    /// Verifier loop when configured, single sample otherwise.
    pub fn run(&self, text: &str) -> Result<Detection, EvalError> {
        if self.config.verifier.is_some() {
            self.detect_with_verifier(text)
        } else {
            self.detect(text, 0)
        }
    }
}

// ----------------------------------------------------------------- baselines

pub fn no_error_baseline(_example: &Example) -> DetectionResponse {
    DetectionResponse::no_error("baseline: always no error")
}

/// A fair coin per (seed, example id); the same pair always lands the same way.
pub fn random_baseline(example: &Example, seed: u64) -> DetectionResponse {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example.example_id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    if rng.random_bool(0.5) {
        DetectionResponse {
            explanation: "baseline: random".into(),
            error_lines: Vec::new(),
            contradicted_lines: Vec::new(),
            decision_raw: "There is a continuity error in the story.".into(),
            verdict: Verdict::ErrorFound,
            scratchpad: None,
        }
    } else {
        DetectionResponse::no_error("baseline: random")
    }
}

/// Probability that `hypothesis` contradicts `premise`.
pub trait ContradictionScorer: Send + Sync {
    fn contradiction(&self, premise: &str, hypothesis: &str) -> Result<f64, EvalError>;
}

/// Wraps a closure; used by tests and scripted runs.
pub struct FnScorer<F>(pub F);

impl<F> ContradictionScorer for FnScorer<F>
where
    F: Fn(&str, &str) -> Result<f64, EvalError> + Send + Sync,
{
    fn contradiction(&self, premise: &str, hypothesis: &str) -> Result<f64, EvalError> {
        (self.0)(premise, hypothesis)
    }
}

#[derive(Serialize)]
struct PairQuery<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct PairScore {
    contradiction: f64,
}

fn checked(p: f64) -> Result<f64, EvalError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(EvalError::Scorer(format!("score {p} outside [0, 1]")))
    }
}

/// POSTs `{"premise", "hypothesis"}` and reads `{"contradiction": p}`.
pub struct HttpScorer {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpScorer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EvalError::Scorer(e.to_string()))?;
        Ok(HttpScorer { endpoint: endpoint.into(), client })
    }
}

impl ContradictionScorer for HttpScorer {
    fn contradiction(&self, premise: &str, hypothesis: &str) -> Result<f64, EvalError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&PairQuery { premise, hypothesis })
            .send()
            .map_err(|e| EvalError::Scorer(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EvalError::Scorer(format!("HTTP {}", resp.status().as_u16())));
        }
        let score: PairScore = resp.json().map_err(|e| EvalError::Scorer(e.to_string()))?;
        checked(score.contradiction)
    }
}

/// A long-lived child process speaking one JSON object per line each way.
pub struct SubprocessScorer {
    child: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl SubprocessScorer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, EvalError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| EvalError::Scorer(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(SubprocessScorer { child: Mutex::new((child, stdin, stdout)) })
    }
}

impl ContradictionScorer for SubprocessScorer {
    fn contradiction(&self, premise: &str, hypothesis: &str) -> Result<f64, EvalError> {
        let mut guard = self.child.lock().unwrap();
        let (_, stdin, stdout) = &mut *guard;
        let mut line = serde_json::to_string(&PairQuery { premise, hypothesis })?;
        line.push('\n');
        stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()).map_err(|e| EvalError::Scorer(e.to_string()))?;
        let mut reply = String::new();
        if stdout.read_line(&mut reply).map_err(|e| EvalError::Scorer(e.to_string()))? == 0 {
            return Err(EvalError::Scorer("scorer process closed its output".into()));
        }
        let score: PairScore = serde_json::from_str(&reply).map_err(|e| EvalError::Scorer(e.to_string()))?;
        checked(score.contradiction)
    }
}

impl Drop for SubprocessScorer {
    fn drop(&mut self) {
        if let Ok(mut g) = self.child.lock() {
            let _ = g.0.kill();
            let _ = g.0.wait();
        }
    }
}

/// Score every sentence pair i < j; the strongest contradiction at or above
/// `threshold` localizes the error (earliest pair wins ties).
pub fn entailment_baseline(
    text: &str,
    scorer: &dyn ContradictionScorer,
    threshold: f64,
) -> Result<(DetectionResponse, usize), EvalError> {
    let sentences = segment_sentences(text).map_err(|_| EvalError::EmptyExample(String::new()))?;
    let mut best: Option<(f64, usize, usize)> = None;
    let mut queries = 0;
    for i in 0..sentences.len() {
        for j in i + 1..sentences.len() {
            let p = checked(scorer.contradiction(&sentences[i].text, &sentences[j].text)?)?;
            queries += 1;
            if p >= threshold && best.is_none_or(|(b, _, _)| p > b) {
                best = Some((p, i, j));
            }
        }
    }
    let response = match best {
        None => DetectionResponse::no_error("no sentence pair reached the contradiction threshold"),
        Some((p, i, j)) => DetectionResponse {
            explanation: format!("sentences {i} and {j} contradict with probability {p}"),
            error_lines: vec![sentences[j].text.clone()],
            contradicted_lines: vec![sentences[i].text.clone()],
            decision_raw: "There is a continuity error in the story.".into(),
            verdict: Verdict::ErrorFound,
            scratchpad: None,
        },
    };
    Ok((response, queries))
}

// ------------------------------------------------------------------- metrics

fn label_positive(label: Label) -> bool {
    label == Label::Positive
}

/// Localization credit: classification must be right; on positives some
/// predicted error line must match a gold error line and some predicted
/// contradicted line must match a gold contradicted line.
pub fn ceeval_full(verdict: Verdict, error_lines: &[String], contradicted_lines: &[String], example: &Example) -> u8 {
    match (verdict.is_error(), label_positive(example.label)) {
        (false, false) => 1,
        (true, true) => {
            let Some(gold) = &example.gold else { return 0 };
            u8::from(
                any_match(error_lines, &gold.error_lines) && any_match(contradicted_lines, &gold.contradicted_lines),
            )
        }
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Positive class is "error found". Empty denominators give 0.
pub fn score_pairs(pairs: impl IntoIterator<Item = (Verdict, Label)>) -> ClassificationScores {
    let mut c = Confusion::default();
    for (verdict, label) in pairs {
        match (verdict.is_error(), label_positive(label)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    ClassificationScores {
        accuracy: ratio(c.tp + c.tn, c.tp + c.fp + c.tn + c.fn_),
        precision,
        recall,
        f1,
        confusion: c,
    }
}

pub fn score_classification(records: &[EvalRecord]) -> ClassificationScores {
    score_pairs(records.iter().map(|r| (r.verdict, r.label)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeevalScores {
    pub ceeval_full: f64,
    pub ceeval_pos: f64,
}

pub fn ceeval_aggregate(records: &[EvalRecord]) -> CeevalScores {
    let total: usize = records.iter().map(|r| r.ceeval as usize).sum();
    let pos: Vec<&EvalRecord> = records.iter().filter(|r| label_positive(r.label)).collect();
    let pos_total: usize = pos.iter().map(|r| r.ceeval as usize).sum();
    CeevalScores { ceeval_full: ratio(total, records.len()), ceeval_pos: ratio(pos_total, pos.len()) }
}

// ------------------------------------------------------------------- records

fn is_false(b: &bool) -> bool {
    !*b
}

/// The scored outcome of one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub label: Label,
    pub verdict: Verdict,
    pub error_lines: Vec<String>,
    pub contradicted_lines: Vec<String>,
    pub correct_classification: bool,
    pub ceeval: u8,
    pub generator_calls: u32,
    #[serde(default)]
    pub verifier_calls: u32,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub parse_failed: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub verifier_exhausted: bool,
}

impl EvalRecord {
    pub fn new(example: &Example, d: &Detection) -> Self {
        let r = &d.response;
        EvalRecord {
            example_id: example.example_id.clone(),
            label: example.label,
            verdict: r.verdict,
            error_lines: r.error_lines.clone(),
            contradicted_lines: r.contradicted_lines.clone(),
            correct_classification: r.verdict.is_error() == label_positive(example.label),
            ceeval: ceeval_full(r.verdict, &r.error_lines, &r.contradicted_lines, example),
            generator_calls: d.generator_calls,
            verifier_calls: d.verifier_calls,
            prompt_tokens: d.usage.prompt_tokens,
            completion_tokens: d.usage.completion_tokens,
            parse_failed: d.parse_failed,
            verifier_exhausted: d.verifier_exhausted,
        }
    }
}

/// What to run over each example.
pub enum Method<'a> {
    Detector(Detector<'a>),
    NoError,
    Random { seed: u64 },
    Entailment { scorer: &'a dyn ContradictionScorer, threshold: f64 },
}

fn baseline_detection(response: DetectionResponse, calls: u32) -> Detection {
    Detection {
        response,
        parse_failed: false,
        verifier_exhausted: false,
        generator_calls: calls,
        verifier_calls: 0,
        usage: Usage::default(),
    }
}

impl Method<'_> {
    /// `(model, strategy)` columns of the report.
    pub fn labels(&self) -> (String, String) {
        match self {
            Method::Detector(d) => (d.config.model_name.clone(), d.config.label()),
            Method::NoError => ("baseline".into(), "no-error".into()),
            Method::Random { seed } => ("baseline".into(), format!("random(seed={seed})")),
            Method::Entailment { threshold, .. } => ("baseline".into(), format!("entailment(threshold={threshold})")),
        }
    }

    pub fn evaluate(&self, example: &Example) -> Result<EvalRecord, EvalError> {
        if example.text.trim().is_empty() {
            return Err(EvalError::EmptyExample(example.example_id.clone()));
        }
        let detection = match self {
            Method::Detector(d) => d.run(&example.text)?,
            Method::NoError => baseline_detection(no_error_baseline(example), 1),
            Method::Random { seed } => baseline_detection(random_baseline(example, *seed), 1),
            Method::Entailment { scorer, threshold } => {
                let (response, _) = entailment_baseline(&example.text, *scorer, *threshold)?;
                baseline_detection(response, 1)
            }
        };
        Ok(EvalRecord::new(example, &detection))
    }

    fn max_workers(&self) -> usize {
        match self {
            Method::Detector(d) => d.gateway.max_in_flight(),
            _ => 1,
        }
    }
}

/// One row of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub strategy: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ceeval_pos: f64,
    pub ceeval_full: f64,
    pub mean_completion_tokens: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub example_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub row: ReportRow,
    pub classification: ClassificationScores,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub failures: Vec<EvalFailure>,
    /// Ids of the worked examples shown to a few-shot detector.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplar_ids: Vec<String>,
    #[serde(skip)]
    pub records: Vec<EvalRecord>,
}

/// Aggregates are always recomputed from the full record set.
pub fn summarize(model: &str, strategy: &str, records: &[EvalRecord], failures: Vec<EvalFailure>) -> EvalReport {
    let classification = score_classification(records);
    let ceeval = ceeval_aggregate(records);
    let prompt_tokens: u64 = records.iter().map(|r| r.prompt_tokens).sum();
    let completion_tokens: u64 = records.iter().map(|r| r.completion_tokens).sum();
    EvalReport {
        row: ReportRow {
            model: model.into(),
            strategy: strategy.into(),
            accuracy: classification.accuracy,
            precision: classification.precision,
            recall: classification.recall,
            f1: classification.f1,
            ceeval_pos: ceeval.ceeval_pos,
            ceeval_full: ceeval.ceeval_full,
            mean_completion_tokens: if records.is_empty() {
                0.0
            } else {
                completion_tokens as f64 / records.len() as f64
            },
            n: records.len(),
        },
        classification,
        total_prompt_tokens: prompt_tokens,
        total_completion_tokens: completion_tokens,
        failures,
        exemplar_ids: Vec::new(),
        records: records.to_vec(),
    }
}

/// Records already in a log file. A torn final line is ignored.
pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let raw = match std::fs::read_to_string(path) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}: skipping unreadable record: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Evaluate every example not already in `records_path`, appending each
/// record as it completes. On return the file holds all records in
/// manifest order.
pub fn run_eval(
    manifest: &DatasetManifest,
    method: &Method<'_>,
    records_path: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    let order: BTreeMap<&str, usize> =
        manifest.examples.iter().enumerate().map(|(i, e)| (e.example_id.as_str(), i)).collect();
    let mut done: BTreeMap<String, EvalRecord> = BTreeMap::new();
    if let Some(path) = records_path {
        for r in read_records(path)? {
            if order.contains_key(r.example_id.as_str()) {
                done.insert(r.example_id.clone(), r);
            }
        }
    }
    let seen: HashSet<&str> = done.keys().map(String::as_str).collect();
    let todo: Vec<&Example> = manifest.examples.iter().filter(|e| !seen.contains(e.example_id.as_str())).collect();

    let log = match records_path {
        Some(p) => Some(Mutex::new(std::fs::OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let next = AtomicUsize::new(0);
    let fresh: Mutex<Vec<EvalRecord>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<EvalFailure>> = Mutex::new(Vec::new());
    let io_error: Mutex<Option<std::io::Error>> = Mutex::new(None);
    let workers = method.max_workers().clamp(1, todo.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(example) = todo.get(i) else { break };
                match method.evaluate(example) {
                    Ok(record) => {
                        if let Some(log) = &log {
                            let mut line = serde_json::to_string(&record).expect("records serialize");
                            line.push('\n');
                            let mut f = log.lock().unwrap();
                            if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.sync_data()) {
                                *io_error.lock().unwrap() = Some(e);
                            }
                        }
                        fresh.lock().unwrap().push(record);
                    }
                    Err(e) => {
                        log::warn!("example {} failed: {e}", example.example_id);
                        failures
                            .lock()
                            .unwrap()
                            .push(EvalFailure { example_id: example.example_id.clone(), error: e.to_string() });
                    }
                }
            });
        }
    });
    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e.into());
    }
    for r in fresh.into_inner().unwrap() {
        done.insert(r.example_id.clone(), r);
    }
    let mut records: Vec<EvalRecord> = done.into_values().collect();
    records.sort_by_key(|r| order[r.example_id.as_str()]);
    let mut failures = failures.into_inner().unwrap();
    failures.sort_by_key(|f| order[f.example_id.as_str()]);

    if let Some(path) = records_path {
        let tmp = path.with_extension("tmp");
        crate::pipeline::write_jsonl(&tmp, &records)?;
        std::fs::rename(tmp, path)?;
    }
    let (model, strategy) = method.labels();
    let mut report = summarize(&model, &strategy, &records, failures);
    if let Method::Detector(d) = method {
        if d.config.strategy == PromptStrategy::Fewshot {
            report.exemplar_ids = d.exemplars.iter().map(|e| e.example_id.clone()).collect();
        }
    }
    Ok(report)
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
