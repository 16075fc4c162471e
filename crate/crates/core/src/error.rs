use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("cannot segment blank text")]
    EmptyInput,
}

/// Violations of domain-type invariants.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("story {0} has empty text")]
    EmptyStory(String),
    #[error("story {id}: word_count {declared} does not match text ({actual})")]
    WordCountMismatch { id: String, declared: usize, actual: usize },
    #[error("invalid act split for {story_id}: {reason}")]
    ActSplit { story_id: String, reason: String },
    #[error("invalid proposition: {0}")]
    Proposition(String),
    #[error("invalid example {id}: {reason}")]
    Example { id: String, reason: String },
    #[error("invalid candidate {id}: {reason}")]
    Candidate { id: String, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication rejected by {provider} (HTTP {status})")]
    Auth { provider: String, status: u16 },
    #[error("rate limit still in effect after {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("server error persisted after {attempts} attempts (last HTTP {status})")]
    RetriesExhausted { attempts: u32, status: u16 },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("request timed out after {secs} s")]
    Timeout { secs: u64 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider {provider} does not support {feature}")]
    Capability { provider: String, feature: &'static str },
    #[error("no fixture recorded for request digest {digest}")]
    MissingFixture { digest: String },
    #[error("fixture {digest} was recorded for a different request")]
    DigestCollision { digest: String },
    #[error("expected {expected} completions, provider returned {got}")]
    PartialResponse { expected: u32, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no provider configured for model {0}")]
    UnknownModel(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("fixture store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("scripted failure: {0}")]
    Scripted(String),
}

impl GatewayError {
    /// Errors worth another attempt.
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Timeout { .. } | GatewayError::Transport(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {stage} has no value for placeholder {{{name}}}")]
    Unfilled { stage: String, name: String },
    #[error("template {stage} was given unknown placeholder {name}")]
    Unknown { stage: String, name: String },
    #[error("template {stage} left residual placeholder {name}")]
    Residual { stage: String, name: String },
    #[error("template file {0}: {1}")]
    Load(String, String),
}

/// Typed failures of the stage response parsers.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("expected {expected} '{marker}' sections, found {found}")]
    MissingSection { marker: &'static str, expected: usize, found: usize },
    #[error("declared line not found in story: {line:?} (nearest: {nearest:?})")]
    LineNotFound { act: u8, line: String, nearest: Option<String> },
    #[error("act boundaries are not strictly increasing (act {act})")]
    OrderViolation { act: u8 },
    #[error("response contains no propositions")]
    NoPropositions,
    #[error("all {count} proposition bullets were malformed")]
    MalformedBullets { count: usize },
    #[error("expected {expected} score blocks, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("score block {block} has out-of-range score {score}")]
    ScoreOutOfRange { block: usize, score: i64 },
    #[error("block {block} is missing field {field}")]
    MissingField { block: usize, field: &'static str },
    #[error("counterfactual response is missing act {0}")]
    MissingAct(u8),
    #[error("unbalanced <m> tags in act {0}")]
    UnbalancedTag(u8),
    #[error("act {0} is empty")]
    EmptyAct(u8),
    #[error("response has no Final Judgement section")]
    MissingJudgement,
    #[error("response has no decision block")]
    MissingDecision,
    #[error("decision reports an error but both line lists are NA")]
    InconsistentNa,
    #[error("response has no <answer> block")]
    MissingAnswer,
    #[error("answer is neither yes nor no: {0:?}")]
    InvalidAnswer(String),
    #[error("confidence {0} outside 0..=100")]
    ConfidenceOutOfRange(i64),
    #[error("response has no <{0}> block")]
    MissingBlock(&'static str),
    #[error("<{0}> block is empty")]
    EmptyBlock(&'static str),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("story {id} has {words} words; at least {min} required")]
    StoryTooShort { id: String, words: usize, min: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("consistency filter needs at least one marked line")]
    NoMarkedLines,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need {needed} negatives, only {available} available")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("annotator {annotator} voted twice on task {task}")]
    DuplicateAnnotator { task: String, annotator: String },
    #[error("unknown task id {0}")]
    UnknownTask(String),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("strategy {0} requires a gateway")]
    GatewayRequired(&'static str),
    #[error("cannot compute statistics of an empty manifest")]
    Empty,
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("contradiction scorer failed: {0}")]
    Scorer(String),
    #[error("detector config: {0}")]
    Config(String),
    #[error("example {0} has empty text")]
    EmptyExample(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study needs at least one story")]
    NoStories,
    #[error("summarize requires a word budget")]
    MissingBudget,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("every text failed detection")]
    AllFailed,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
