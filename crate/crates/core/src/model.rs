//! Domain types shared by every stage: stories, act splits, propositions,
//! counterfactual rewrites, patched candidates and benchmark examples.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;

use crate::error::ValidationError;
use crate::text::word_count;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StorySource {
    Gutenberg,
    FairytaleQa,
    Generated,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    pub word_count: usize,
    #[serde(default)]
    pub source: StorySource,
}

impl Story {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
        source: StorySource,
    ) -> Result<Self, ValidationError> {
        let text = text.into();
        let story = Story { id: id.into(), title: title.into(), word_count: word_count(&text), text, source };
        story.validate()?;
        Ok(story)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.text.trim().is_empty() {
            return Err(ValidationError::EmptyStory(self.id.clone()));
        }
        let actual = word_count(&self.text);
        if actual != self.word_count {
            return Err(ValidationError::WordCountMismatch { id: self.id.clone(), declared: self.word_count, actual });
        }
        Ok(())
    }
}

/// Loose on-disk form of a story; `word_count` is derived when absent.
#[derive(Debug, Clone, Deserialize)]
pub struct StoryRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub word_count: Option<usize>,
    #[serde(default)]
    pub source: StorySource,
}

impl TryFrom<StoryRecord> for Story {
    type Error = ValidationError;

    fn try_from(r: StoryRecord) -> Result<Self, Self::Error> {
        let story = Story {
            word_count: r.word_count.unwrap_or_else(|| word_count(&r.text)),
            id: r.id,
            title: r.title,
            text: r.text,
            source: r.source,
        };
        story.validate()?;
        Ok(story)
    }
}

/// Read a JSONL file of stories.
pub fn load_stories(path: &std::path::Path) -> Result<Vec<Story>, crate::error::DatasetError> {
    use crate::error::DatasetError;
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StoryRecord =
            serde_json::from_str(line).map_err(|e| DatasetError::Schema { line: i + 1, message: e.to_string() })?;
        out.push(Story::try_from(record)?);
    }
    Ok(out)
}

/// A contiguous byte range of a story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start_offset: usize,
    pub end_offset: usize,
    pub text: String,
}

/// Three-act partition of a story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActSplit {
    pub story_id: String,
    pub act1: Span,
    pub act2: Span,
    pub act3: Span,
}

impl ActSplit {
    /// Split `story` at the byte offsets where acts 2 and 3 begin.
    pub fn from_boundaries(story: &Story, act2_start: usize, act3_start: usize) -> Result<Self, ValidationError> {
        let text = &story.text;
        let err = |reason: String| ValidationError::ActSplit { story_id: story.id.clone(), reason };
        if !(0 < act2_start && act2_start < act3_start && act3_start < text.len()) {
            return Err(err(format!(
                "boundaries {act2_start}, {act3_start} do not yield three non-empty acts of {} bytes",
                text.len()
            )));
        }
        if !text.is_char_boundary(act2_start) || !text.is_char_boundary(act3_start) {
            return Err(err("boundary splits a character".into()));
        }
        let span = |s: usize, e: usize| Span { start_offset: s, end_offset: e, text: text[s..e].to_string() };
        let split = ActSplit {
            story_id: story.id.clone(),
            act1: span(0, act2_start),
            act2: span(act2_start, act3_start),
            act3: span(act3_start, text.len()),
        };
        split.validate(story)?;
        Ok(split)
    }

    pub fn acts(&self) -> [&Span; 3] {
        [&self.act1, &self.act2, &self.act3]
    }

    /// Contiguity, ordering, non-emptiness and byte-identical reassembly.
    pub fn validate(&self, story: &Story) -> Result<(), ValidationError> {
        let err = |reason: &str| ValidationError::ActSplit { story_id: self.story_id.clone(), reason: reason.into() };
        if self.story_id != story.id {
            return Err(err("story id mismatch"));
        }
        if self.act1.start_offset != 0 {
            return Err(err("act 1 must start at offset 0"));
        }
        if self.act1.end_offset != self.act2.start_offset || self.act2.end_offset != self.act3.start_offset {
            return Err(err("acts are not contiguous"));
        }
        if self.act3.end_offset != story.text.len() {
            return Err(err("act 3 must end at the end of the story"));
        }
        for span in self.acts() {
            if span.start_offset >= span.end_offset || span.text.is_empty() {
                return Err(err("acts must be non-empty"));
            }
            if story.text.get(span.start_offset..span.end_offset) != Some(span.text.as_str()) {
                return Err(err("span text does not match its offsets"));
            }
        }
        if self.concatenated() != story.text {
            return Err(err("acts do not reassemble the story"));
        }
        Ok(())
    }

    pub fn concatenated(&self) -> String {
        format!("{}{}{}", self.act1.text, self.act2.text, self.act3.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropositionCategory {
    Character,
    Setting,
}

/// A fact established in act 1 together with its counterfactual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposition {
    pub statement: String,
    pub counterfactual: String,
    pub category: PropositionCategory,
    /// Importance on the 1-4 scale, once scored.
    #[serde(default)]
    pub score: Option<u8>,
    #[serde(default)]
    pub score_rationale: String,
}

impl Proposition {
    pub fn new(
        statement: impl Into<String>,
        counterfactual: impl Into<String>,
        category: PropositionCategory,
    ) -> Result<Self, ValidationError> {
        let p = Proposition {
            statement: statement.into().trim().to_string(),
            counterfactual: counterfactual.into().trim().to_string(),
            category,
            score: None,
            score_rationale: String::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.statement.is_empty() || self.counterfactual.is_empty() {
            return Err(ValidationError::Proposition("statement and counterfactual must be non-empty".into()));
        }
        if self.statement == self.counterfactual {
            return Err(ValidationError::Proposition("statement and counterfactual are identical".into()));
        }
        if let Some(s) = self.score {
            if !(1..=4).contains(&s) {
                return Err(ValidationError::Proposition(format!("score {s} outside 1..=4")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedLine {
    /// 1, 2 or 3.
    pub act: u8,
    pub text: String,
}

/// A rewrite of the story under a negated proposition, with the modified
/// lines that were wrapped in `<m>` tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualStory {
    pub act1: String,
    pub act2: String,
    pub act3: String,
    pub marked_lines: Vec<MarkedLine>,
    #[serde(default)]
    pub brainstorm: String,
}

impl CounterfactualStory {
    pub fn act(&self, index: u8) -> &str {
        match index {
            1 => &self.act1,
            2 => &self.act2,
            _ => &self.act3,
        }
    }

    /// Marked spans in acts 2 and 3; act 1 is discarded by patching.
    pub fn change_count(&self) -> usize {
        self.marked_lines.iter().filter(|m| m.act >= 2).count()
    }

    pub fn later_marked_lines(&self) -> Vec<String> {
        self.marked_lines.iter().filter(|m| m.act >= 2).map(|m| m.text.clone()).collect()
    }

    /// The full counterfactual story, joined like a patch.
    pub fn full_text(&self) -> String {
        join_segments(&[&self.act1, &self.act2, &self.act3])
    }
}

/// Join text segments, inserting a newline only where neither side already
/// supplies boundary whitespace.
pub fn join_segments(parts: &[&str]) -> String {
    let mut out = String::new();
    for part in parts {
        if !out.is_empty()
            && !part.is_empty()
            && !out.ends_with(char::is_whitespace)
            && !part.starts_with(char::is_whitespace)
        {
            out.push('\n');
        }
        out.push_str(part);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    PrefilteredOut,
    FilterRejected,
    PendingAnnotation,
    Accepted,
    RejectedByAnnotators,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefilterReason {
    Act2Unchanged,
    Act3Unchanged,
    TooManyChanges,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVotes {
    pub yes: u32,
    pub total: u32,
}

/// Where a candidate came from: models, templates and recorded calls.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage_models: BTreeMap<String, String>,
    pub template_digests: BTreeMap<String, String>,
    pub fixture_digests: Vec<String>,
}

/// Original act 1 spliced onto counterfactual acts 2 and 3, with ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchedCandidate {
    pub candidate_id: String,
    pub story_id: String,
    pub proposition: Proposition,
    pub patched_text: String,
    pub original_act1: String,
    pub counterfactual: CounterfactualStory,
    pub error_lines: Vec<String>,
    pub contradicted_lines: Vec<String>,
    pub explanation: String,
    pub filter_votes: FilterVotes,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter_reason: Option<PrefilterReason>,
    pub provenance: Provenance,
}

impl PatchedCandidate {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let err = |reason: &str| ValidationError::Candidate { id: self.candidate_id.clone(), reason: reason.into() };
        let expected = join_segments(&[&self.original_act1, &self.counterfactual.act2, &self.counterfactual.act3]);
        if self.patched_text != expected {
            return Err(err("patched text is not act 1 followed by counterfactual acts 2 and 3"));
        }
        if self.status == CandidateStatus::Accepted
            && (self.error_lines.is_empty() || self.contradicted_lines.is_empty())
        {
            return Err(err("accepted candidates need error and contradicted lines"));
        }
        self.proposition.validate()
    }
}

/// A detector's or judge's binary answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ErrorFound,
    NoError,
}

impl Verdict {
    pub fn is_error(self) -> bool {
        self == Verdict::ErrorFound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Original,
    Counterfactual,
    Resolved,
    #[default]
    NotApplicable,
}

impl NegativeStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            NegativeStrategy::Original => "original",
            NegativeStrategy::Counterfactual => "counterfactual",
            NegativeStrategy::Resolved => "resolved",
            NegativeStrategy::NotApplicable => "not_applicable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gold {
    pub error_lines: Vec<String>,
    pub contradicted_lines: Vec<String>,
    #[serde(default)]
    pub explanation: String,
}

/// One benchmark record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub text: String,
    pub label: Label,
    #[serde(default)]
    pub negative_strategy: NegativeStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Gold>,
    #[serde(default)]
    pub source_story_id: String,
    pub word_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validated: Option<bool>,
    /// Fields this version does not know about, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Example {
    pub fn positive(
        id: impl Into<String>,
        text: impl Into<String>,
        gold: Gold,
        source_story_id: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Example {
            example_id: id.into(),
            word_count: word_count(&text),
            text,
            label: Label::Positive,
            negative_strategy: NegativeStrategy::NotApplicable,
            gold: Some(gold),
            source_story_id: source_story_id.into(),
            validated: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn negative(
        id: impl Into<String>,
        text: impl Into<String>,
        strategy: NegativeStrategy,
        source_story_id: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Example {
            example_id: id.into(),
            word_count: word_count(&text),
            text,
            label: Label::Negative,
            negative_strategy: strategy,
            gold: None,
            source_story_id: source_story_id.into(),
            validated: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let err = |reason: &str| ValidationError::Example { id: self.example_id.clone(), reason: reason.into() };
        match (self.label, &self.gold) {
            (Label::Positive, None) => Err(err("positive example without gold")),
            (Label::Negative, Some(_)) => Err(err("negative example with gold")),
            (Label::Positive, Some(g)) if g.error_lines.is_empty() || g.contradicted_lines.is_empty() => {
                Err(err("positive example with empty gold sets"))
            }
            _ => Ok(()),
        }
    }
}
