//! Parsers for every stage response, each paired with a serializer that
//! emits the same grammar so that parse, serialize, parse is a fixed point.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;

use crate::error::ParseError;
use crate::model::{ActSplit, CounterfactualStory, MarkedLine, Proposition, PropositionCategory, Story, Verdict};
use crate::text::{normalize_sentence, segment_sentences, token_jaccard};

/// Phrase whose presence in a decision means "no error".
pub const NO_ERROR_PHRASE: &str = "No continuity error found";

fn re(pattern: &str) -> Regex {
    Regex::new(pattern).expect("static regex")
}

pub fn decision_verdict(decision: &str) -> Verdict {
    if decision.to_lowercase().contains(&NO_ERROR_PHRASE.to_lowercase()) {
        Verdict::NoError
    } else {
        Verdict::ErrorFound
    }
}

// ---------------------------------------------------------------- three acts

static FIRST_LINE: LazyLock<Regex> = LazyLock::new(|| re(r"(?i)\*{0,2}First Line:\*{0,2}"));
static HEADING_LINE: LazyLock<Regex> = LazyLock::new(|| re(r"(?m)^[ \t]*#"));
static BLANK_LINE: LazyLock<Regex> = LazyLock::new(|| re(r"\n[ \t]*\n"));

fn declared_first_lines(response: &str) -> Vec<String> {
    let starts: Vec<(usize, usize)> = FIRST_LINE.find_iter(response).map(|m| (m.start(), m.end())).collect();
    let mut out = Vec::new();
    for (k, &(_, end)) in starts.iter().enumerate() {
        let mut stop = starts.get(k + 1).map(|s| s.0).unwrap_or(response.len());
        if let Some(h) = HEADING_LINE.find(&response[end..stop]) {
            stop = end + h.start();
        }
        // A declared line may wrap, but a blank line ends it.
        let body = response[end..stop].trim();
        let body = BLANK_LINE.find(body).map(|m| &body[..m.start()]).unwrap_or(body);
        out.push(body.trim().to_string());
    }
    out
}

/// Byte offset of `line` in `text` at or after `from`: verbatim first, then
/// with any run of whitespace allowed to differ, then without wrapping quotes.
fn locate(text: &str, line: &str, from: usize) -> Option<usize> {
    if from > text.len() || line.is_empty() {
        return None;
    }
    let hay = &text[from..];
    if let Some(i) = hay.find(line) {
        return Some(from + i);
    }
    let words: Vec<String> = line.split_whitespace().map(regex::escape).collect();
    if let Ok(flex) = Regex::new(&words.join(r"\s+")) {
        if let Some(m) = flex.find(hay) {
            return Some(from + m.start());
        }
    }
    let unquoted = line.trim_matches(|c: char| matches!(c, '"' | '`' | '“' | '”' | '<' | '>')).trim();
    if unquoted != line && !unquoted.is_empty() {
        return locate(text, unquoted, from);
    }
    None
}

fn nearest_sentence(story: &str, line: &str) -> Option<String> {
    let target = normalize_sentence(line);
    segment_sentences(story)
        .ok()?
        .into_iter()
        .map(|s| (token_jaccard(&s.normalized, &target), s.text))
        .filter(|(score, _)| *score > 0.0)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, text)| text)
}

pub fn parse_three_act(response: &str, story: &Story) -> Result<ActSplit, ParseError> {
    let lines = declared_first_lines(response);
    if lines.len() < 3 {
        return Err(ParseError::MissingSection { marker: "**First Line:**", expected: 3, found: lines.len() });
    }
    let text = story.text.as_str();
    let not_found = |act: u8, line: &str| ParseError::LineNotFound {
        act,
        line: line.to_string(),
        nearest: nearest_sentence(text, line),
    };

    let first = locate(text, &lines[0], 0).ok_or_else(|| not_found(1, &lines[0]))?;
    if !text[..first].trim().is_empty() {
        return Err(ParseError::OrderViolation { act: 1 });
    }
    let mut bounds = [0usize; 2];
    let mut prev = first;
    for act in 2..=3u8 {
        let line = &lines[act as usize - 1];
        let pos = match locate(text, line, prev + 1) {
            Some(p) => p,
            None if locate(text, line, 0).is_some() => return Err(ParseError::OrderViolation { act }),
            None => return Err(not_found(act, line)),
        };
        bounds[act as usize - 2] = pos;
        prev = pos;
    }
    ActSplit::from_boundaries(story, bounds[0], bounds[1]).map_err(|_| ParseError::OrderViolation { act: 3 })
}

/// Render an act split in the three-act response grammar.
pub fn serialize_three_act(split: &ActSplit) -> String {
    let text = split.concatenated();
    let titles = ["The Setup", "Confrontation", "Resolution"];
    let mut out = String::new();
    let mut prev = 0usize;
    for (k, span) in split.acts().into_iter().enumerate() {
        let body = span.text.trim();
        let mut line = body.lines().next().unwrap_or("").trim_end().to_string();
        let at = span.start_offset + (span.text.len() - span.text.trim_start().len());
        let from = if k == 0 { 0 } else { prev + 1 };
        if locate(&text, &line, from) != Some(at) {
            line = body.to_string();
        }
        prev = at;
        if k > 0 {
            out.push('\n');
        }
        out.push_str(&format!("### Act {}: {}\n**First Line:** {}\n", k + 1, titles[k], line));
    }
    out
}

// -------------------------------------------------------------- propositions

static SECTION: LazyLock<Regex> = LazyLock::new(|| re(r"(?i)^[\s#*]*(characters?|settings?)[\s*]*:?[\s*]*$"));
static BULLET: LazyLock<Regex> = LazyLock::new(|| re(r"^\s*(?:[-*•]|\d+[.)])\s*(.*)$"));
static FACT: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)^\**\s*Fact\s*\**\s*:\s*\**\s*(.*?)\s*[;,]?\s*\**\s*Counterfactual\s*\**\s*:\s*\**\s*(.*?)\s*\**\s*$")
});

/// Propositions in document order plus the number of skipped bullets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedPropositions {
    pub propositions: Vec<Proposition>,
    pub malformed: usize,
}

pub fn parse_propositions(response: &str) -> Result<ExtractedPropositions, ParseError> {
    let mut category = None;
    let mut propositions = Vec::new();
    let mut malformed = 0;
    for line in response.lines() {
        if let Some(c) = SECTION.captures(line) {
            category = Some(if c[1].to_lowercase().starts_with("char") {
                PropositionCategory::Character
            } else {
                PropositionCategory::Setting
            });
            continue;
        }
        let content = match BULLET.captures(line) {
            Some(c) => c.get(1).map(|m| m.as_str()).unwrap_or(""),
            None if FACT.is_match(line.trim()) => line.trim(),
            None => continue,
        };
        if content.trim().trim_matches('.').is_empty() || content.trim() == "…" {
            continue;
        }
        let parsed = FACT.captures(content).and_then(|c| {
            let cat = category?;
            Proposition::new(c[1].trim().trim_end_matches(';'), c[2].trim(), cat).ok()
        });
        match parsed {
            Some(p) => propositions.push(p),
            None => malformed += 1,
        }
    }
    if propositions.is_empty() {
        return Err(if malformed > 0 {
            ParseError::MalformedBullets { count: malformed }
        } else {
            ParseError::NoPropositions
        });
    }
    Ok(ExtractedPropositions { propositions, malformed })
}

pub fn serialize_propositions(props: &[Proposition]) -> String {
    let mut out = String::new();
    let mut current = None;
    for p in props {
        if current != Some(p.category) {
            if current.is_some() {
                out.push('\n');
            }
            out.push_str(match p.category {
                PropositionCategory::Character => "Characters:\n",
                PropositionCategory::Setting => "Setting:\n",
            });
            current = Some(p.category);
        }
        out.push_str(&format!("- Fact: {}; Counterfactual: {}\n", p.statement, p.counterfactual));
    }
    out
}

/// The numbered fact list substituted into the scoring prompt.
pub fn format_fact_pairs(props: &[Proposition]) -> String {
    props
        .iter()
        .enumerate()
        .map(|(i, p)| format!("F{}. Fact: {}; Counterfactual: {}", i + 1, p.statement, p.counterfactual))
        .collect::<Vec<_>>()
        .join("\n")
}

// -------------------------------------------------------------------- scores

static SCORE_BLOCK: LazyLock<Regex> = LazyLock::new(|| re(r"(?m)^[ \t]*#{1,3}[ \t]*\**[ \t]*F(\d+)\b.*$"));
static SCORE: LazyLock<Regex> = LazyLock::new(|| re(r"(?i)Importance\s+Score\s*\**\s*:\s*\**\s*\[*\s*(-?\d+)"));
static REASONING: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?is)Reasoning\s*\**\s*:\s*\**(.*?)(?:\n[ \t]*#{1,3}[ \t]|\n[ \t]*-{3,}|\z)"));

/// Assign block `i`'s score and rationale to `props[i]`.
pub fn parse_scores(response: &str, props: &[Proposition]) -> Result<Vec<Proposition>, ParseError> {
    let heads: Vec<usize> = SCORE_BLOCK.find_iter(response).map(|m| m.start()).collect();
    if heads.len() != props.len() {
        return Err(ParseError::CountMismatch { expected: props.len(), found: heads.len() });
    }
    let mut out = Vec::with_capacity(props.len());
    for (i, &start) in heads.iter().enumerate() {
        let block = &response[start..heads.get(i + 1).copied().unwrap_or(response.len())];
        let block_no = i + 1;
        let score: i64 = SCORE
            .captures(block)
            .and_then(|c| c[1].parse().ok())
            .ok_or(ParseError::MissingField { block: block_no, field: "Importance Score" })?;
        if !(1..=4).contains(&score) {
            return Err(ParseError::ScoreOutOfRange { block: block_no, score });
        }
        let rationale = REASONING.captures(block).map(|c| c[1].trim().to_string()).unwrap_or_default();
        let mut p = props[i].clone();
        p.score = Some(score as u8);
        p.score_rationale = rationale;
        out.push(p);
    }
    Ok(out)
}

pub fn serialize_scores(props: &[Proposition]) -> String {
    props
        .iter()
        .enumerate()
        .map(|(i, p)| {
            format!(
                "## F{n}\n### Statement: {}\n### Counterfactual: {}\n### Reasoning: {}\n### Importance Score: {}\n",
                p.statement,
                p.counterfactual,
                p.score_rationale,
                p.score.unwrap_or(0),
                n = i + 1
            )
        })
        .collect::<Vec<_>>()
        .join("----\n")
}

// ------------------------------------------------------------ counterfactual

static CF_STORY: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?im)^[ \t]*#{1,3}[ \t]*\**Counterfactual Story\**[ \t]*:?[ \t]*$"));
static BRAINSTORM: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?im)^[ \t]*#{1,3}[ \t]*\**Brainstorm(?:ing)?\**[ \t]*:?[ \t]*$"));
static ACT_HEADING: LazyLock<Regex> = LazyLock::new(|| re(r"(?im)^[ \t]*#{2,4}[ \t]*\**[ \t]*Act[ \t]*([123])\b.*$"));
static RULE_TAIL: LazyLock<Regex> = LazyLock::new(|| re(r"(?:\n[ \t]*-{3,}[ \t]*)+\s*\z"));

/// Remove `<m>` tags, returning the clean text and the marked spans.
fn strip_marks(text: &str, act: u8) -> Result<(String, Vec<MarkedLine>), ParseError> {
    let mut clean = String::with_capacity(text.len());
    let mut marks = Vec::new();
    let mut rest = text;
    let mut open: Option<usize> = None;
    loop {
        let next_open = rest.find("<m>");
        let next_close = rest.find("</m>");
        let (at, is_open) = match (next_open, next_close) {
            (None, None) => break,
            (Some(o), Some(c)) if o < c => (o, true),
            (Some(o), None) => (o, true),
            (_, Some(c)) => (c, false),
        };
        clean.push_str(&rest[..at]);
        if is_open {
            if open.is_some() {
                return Err(ParseError::UnbalancedTag(act));
            }
            open = Some(clean.len());
            rest = &rest[at + 3..];
        } else {
            let start = open.take().ok_or(ParseError::UnbalancedTag(act))?;
            let inner = clean[start..].trim();
            if !inner.is_empty() {
                marks.push(MarkedLine { act, text: inner.to_string() });
            }
            rest = &rest[at + 4..];
        }
    }
    if open.is_some() {
        return Err(ParseError::UnbalancedTag(act));
    }
    clean.push_str(rest);
    Ok((clean, marks))
}

pub fn parse_counterfactual(response: &str) -> Result<CounterfactualStory, ParseError> {
    let story_head = CF_STORY.find(response).ok_or(ParseError::MissingSection {
        marker: "## Counterfactual Story",
        expected: 1,
        found: 0,
    })?;
    let brainstorm = BRAINSTORM
        .find(&response[..story_head.start()])
        .map(|m| response[m.end()..story_head.start()].trim().to_string())
        .unwrap_or_default();
    let section = &response[story_head.end()..];
    let heads: Vec<(u8, usize, usize)> = ACT_HEADING
        .captures_iter(section)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].parse().unwrap(), m.start(), m.end())
        })
        .collect();
    let mut acts: [Option<String>; 3] = Default::default();
    let mut marked = Vec::new();
    for act in 1..=3u8 {
        let k = heads.iter().position(|h| h.0 == act).ok_or(ParseError::MissingAct(act))?;
        let end = heads.get(k + 1).map(|h| h.1).unwrap_or(section.len());
        let raw = RULE_TAIL.replace(&section[heads[k].2..end], "");
        let (clean, marks) = strip_marks(&raw, act)?;
        let clean = clean.trim().to_string();
        if clean.is_empty() {
            return Err(ParseError::EmptyAct(act));
        }
        acts[act as usize - 1] = Some(clean);
        marked.extend(marks);
    }
    let [a1, a2, a3] = acts.map(Option::unwrap);
    Ok(CounterfactualStory { act1: a1, act2: a2, act3: a3, marked_lines: marked, brainstorm })
}

/// Re-wrap each marked line of `act` in `<m>` tags inside `text`.
pub fn mark_lines<S: AsRef<str>>(text: &str, lines: &[S]) -> String {
    let mut out = String::with_capacity(text.len() + lines.len() * 7);
    let mut cursor = 0;
    for line in lines {
        let line = line.as_ref();
        if let Some(i) = text[cursor..].find(line).filter(|_| !line.is_empty()) {
            let at = cursor + i;
            out.push_str(&text[cursor..at]);
            out.push_str("<m>");
            out.push_str(line);
            out.push_str("</m>");
            cursor = at + line.len();
        }
    }
    out.push_str(&text[cursor..]);
    out
}

pub fn serialize_counterfactual(cf: &CounterfactualStory) -> String {
    let mut out = format!("## Brainstorming\n{}\n\n## Counterfactual Story\n", cf.brainstorm);
    for act in 1..=3u8 {
        let lines: Vec<&str> = cf.marked_lines.iter().filter(|m| m.act == act).map(|m| m.text.as_str()).collect();
        out.push_str(&format!("### Act {act}:\n{}\n\n\n", mark_lines(cf.act(act), &lines)));
    }
    out.truncate(out.trim_end().len());
    out.push('\n');
    out
}

// -------------------------------------------------------------- line lists

static QUOTED: LazyLock<Regex> = LazyLock::new(|| re(r#"["“]([^"“”]+)["”]"#));
static QUOTED_ONLY: LazyLock<Regex> = LazyLock::new(|| re(r#"^(?:\s*(?:,|;|and)?\s*["“][^"“”]+["”])+\s*[,;.]?\s*$"#));
static NA: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)^(?:n/?a(?:$|[^\w\s]|\s*\(|\s+[-–])|none\.?$|not applicable\b|no lines?\b|if applicable\b|or na if\b)")
});

fn strip_once(s: &str) -> &str {
    let s = s.trim();
    for marker in ["- ", "* ", "• ", "-\t"] {
        if let Some(r) = s.strip_prefix(marker) {
            return r;
        }
    }
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 && digits < 4 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r;
        }
    }
    if let Some(r) = s.strip_prefix("**").and_then(|r| r.strip_suffix("**")) {
        return r;
    }
    if let Some(r) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        return r;
    }
    for (open, close) in [('"', '"'), ('“', '”'), ('`', '`')] {
        if let Some(r) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            if !r.contains(['"', '“', '”']) {
                return r;
            }
        }
    }
    for (open, close) in [('\'', '\''), ('‘', '’')] {
        if let Some(r) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            let inner_quote = r.contains('‘') || r.contains(" '") || r.contains("' ") || r.contains("’ ");
            if !inner_quote {
                return r;
            }
        }
    }
    s
}

/// Strip list markers, brackets and wrapping quotes until nothing changes.
pub fn clean_item(line: &str) -> String {
    let mut s = line;
    loop {
        let next = strip_once(s);
        if next == s {
            return s.trim().to_string();
        }
        s = next;
    }
}

fn is_placeholder(item: &str) -> bool {
    let t = item.trim();
    t.is_empty()
        || t.chars().all(|c| matches!(c, '.' | '…' | '-' | '*'))
        || NA.is_match(t)
        || t.to_lowercase().starts_with("*note")
        || t.to_lowercase().starts_with(&NO_ERROR_PHRASE.to_lowercase())
}

/// One item per line; a line made only of quoted sentences yields each.
pub fn parse_line_items(block: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in block.lines() {
        let bare = strip_once(line);
        let bare = if bare == line.trim() { line.trim() } else { bare };
        let quoted: Vec<&str> = QUOTED.captures_iter(bare).map(|c| c.get(1).unwrap().as_str()).collect();
        if quoted.len() >= 2 && QUOTED_ONLY.is_match(bare) {
            out.extend(quoted.into_iter().map(clean_item).filter(|q| !is_placeholder(q)));
            continue;
        }
        let item = clean_item(line);
        if !is_placeholder(&item) {
            out.push(item);
        }
    }
    out
}

fn serialize_items(items: &[String]) -> String {
    if items.is_empty() {
        "NA".to_string()
    } else {
        items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n")
    }
}

fn na_or(text: &str) -> String {
    let t = text.trim();
    if NA.is_match(t) {
        String::new()
    } else {
        t.to_string()
    }
}

// -------------------------------------------------------------- filter judge

static JUDGEMENT: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?im)^[ \t]*#{1,3}[ \t]*\**Final Judge?ment\**[ \t]*:?[ \t]*$"));
static SUBHEAD: LazyLock<Regex> = LazyLock::new(|| re(r"(?m)^[ \t]*#{3,4}[ \t]*(.+?)[ \t]*$"));
static ANSWER_LINE: LazyLock<Regex> = LazyLock::new(|| re(r"(?im)^.*hence my answer is.*$"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterJudgment {
    pub verdict: Verdict,
    pub error_lines: Vec<String>,
    pub contradicted_lines: Vec<String>,
    pub explanation: String,
    pub decision_raw: String,
}

pub fn parse_filter_judgment(response: &str) -> Result<FilterJudgment, ParseError> {
    let head = JUDGEMENT.find_iter(response).last().ok_or(ParseError::MissingJudgement)?;
    let section = &response[head.end()..];
    let heads: Vec<(String, usize, usize)> = SUBHEAD
        .captures_iter(section)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].to_lowercase(), m.start(), m.end())
        })
        .collect();
    let body = |pred: &dyn Fn(&str) -> bool| -> Option<&str> {
        let k = heads.iter().position(|h| pred(&h.0))?;
        let end = heads.get(k + 1).map(|h| h.1).unwrap_or(section.len());
        Some(&section[heads[k].2..end])
    };
    let error_lines = body(&|h| h.contains("introduce")).map(parse_line_items).unwrap_or_default();
    let contradicted_lines = body(&|h| h.contains("contradicted")).map(parse_line_items).unwrap_or_default();
    let explanation = body(&|h| h.contains("explanation")).map(na_or).unwrap_or_default();
    let decision_raw = body(&|h| h.contains("decision"))
        .map(|d| d.trim().to_string())
        .or_else(|| ANSWER_LINE.find(section).map(|m| m.as_str().trim().to_string()))
        .filter(|d| !d.is_empty())
        .ok_or(ParseError::MissingDecision)?;
    let verdict = decision_verdict(&decision_raw);
    if verdict == Verdict::ErrorFound && error_lines.is_empty() && contradicted_lines.is_empty() {
        return Err(ParseError::InconsistentNa);
    }
    Ok(FilterJudgment { verdict, error_lines, contradicted_lines, explanation, decision_raw })
}

pub fn serialize_filter_judgment(j: &FilterJudgment) -> String {
    format!(
        "## Detailed Analysis\n\n## Final Judgement\n\n### Lines that introduce the continuity error\n{}\n\n\
         ### Lines earlier in the story contradicted by the continuity error\n{}\n\n### Explanation\n{}\n\n### Decision\n{}\n",
        serialize_items(&j.error_lines),
        serialize_items(&j.contradicted_lines),
        if j.explanation.is_empty() { "NA" } else { j.explanation.as_str() },
        j.decision_raw
    )
}

// ----------------------------------------------------------------- tag grammar

/// Content of the last `<tag>` block. An unclosed final block runs to the end.
pub fn tag_block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.rfind(&open)? + open.len();
    let end = text[start..].find(&close).map(|e| start + e).unwrap_or(text.len());
    Some(&text[start..end])
}

/// A detector's structured answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub explanation: String,
    pub error_lines: Vec<String>,
    pub contradicted_lines: Vec<String>,
    pub decision_raw: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scratchpad: Option<String>,
}

impl DetectionResponse {
    pub fn no_error(explanation: impl Into<String>) -> Self {
        DetectionResponse {
            explanation: explanation.into(),
            error_lines: Vec::new(),
            contradicted_lines: Vec::new(),
            decision_raw: NO_ERROR_PHRASE.to_string(),
            verdict: Verdict::NoError,
            scratchpad: None,
        }
    }
}

pub fn parse_detection(response: &str) -> Result<DetectionResponse, ParseError> {
    let decision_raw = tag_block(response, "decision").ok_or(ParseError::MissingDecision)?.trim().to_string();
    if decision_raw.is_empty() {
        return Err(ParseError::MissingDecision);
    }
    let verdict = decision_verdict(&decision_raw);
    Ok(DetectionResponse {
        explanation: tag_block(response, "explanation").map(|e| e.trim().to_string()).unwrap_or_default(),
        error_lines: tag_block(response, "error_lines").map(parse_line_items).unwrap_or_default(),
        contradicted_lines: tag_block(response, "contradicted_lines").map(parse_line_items).unwrap_or_default(),
        decision_raw,
        verdict,
        scratchpad: tag_block(response, "scratchpad").map(|s| s.trim().to_string()),
    })
}

pub fn serialize_detection(d: &DetectionResponse) -> String {
    let mut out = String::from("<response>\n\n");
    if let Some(s) = &d.scratchpad {
        out.push_str(&format!("<scratchpad>\n{s}\n</scratchpad>\n\n"));
    }
    out.push_str(&format!(
        "<explanation>\n{}\n</explanation>\n\n<error_lines>\n{}\n</error_lines>\n\n\
         <contradicted_lines>\n{}\n</contradicted_lines>\n\n<decision>\n{}\n</decision>\n</response>\n",
        d.explanation,
        serialize_items(&d.error_lines),
        serialize_items(&d.contradicted_lines),
        d.decision_raw
    ));
    out
}

// ------------------------------------------------------------------ verifier

static INTEGER: LazyLock<Regex> = LazyLock::new(|| re(r"-?\d+"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierAnswer {
    pub answer: bool,
    pub confidence: Option<u8>,
    pub explanation: String,
}

/// Strict: an out-of-range confidence is an error.
pub fn parse_verifier(response: &str) -> Result<VerifierAnswer, ParseError> {
    parse_verifier_with(response, false)
}

/// With `clamp`, out-of-range confidences are clamped into 0..=100.
pub fn parse_verifier_with(response: &str, clamp: bool) -> Result<VerifierAnswer, ParseError> {
    let raw = tag_block(response, "answer").ok_or(ParseError::MissingAnswer)?;
    let word = raw.trim().trim_matches(|c: char| matches!(c, '*' | '.' | '"' | '\'' | '!')).trim().to_lowercase();
    let answer = match word.as_str() {
        "yes" => true,
        "no" => false,
        _ => return Err(ParseError::InvalidAnswer(raw.trim().to_string())),
    };
    let confidence = match tag_block(response, "confidence").and_then(|c| INTEGER.find(c)) {
        None => None,
        Some(m) => {
            let v: i64 = m.as_str().parse().unwrap_or(i64::MAX);
            if (0..=100).contains(&v) {
                Some(v as u8)
            } else if clamp {
                Some(v.clamp(0, 100) as u8)
            } else {
                return Err(ParseError::ConfidenceOutOfRange(v));
            }
        }
    };
    let explanation = tag_block(response, "explanation").map(|e| e.trim().to_string()).unwrap_or_default();
    Ok(VerifierAnswer { answer, confidence, explanation })
}

pub fn serialize_verifier(v: &VerifierAnswer) -> String {
    let mut out = format!("<response>\n<answer>\n{}\n</answer>\n", if v.answer { "Yes" } else { "No" });
    if let Some(c) = v.confidence {
        out.push_str(&format!("<confidence>\n{c}\n</confidence>\n"));
    }
    out.push_str(&format!("<explanation>\n{}\n</explanation>\n</response>\n", v.explanation));
    out
}

// ---------------------------------------------------------------- generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationKind {
    Summary,
    Retelling,
    Resolved,
}

impl GenerationKind {
    pub fn tag(self) -> &'static str {
        match self {
            GenerationKind::Summary => "summary",
            GenerationKind::Retelling => "modern_retelling",
            GenerationKind::Resolved => "resolved_story",
        }
    }
}

/// Trimmed block text. The opening tag may be missing when the prompt
/// itself ended with it, provided the closing tag is present.
pub fn parse_generation(response: &str, kind: GenerationKind) -> Result<String, ParseError> {
    let tag = kind.tag();
    let body = match tag_block(response, tag) {
        Some(b) => b,
        None => {
            let close = format!("</{tag}>");
            let end = response.find(&close).ok_or(ParseError::MissingBlock(tag))?;
            &response[..end]
        }
    };
    let body = body.trim();
    if body.is_empty() {
        return Err(ParseError::EmptyBlock(tag));
    }
    Ok(body.to_string())
}

pub fn serialize_generation(text: &str, kind: GenerationKind) -> String {
    format!("<{t}>\n{text}\n</{t}>\n", t = kind.tag())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StorySource;

    fn story(text: &str) -> Story {
        Story::new("s", "", text, StorySource::Other).unwrap()
    }

    #[test]
    fn three_act_offsets() {
        let s = story("AAA. BBB. CCC.");
        let r = "### Act 1: The Setup\n**First Line:** AAA.\n\n### Act 2: Confrontation\n**First Line:** BBB.\n\n### Act 3: Resolution\n**First Line:** CCC.\n";
        let split = parse_three_act(r, &s).unwrap();
        assert_eq!([split.act1.text.as_str(), &split.act2.text, &split.act3.text], ["AAA. ", "BBB. ", "CCC."]);
        assert_eq!(parse_three_act(&serialize_three_act(&split), &s).unwrap(), split);
    }

    #[test]
    fn three_act_errors() {
        let s = story("AAA. BBB. CCC.");
        let missing = "**First Line:** AAA.\n**First Line:** BBB.\n";
        assert!(matches!(parse_three_act(missing, &s), Err(ParseError::MissingSection { found: 2, .. })));
        let absent = "**First Line:** AAA.\n**First Line:** XYZ.\n**First Line:** CCC.";
        assert!(matches!(parse_three_act(absent, &s), Err(ParseError::LineNotFound { act: 2, .. })));
        let swapped = "**First Line:** AAA.\n**First Line:** CCC.\n**First Line:** BBB.";
        assert!(matches!(parse_three_act(swapped, &s), Err(ParseError::OrderViolation { act: 3 })));
        let late = "**First Line:** BBB.\n**First Line:** CCC.\n**First Line:** AAA.";
        assert!(matches!(parse_three_act(late, &s), Err(ParseError::OrderViolation { act: 1 })));
    }

    #[test]
    fn three_act_tolerates_reflowed_whitespace() {
        let s = story("One day\nthe king rode out. He met a fox. The fox spoke.");
        let r = "**First Line:** One day the king rode out.\n**First Line:** He met a fox.\n**First Line:** \"The fox spoke.\"";
        let split = parse_three_act(r, &s).unwrap();
        assert_eq!(split.act3.text, "The fox spoke.");
    }

    #[test]
    fn propositions_by_section() {
        let r =
            "Characters:\n- Fact: the princess hated the farmer; Counterfactual: the princess was fond of the farmer\n";
        let p = parse_propositions(r).unwrap();
        assert_eq!(p.propositions.len(), 1);
        assert_eq!(p.propositions[0].category, PropositionCategory::Character);
        assert_eq!(p.propositions[0].statement, "the princess hated the farmer");

        let r = "Characters:\n- Fact: a; Counterfactual: b\n- Fact: c\nSetting:\n-Fact:   d; Counterfactual: e\n";
        let p = parse_propositions(r).unwrap();
        assert_eq!(p.malformed, 1);
        assert_eq!(p.propositions.len(), 2);
        assert_eq!(p.propositions[1].category, PropositionCategory::Setting);

        assert!(matches!(
            parse_propositions("Characters:\n- Fact: x\n"),
            Err(ParseError::MalformedBullets { count: 1 })
        ));
        assert!(matches!(parse_propositions("nothing here"), Err(ParseError::NoPropositions)));
    }

    #[test]
    fn scores_align_by_index() {
        let props: Vec<Proposition> = (0..3)
            .map(|i| Proposition::new(format!("f{i}"), format!("c{i}"), PropositionCategory::Setting).unwrap())
            .collect();
        let r = "## F1\n### Statement: other text\n### Reasoning: minor\n### Importance Score: 2\n----\n## F2\n### Reasoning: huge\n### Importance Score: **4**\n----\n## F3\n### Reasoning: none\n### Importance Score: [[1]]\n";
        let scored = parse_scores(r, &props).unwrap();
        assert_eq!(scored.iter().map(|p| p.score.unwrap()).collect::<Vec<_>>(), [2, 4, 1]);
        assert_eq!(scored[0].statement, "f0");
        assert_eq!(scored[1].score_rationale, "huge");
        assert_eq!(parse_scores(&serialize_scores(&scored), &props).unwrap(), scored);

        let bad = r.replace("Score: 2", "Score: 5");
        assert!(matches!(parse_scores(&bad, &props), Err(ParseError::ScoreOutOfRange { block: 1, score: 5 })));
        assert!(matches!(parse_scores(r, &props[..2]), Err(ParseError::CountMismatch { expected: 2, found: 3 })));
    }

    const CF: &str = "-------\n## Brainstorming\nThe tea is cold now.\n\n## Counterfactual Story\n### Act 1:\nShe made tea.\n\n\n### Act 2:\nHe sat. <m>He drank the cold tea.</m>\n\n\n### Act 3:\n<m>It was bitter.</m> The end.\n-------";

    #[test]
    fn counterfactual_marks() {
        let cf = parse_counterfactual(CF).unwrap();
        assert_eq!(cf.act2, "He sat. He drank the cold tea.");
        assert_eq!(cf.marked_lines[0], MarkedLine { act: 2, text: "He drank the cold tea.".into() });
        assert_eq!(cf.change_count(), 2);
        assert_eq!(cf.act3, "It was bitter. The end.");
        assert_eq!(cf.brainstorm, "The tea is cold now.");
        assert_eq!(parse_counterfactual(&serialize_counterfactual(&cf)).unwrap(), cf);
    }

    #[test]
    fn counterfactual_errors() {
        assert!(matches!(
            parse_counterfactual(&CF.replace("</m> The end", " The end")),
            Err(ParseError::UnbalancedTag(3))
        ));
        assert!(matches!(parse_counterfactual(&CF.replace("### Act 2:", "Act two")), Err(ParseError::MissingAct(2))));
        assert!(matches!(parse_counterfactual(&CF.replace("She made tea.", "")), Err(ParseError::EmptyAct(1))));
        assert!(matches!(parse_counterfactual("## Brainstorming\nx"), Err(ParseError::MissingSection { .. })));
    }

    #[test]
    fn filter_judgment() {
        let none = "## Final Judgement\n\n### Lines that introduce the continuity error\nNA\n\n### Lines earlier in the story contradicted by the continuity error\nNA\n\n### Explanation\nNA\n\n### Decision\nHence my answer is \"No continuity error found\"";
        let j = parse_filter_judgment(none).unwrap();
        assert_eq!(j.verdict, Verdict::NoError);
        assert!(j.error_lines.is_empty() && j.explanation.is_empty());

        let err = "## Detailed Analysis\nhmm\n## Final Judgement\n### Lines that introduce the continuity error\n- \"The trolls feared the bear.\"\n### Lines earlier in the story contradicted by the continuity error \n- The trolls loved bears.\n*Note that you must provide the whole sentences*\n### Explanation\nThey changed.\n### Decision\nHence my answer is \"There is a continuity error in the story concerning the Trolls\"";
        let j = parse_filter_judgment(err).unwrap();
        assert_eq!(j.verdict, Verdict::ErrorFound);
        assert_eq!(j.error_lines, ["The trolls feared the bear."]);
        assert_eq!(j.contradicted_lines, ["The trolls loved bears."]);
        assert_eq!(parse_filter_judgment(&serialize_filter_judgment(&j)).unwrap(), j);

        let inconsistent = none.replace("\"No continuity error found\"", "there is an error");
        assert!(matches!(parse_filter_judgment(&inconsistent), Err(ParseError::InconsistentNa)));
        assert!(matches!(parse_filter_judgment("### Decision\nx"), Err(ParseError::MissingJudgement)));
        assert!(matches!(parse_filter_judgment("## Final Judgement\nnothing"), Err(ParseError::MissingDecision)));
    }

    #[test]
    fn detection_blocks() {
        let d = parse_detection("<decision>No continuity error found</decision>").unwrap();
        assert_eq!(d.verdict, Verdict::NoError);
        let r = "<response><scratchpad>think</scratchpad><explanation>Hair.</explanation>\n<error_lines>\n\"She had dark hair.\"\n\"Her hair was black.\"\n</error_lines>\n<contradicted_lines>\n[If applicable, quote the lines]\n</contradicted_lines>\n<decision>There is a continuity error.</decision></response>";
        let d = parse_detection(r).unwrap();
        assert_eq!(d.verdict, Verdict::ErrorFound);
        assert_eq!(d.error_lines, ["She had dark hair.", "Her hair was black."]);
        assert!(d.contradicted_lines.is_empty());
        assert_eq!(d.scratchpad.as_deref(), Some("think"));
        assert_eq!(parse_detection(&serialize_detection(&d)).unwrap(), d);
        assert!(matches!(parse_detection("<explanation>x</explanation>"), Err(ParseError::MissingDecision)));
    }

    #[test]
    fn quoted_pairs_on_one_line() {
        let items = parse_line_items("- \"She left.\" \"He stayed.\"\n- 'The well was dry.'\n- N/A");
        assert_eq!(items, ["She left.", "He stayed.", "The well was dry."]);
        let kept = parse_line_items("\"Go!\" she said. \"Now!\"");
        assert_eq!(kept, ["\"Go!\" she said. \"Now!\""]);
    }

    #[test]
    fn names_starting_with_na_are_not_placeholders() {
        let items =
            parse_line_items("- Na Li closed the gate.\n- NA\n- N/A (nothing contradicts it)\n- NA - none\n- na.");
        assert_eq!(items, ["Na Li closed the gate."]);
    }

    #[test]
    fn verifier_answers() {
        let v = parse_verifier("<answer>Yes</answer><confidence>90</confidence>").unwrap();
        assert_eq!((v.answer, v.confidence), (true, Some(90)));
        let v = parse_verifier("<answer>no</answer>").unwrap();
        assert_eq!((v.answer, v.confidence), (false, None));
        assert!(matches!(parse_verifier("<answer>Maybe</answer>"), Err(ParseError::InvalidAnswer(a)) if a == "Maybe"));
        assert!(matches!(parse_verifier("nothing"), Err(ParseError::MissingAnswer)));
        let over = "<answer>Yes</answer><confidence>140</confidence>";
        assert!(matches!(parse_verifier(over), Err(ParseError::ConfidenceOutOfRange(140))));
        assert_eq!(parse_verifier_with(over, true).unwrap().confidence, Some(100));
    }

    #[test]
    fn generation_blocks() {
        assert_eq!(parse_generation("x <summary>\n Short. \n</summary>", GenerationKind::Summary).unwrap(), "Short.");
        assert_eq!(parse_generation("Today...\n</modern_retelling>", GenerationKind::Retelling).unwrap(), "Today...");
        assert!(matches!(parse_generation("plain", GenerationKind::Summary), Err(ParseError::MissingBlock("summary"))));
        assert!(matches!(
            parse_generation("<summary> </summary>", GenerationKind::Summary),
            Err(ParseError::EmptyBlock(_))
        ));
    }
}
