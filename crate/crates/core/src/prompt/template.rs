use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::TemplateError;

/// Pipeline, detection and generation stages that have a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ThreeAct,
    PropExtract,
    PropScore,
    Counterfact,
    Filter,
    DetectVanilla,
    DetectCot,
    DetectFewshot,
    Verifier,
    Summarize,
    AdaptModern,
    ResolveNegative,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::ThreeAct,
        Stage::PropExtract,
        Stage::PropScore,
        Stage::Counterfact,
        Stage::Filter,
        Stage::DetectVanilla,
        Stage::DetectCot,
        Stage::DetectFewshot,
        Stage::Verifier,
        Stage::Summarize,
        Stage::AdaptModern,
        Stage::ResolveNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::ThreeAct => "three_act",
            Stage::PropExtract => "prop_extract",
            Stage::PropScore => "prop_score",
            Stage::Counterfact => "counterfact",
            Stage::Filter => "filter",
            Stage::DetectVanilla => "detect_vanilla",
            Stage::DetectCot => "detect_cot",
            Stage::DetectFewshot => "detect_fewshot",
            Stage::Verifier => "verifier",
            Stage::Summarize => "summarize",
            Stage::AdaptModern => "adapt_modern",
            Stage::ResolveNegative => "resolve_negative",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.name())
    }

    /// Placeholder names the template must be given, in first-use order.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            Stage::ThreeAct => &["story_text"],
            Stage::PropExtract => &["act1"],
            Stage::PropScore => &["act1", "act2", "act3", "list_of_fact_counterfactual_pairs"],
            Stage::Counterfact => &["act1", "act2", "act3", "fact", "counterfactual"],
            Stage::Filter => &["patched_story"],
            Stage::DetectVanilla | Stage::DetectCot => &["story"],
            Stage::DetectFewshot => &["examples", "story"],
            Stage::Verifier | Stage::ResolveNegative => {
                &["story", "cont_error_expl", "cont_error_lines", "contradicted_lines"]
            }
            Stage::Summarize => &["story", "num_words"],
            Stage::AdaptModern => &["ORIGINAL_FAIRYTALE"],
        }
    }

    /// Whether placeholders are written `{{NAME}}` instead of `{name}`.
    ///
    /// The adaptation prompt was published with a double-braced slot; every
    /// other `{{` in the template set is an escaped literal brace.
    fn double_braced(self) -> bool {
        self == Stage::AdaptModern
    }

    fn bundled_source(self) -> &'static str {
        match self {
            Stage::ThreeAct => include_str!("../../templates/three_act.txt"),
            Stage::PropExtract => include_str!("../../templates/prop_extract.txt"),
            Stage::PropScore => include_str!("../../templates/prop_score.txt"),
            Stage::Counterfact => include_str!("../../templates/counterfact.txt"),
            Stage::Filter => include_str!("../../templates/filter.txt"),
            Stage::DetectVanilla => include_str!("../../templates/detect_vanilla.txt"),
            Stage::DetectCot => include_str!("../../templates/detect_cot.txt"),
            Stage::DetectFewshot => include_str!("../../templates/detect_fewshot.txt"),
            Stage::Verifier => include_str!("../../templates/verifier.txt"),
            Stage::Summarize => include_str!("../../templates/summarize.txt"),
            Stage::AdaptModern => include_str!("../../templates/adapt_modern.txt"),
            Stage::ResolveNegative => include_str!("../../templates/resolve_negative.txt"),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Lines beginning with `%%` are file comments and never reach the model.
fn strip_comments(source: &str) -> String {
    source.split_inclusive('\n').filter(|l| !l.starts_with("%%")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A stage prompt with named placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub body: String,
    digest: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

impl PromptTemplate {
    /// Build from file contents. The digest covers the raw source.
    pub fn from_source(stage: Stage, source: &str) -> Result<Self, TemplateError> {
        let t = PromptTemplate { stage, body: strip_comments(source), digest: sha256_hex(source.as_bytes()) };
        // Tokenizing validates the brace syntax once, at load time.
        let slots: Vec<String> = t
            .pieces()?
            .into_iter()
            .filter_map(|p| if let Piece::Slot(s) = p { Some(s.to_string()) } else { None })
            .collect();
        for name in stage.placeholders() {
            if !slots.iter().any(|s| s == name) {
                return Err(TemplateError::Load(stage.file_name(), format!("placeholder {name} never appears")));
            }
        }
        Ok(t)
    }

    pub fn bundled(stage: Stage) -> Self {
        Self::from_source(stage, stage.bundled_source()).expect("bundled templates are well-formed")
    }

    pub fn load(dir: &Path, stage: Stage) -> Result<Self, TemplateError> {
        let path = dir.join(stage.file_name());
        let source = std::fs::read_to_string(&path)
            .map_err(|e| TemplateError::Load(path.display().to_string(), e.to_string()))?;
        Self::from_source(stage, &source)
    }

    /// sha256 of the template file.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn pieces(&self) -> Result<Vec<Piece<'_>>, TemplateError> {
        let body = self.body.as_str();
        let bytes = body.as_bytes();
        let mut out = Vec::new();
        let mut lit = 0;
        let mut i = 0;
        let residual = |name: &str| TemplateError::Residual { stage: self.stage.to_string(), name: name.to_string() };
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    if self.stage.double_braced() {
                        if let Some(name) = self
                            .stage
                            .placeholders()
                            .iter()
                            .find(|n| body[i + 2..].starts_with(*n) && body[i + 2 + n.len()..].starts_with("}}"))
                        {
                            out.push(Piece::Literal(&body[lit..i]));
                            out.push(Piece::Slot(name));
                            i += name.len() + 4;
                            lit = i;
                            continue;
                        }
                    }
                    out.push(Piece::Literal(&body[lit..i + 1]));
                    i += 2;
                    lit = i;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    out.push(Piece::Literal(&body[lit..i + 1]));
                    i += 2;
                    lit = i;
                }
                b'{' => {
                    let close = body[i..].find('}').map(|c| i + c).ok_or_else(|| residual("{"))?;
                    let name = &body[i + 1..close];
                    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                        return Err(residual(&body[i..=close]));
                    }
                    if self.stage.double_braced() || !self.stage.placeholders().contains(&name) {
                        return Err(residual(name));
                    }
                    out.push(Piece::Literal(&body[lit..i]));
                    out.push(Piece::Slot(name));
                    i = close + 1;
                    lit = i;
                }
                b'}' => return Err(residual("}")),
                _ => i += 1,
            }
        }
        out.push(Piece::Literal(&body[lit..]));
        Ok(out)
    }

    /// Fill every placeholder. Values are inserted verbatim.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let stage = self.stage.to_string();
        for (name, _) in values {
            if !self.stage.placeholders().contains(name) {
                return Err(TemplateError::Unknown { stage, name: name.to_string() });
            }
        }
        let mut out = String::with_capacity(self.body.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
        for piece in self.pieces()? {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::Unfilled { stage: stage.clone(), name: name.to_string() })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

impl PromptTemplate {
    /// Whether `prompt` could be a rendering of this template: its literal
    /// text appears in order, anchored at both ends.
    pub fn matches(&self, prompt: &str) -> bool {
        let Ok(pieces) = self.pieces() else { return false };
        let mut segments = vec![String::new()];
        for p in pieces {
            match p {
                Piece::Literal(l) => segments.last_mut().unwrap().push_str(l),
                Piece::Slot(_) => segments.push(String::new()),
            }
        }
        let last = segments.len() - 1;
        if !prompt.starts_with(&segments[0]) {
            return false;
        }
        if last == 0 {
            return prompt == segments[0];
        }
        let mut at = segments[0].len();
        for seg in &segments[1..last] {
            match prompt[at..].find(seg.as_str()) {
                Some(i) => at += i + seg.len(),
                None => return false,
            }
        }
        prompt.len() >= at + segments[last].len() && prompt.ends_with(&segments[last])
    }
}

/// One template per stage; the directory is the unit of versioning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<Stage, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

impl TemplateSet {
    pub fn bundled() -> Self {
        TemplateSet { templates: Stage::ALL.into_iter().map(|s| (s, PromptTemplate::bundled(s))).collect() }
    }

    /// Load every stage from `dir`; all twelve files must be present.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        for s in Stage::ALL {
            templates.insert(s, PromptTemplate::load(dir, s)?);
        }
        Ok(TemplateSet { templates })
    }

    pub fn get(&self, stage: Stage) -> &PromptTemplate {
        &self.templates[&stage]
    }

    /// The stage whose template rendered `prompt`, if exactly one fits.
    pub fn identify(&self, prompt: &str) -> Option<Stage> {
        let mut fits = self.templates.values().filter(|t| t.matches(prompt));
        let first = fits.next()?;
        fits.next().is_none().then_some(first.stage)
    }

    pub fn render(&self, stage: Stage, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.get(stage).render(values)
    }

    /// Stage name to file digest, for provenance records.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(s, t)| (s.name().to_string(), t.digest().to_string())).collect()
    }

    /// `sha256sum`-style manifest of the set.
    pub fn manifest(&self) -> String {
        self.templates.iter().map(|(s, t)| format!("{}  {}\n", t.digest(), s.file_name())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escaped_braces_render_as_single() {
        let t = PromptTemplate::bundled(Stage::Verifier);
        let out = t
            .render(&[("story", "S"), ("cont_error_expl", "E"), ("cont_error_lines", "L"), ("contradicted_lines", "C")])
            .unwrap();
        assert!(out.contains("{your answer in Yes or No}"));
        assert!(!out.contains("{{"));
        assert!(out.contains("\nS\n<h2> Continuity Error Explanation</h2>"));
    }

    #[test]
    fn double_braced_slot_is_filled() {
        let t = PromptTemplate::bundled(Stage::AdaptModern);
        let out = t.render(&[("ORIGINAL_FAIRYTALE", "Once upon a time.")]).unwrap();
        assert!(out.contains("<original_fairytale>\nOnce upon a time.\n</original_fairytale>"));
    }

    #[test]
    fn unfilled_and_unknown_are_errors() {
        let t = PromptTemplate::bundled(Stage::Summarize);
        assert!(
            matches!(t.render(&[("story", "x")]), Err(TemplateError::Unfilled { name, .. }) if name == "num_words")
        );
        assert!(matches!(
            t.render(&[("story", "x"), ("num_words", "5"), ("extra", "y")]),
            Err(TemplateError::Unknown { name, .. }) if name == "extra"
        ));
    }

    #[test]
    fn undeclared_slot_in_source_is_rejected() {
        let err = PromptTemplate::from_source(Stage::Filter, "{patched_story} {oops}").unwrap_err();
        assert!(matches!(err, TemplateError::Residual { name, .. } if name == "oops"));
        let err = PromptTemplate::from_source(Stage::Filter, "no slot here").unwrap_err();
        assert!(matches!(err, TemplateError::Load(..)));
    }

    #[test]
    fn comment_header_is_stripped_but_digested() {
        let t = PromptTemplate::bundled(Stage::ResolveNegative);
        assert!(!t.body.contains("%%"));
        assert!(t.body.starts_with("You are tasked with editing"));
        assert_eq!(t.digest(), sha256_hex(Stage::ResolveNegative.bundled_source().as_bytes()));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_name(s.name()), Some(s));
        }
    }

    #[test]
    fn every_rendering_identifies_its_stage() {
        let set = TemplateSet::bundled();
        for stage in Stage::ALL {
            let values: Vec<(&str, &str)> = stage.placeholders().iter().map(|n| (*n, "some value")).collect();
            let prompt = set.render(stage, &values).unwrap();
            assert_eq!(set.identify(&prompt), Some(stage));
        }
        assert_eq!(set.identify("hello"), None);
    }
}
