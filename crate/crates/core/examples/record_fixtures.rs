//! Regenerate the committed replay stores and golden outputs from the
//! authored responses under `tests/fixtures`.
//!
//! ```text
//! cargo run -p flawfic-core --example record_fixtures
//! ```
//!
//! Every model call goes through a scripted provider wrapped by a recording
//! gateway, so the stores hold exactly the requests the library makes.

use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flawfic_core::dataset::{build_dataset, export_jsonl, BuildOptions};
use flawfic_core::error::GatewayError;
use flawfic_core::eval::{bundled_exemplars, run_eval, write_report_csv, Detector, DetectorConfig, Method};
use flawfic_core::gateway::{Capabilities, ChatRequest, FixtureStore, Gateway, ScriptedProvider};
use flawfic_core::model::{load_stories, CandidateStatus, Example, Label, NegativeStrategy, Story, Verdict};
use flawfic_core::pipeline::{write_run_dir, Pipeline, PipelineConfig};
use flawfic_core::prompt::{
    serialize_detection, serialize_generation, DetectionResponse, GenerationKind, Stage, TemplateSet,
};
use flawfic_core::study::{run_study, write_study, StudyConfig};
use flawfic_core::text::segment_sentences;

#[derive(Deserialize)]
struct StoryScript {
    three_act: Vec<String>,
    prop_extract: String,
    prop_score: String,
    #[serde(default)]
    counterfact: Vec<Counterfact>,
    #[serde(default)]
    filter: Vec<Filter>,
}

#[derive(Deserialize)]
struct Counterfact {
    fact: String,
    response: String,
}

#[derive(Deserialize)]
struct Filter {
    marker: String,
    responses: Vec<String>,
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn prompt_of(req: &ChatRequest) -> &str {
    &req.messages.last().expect("one message").content
}

fn scripted(msg: impl Into<String>) -> GatewayError {
    GatewayError::Scripted(msg.into())
}

fn fresh_store(dir: &Path) -> FixtureStore {
    if dir.exists() {
        std::fs::remove_dir_all(dir).unwrap();
    }
    FixtureStore::create(dir).unwrap()
}

fn opening(text: &str) -> String {
    text.trim_start().chars().take(48).collect()
}

/// Error response quoting two sentences of the text, or a no-error response.
fn detection_for(text: &str, flagged: bool, reason: &str) -> String {
    let sentences = segment_sentences(text).expect("non-empty text");
    let response = if flagged && sentences.len() >= 2 {
        let last = sentences.len() - 1;
        DetectionResponse {
            explanation: reason.to_string(),
            error_lines: vec![sentences[last].text.clone()],
            contradicted_lines: vec![sentences[0].text.clone()],
            decision_raw: format!("There is a continuity error in the story concerning {reason}"),
            verdict: Verdict::ErrorFound,
            scratchpad: None,
        }
    } else {
        DetectionResponse::no_error(
            "The events of the story follow from one another and no established fact is contradicted.",
        )
    };
    serialize_detection(&response)
}

fn record_pipeline(templates: &Arc<TemplateSet>) {
    let root = fixtures().join("pipeline");
    let stories = load_stories(&root.join("stories.jsonl")).unwrap();
    let mut scripts: Vec<(Story, StoryScript)> = Vec::new();
    for s in &stories {
        let raw = std::fs::read_to_string(root.join("script").join(format!("{}.toml", s.id))).unwrap();
        scripts.push((s.clone(), toml::from_str(&raw).unwrap()));
    }
    let scripts = Arc::new(scripts);
    let set = templates.clone();
    let provider = ScriptedProvider::new("scripted", Capabilities::ALL, move |req| {
        let prompt = prompt_of(req);
        let stage = set.identify(prompt).ok_or_else(|| scripted("unrecognized prompt"))?;
        let (_, script) = scripts
            .iter()
            .find(|(s, _)| prompt.contains(&opening(&s.text)))
            .ok_or_else(|| scripted(format!("no story for {stage} prompt")))?;
        let one = |s: &String| Ok(vec![s.trim_start().to_string()]);
        match stage {
            Stage::ThreeAct => script
                .three_act
                .get(req.draw as usize)
                .map(|s| vec![s.trim_start().to_string()])
                .ok_or_else(|| scripted("no three-act response for this draw")),
            Stage::PropExtract => one(&script.prop_extract),
            Stage::PropScore => one(&script.prop_score),
            Stage::Counterfact => script
                .counterfact
                .iter()
                .find(|c| prompt.contains(&format!("\"{}\"", c.fact)))
                .map(|c| vec![c.response.trim_start().to_string()])
                .ok_or_else(|| scripted("no counterfactual for this fact")),
            Stage::Filter => script
                .filter
                .iter()
                .find(|f| prompt.contains(&f.marker))
                .map(|f| f.responses.iter().map(|r| r.trim_start().to_string()).collect())
                .ok_or_else(|| scripted("no filter samples for this candidate")),
            other => Err(scripted(format!("stage {other} is not scripted here"))),
        }
    });

    let store = fresh_store(&root.join("store"));
    let gateway = Gateway::new(Arc::new(provider)).with_recorder(store);
    let config = PipelineConfig::default();
    let pipeline = Pipeline::new(&gateway, templates, &config).unwrap();
    let outcomes = pipeline.run_batch(&stories);
    let expected = root.join("expected");
    std::fs::create_dir_all(&expected).unwrap();
    write_run_dir(&expected.join("run"), &outcomes, &config, templates).unwrap();

    let accepted: Vec<_> = outcomes
        .iter()
        .flat_map(|o| o.candidates.clone())
        .filter(|c| c.status == CandidateStatus::PendingAnnotation)
        .collect();
    let options = BuildOptions {
        name: "flawfic".into(),
        strategy: NegativeStrategy::Original,
        seed: 0,
        created: 0,
        resolver: None,
    };
    let built = build_dataset(&accepted, &stories, options).unwrap();
    export_jsonl(&built.manifest, &expected.join("dataset.jsonl")).unwrap();

    // A vanilla detector that finds every injected error but one and raises
    // one false alarm.
    let examples: Vec<Example> = built.manifest.examples.clone();
    let missed = examples.iter().find(|e| e.label == Label::Positive).unwrap().example_id.clone();
    let false_alarm = examples.iter().find(|e| e.label == Label::Negative).unwrap().example_id.clone();
    let detect = ScriptedProvider::new("scripted", Capabilities::ALL, move |req| {
        let prompt = prompt_of(req);
        let e = examples
            .iter()
            .filter(|e| prompt.contains(e.text.trim()))
            .max_by_key(|e| e.text.len())
            .ok_or_else(|| scripted("no example for prompt"))?;
        let text = match (&e.gold, e.example_id == missed, e.example_id == false_alarm) {
            (Some(gold), false, _) => serialize_detection(&DetectionResponse {
                explanation: gold.explanation.clone(),
                error_lines: gold.error_lines.clone(),
                contradicted_lines: gold.contradicted_lines.clone(),
                decision_raw: "There is a continuity error in the story.".into(),
                verdict: Verdict::ErrorFound,
                scratchpad: None,
            }),
            (_, _, true) => detection_for(&e.text, true, "a detail that seems to change between scenes"),
            _ => detection_for(&e.text, false, ""),
        };
        Ok(vec![text])
    });
    let gateway = Gateway::new(Arc::new(detect)).with_recorder(FixtureStore::new(root.join("store")));
    let detector_config = DetectorConfig::load(&root.join("detector.toml")).unwrap();
    let exemplars = bundled_exemplars();
    let detector = Detector::new(&detector_config, &gateway, templates, &exemplars).unwrap();
    let records = expected.join("records.jsonl");
    let _ = std::fs::remove_file(&records);
    let report = run_eval(&built.manifest, &Method::Detector(detector), Some(&records)).unwrap();
    assert!(report.failures.is_empty());
    write_report_csv(&expected.join("report.csv"), std::slice::from_ref(&report.row)).unwrap();
    println!(
        "pipeline: {} candidates accepted, dataset of {}, accuracy {}",
        accepted.len(),
        built.manifest.examples.len(),
        report.row.accuracy
    );
}

const NAMES: [&str; 10] = ["Anja", "Bram", "Cora", "Dov", "Edda", "Finn", "Greta", "Hugo", "Ilse", "Jonas"];
const TRADES: [&str; 10] =
    ["weaver", "potter", "shepherd", "miller", "smith", "cobbler", "fisher", "carpenter", "beekeeper", "tailor"];
const PLACES: [&str; 10] = [
    "a village by the marsh",
    "a town under the mountain",
    "a hamlet near the forest",
    "a port on the cold sea",
    "a farm beside the river",
    "a city of narrow bridges",
    "a valley of windmills",
    "an island of goats",
    "a market town on the plain",
    "a cottage at the edge of the moor",
];
const TREASURES: [&str; 10] = [
    "silver thimble",
    "blue lantern",
    "wooden flute",
    "copper kettle",
    "old map",
    "iron key",
    "red cloak",
    "glass bead",
    "bone comb",
    "brass bell",
];

/// Deterministic fable number `i`.
fn study_story(i: usize) -> (String, String) {
    let name = NAMES[i % 10];
    let trade = TRADES[(i / 10) % 10];
    let place = PLACES[(i * 7) % 10];
    let treasure = TREASURES[(i * 3) % 10];
    let helper = NAMES[(i + 3) % 10];
    let text = format!(
        "{name} the {trade} lived in {place}. Every morning {name} worked until noon and then walked to the well to fetch water. \
         {name} owned nothing of value except a {treasure} that had belonged to a grandmother.\n\n\
         One day a stranger came asking for the {treasure}, and offered a purse of gold in exchange. \
         {name} refused, because the {treasure} was the last thing left of the family. \
         That night the {treasure} disappeared from its shelf, and {name} searched every corner of the house.\n\n\
         At dawn {helper}, a neighbour, knocked on the door with the {treasure} in hand, having found it dropped on the road by the fleeing stranger. \
         {name} thanked {helper} and invited the whole street to supper. \
         From then on {name} kept the {treasure} on a ribbon and never let it out of sight.\n"
    );
    (format!("fable-{i:03}"), text)
}

fn study_summary(text: &str) -> String {
    let sentences = segment_sentences(text).unwrap();
    let keep: Vec<&str> = [0, 3, 5, 6, 8].iter().filter_map(|k| sentences.get(*k)).map(|s| s.text.as_str()).collect();
    keep.join(" ")
}

/// 31 of 100 originals and 45 of 100 summaries are flagged.
fn original_flagged(i: usize) -> bool {
    (i * 37) % 100 < 31
}

fn summary_flagged(i: usize) -> bool {
    (i * 53 + 11) % 100 < 45
}

fn record_study(templates: &Arc<TemplateSet>) {
    let root = fixtures().join("study");
    let mut lines = String::new();
    let mut stories = Vec::new();
    for i in 0..100 {
        let (id, text) = study_story(i);
        lines.push_str(&serde_json::json!({ "id": id, "title": "", "text": text, "source": "generated" }).to_string());
        lines.push('\n');
        stories.push((i, text));
    }
    std::fs::create_dir_all(&root).unwrap();
    std::fs::write(root.join("stories.jsonl"), lines).unwrap();
    let loaded = load_stories(&root.join("stories.jsonl")).unwrap();

    let set = templates.clone();
    let provider = ScriptedProvider::new("scripted", Capabilities::ALL, move |req| {
        let prompt = prompt_of(req);
        match set.identify(prompt) {
            Some(Stage::Summarize) => {
                let (_, text) =
                    stories.iter().find(|(_, t)| prompt.contains(t.trim())).ok_or_else(|| scripted("unknown story"))?;
                Ok(vec![serialize_generation(&study_summary(text), GenerationKind::Summary)])
            }
            Some(Stage::DetectCot) => {
                if let Some((i, text)) = stories.iter().find(|(_, t)| prompt.contains(t.trim())) {
                    return Ok(vec![detection_for(text, original_flagged(*i), "the treasure's owner")]);
                }
                let (i, text) = stories
                    .iter()
                    .find(|(_, t)| prompt.contains(&study_summary(t)))
                    .ok_or_else(|| scripted("unknown summary"))?;
                Ok(vec![detection_for(&study_summary(text), summary_flagged(*i), "the missing treasure")])
            }
            other => Err(scripted(format!("unexpected stage {other:?}"))),
        }
    });
    let gateway = Gateway::new(Arc::new(provider)).with_recorder(fresh_store(&root.join("store")));
    #[derive(Deserialize)]
    struct Generator {
        model_name: String,
        word_budget: Option<usize>,
    }
    let generator: Generator = toml::from_str(&std::fs::read_to_string(root.join("generator.toml")).unwrap()).unwrap();
    let config = StudyConfig {
        task: flawfic_core::study::GenerationTask::Summarize,
        generator_model: generator.model_name,
        word_budget: generator.word_budget,
        detector: DetectorConfig::load(&root.join("detector.toml")).unwrap(),
    };
    let report = run_study(&loaded, &config, &gateway, templates, &bundled_exemplars()).unwrap();
    write_study(&root.join("expected"), &report).unwrap();
    println!("study: {:?}", report.rates);
}

fn main() {
    let templates = Arc::new(TemplateSet::bundled());
    record_pipeline(&templates);
    record_study(&templates);
}
