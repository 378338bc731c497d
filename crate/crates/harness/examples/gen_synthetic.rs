//! Regenerates the bundled synthetic fixture set.
//!
//! Writes a 10-patient corpus and its ground truth, records mock
//! synthesizer fixtures by running the real pipeline against a rule-based
//! oracle that reads the rendered prompts, then replays those fixtures
//! through the mock client to produce the golden outputs.
//!
//!     cargo run -p oncex --example gen_synthetic -- fixtures/synthetic

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::{json, Value};

use oncex::run::{load_pipeline, make_embedder, run_cohort, RunOptions};
use oncex_core::corpus::ingest_corpus;
use oncex_core::pipeline::Clients;
use oncex_core::schema::{AttributeMap, EntityInstance, PatientRecord, TypedValue};
use oncex_core::synthesis::{ClientError, GenerationParams, MockSynthesizer, RenderedPrompt, SynthesizerClient, UnknownFixturePolicy};

const SITES: [&str; 5] = ["Upper Extremity/Shoulder", "Lower Extremity/Hip", "Trunk", "Head/Neck", "Scalp"];
const HISTOLOGY: [&str; 4] = ["Superficial spreading", "Nodular", "Lentigo maligna", "Acral lentiginous"];
const STAGES: [(&str, &str, &str); 5] = [
    ("pT1a", "N0", "M0"),
    ("pT2a", "N0", "M0"),
    ("pT3b", "N1a", "M0"),
    ("pT2b", "N0", "M0"),
    ("pT4a", "N2b", "M0"),
];
const DATE: &str = r"(\d{1,2}/\d{1,2}/\d{4}|\d{4}-\d{2}-\d{2}|(?:January|February|March|April|May|June|July|August|September|October|November|December) \d{1,2}, \d{4})";

fn us(d: NaiveDate) -> String {
    d.format("%m/%d/%Y").to_string()
}

fn long(d: NaiveDate) -> String {
    d.format("%B %-d, %Y").to_string()
}

fn iso(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

struct Med {
    name: &'static str,
    start: NaiveDate,
    end: Option<NaiveDate>,
    reason: Option<&'static str>,
    /// A single recorded infusion after which care moved elsewhere.
    transfer_infusion: Option<NaiveDate>,
}

struct Bio {
    gene: &'static str,
    change: Option<&'static str>,
    positive: bool,
    date: NaiveDate,
}

struct Study {
    modality: &'static str,
    site: &'static str,
    date: NaiveDate,
    /// Whether the study has its own radiology report.
    report: bool,
}

struct Facts {
    pid: String,
    i: usize,
    diag: NaiveDate,
    site: &'static str,
    histology: &'static str,
    stage: (&'static str, &'static str, &'static str),
    clinical: Option<NaiveDate>,
    bios: Vec<Bio>,
    retest: Option<NaiveDate>,
    meds: Vec<Med>,
    prior: Option<NaiveDate>,
    studies: Vec<Study>,
    progress_date: NaiveDate,
}

fn facts(i: usize, rng: &mut ChaCha8Rng) -> Facts {
    let base = NaiveDate::from_ymd_opt(2018, 1, 15).unwrap();
    let diag = base + Duration::days(rng.random_range(0..1200));
    let site = SITES[rng.random_range(0..SITES.len())];
    let histology = HISTOLOGY[rng.random_range(0..HISTOLOGY.len())];
    let stage = STAGES[rng.random_range(0..STAGES.len())];
    let braf_pos = i % 2 == 1;
    let mut bios = vec![Bio {
        gene: "BRAF",
        change: braf_pos.then_some("V600E"),
        positive: braf_pos,
        date: diag + Duration::days(rng.random_range(7..21)),
    }];
    if i.is_multiple_of(2) {
        bios.push(Bio {
            gene: "NRAS",
            change: Some("Q61R"),
            positive: true,
            date: diag + Duration::days(rng.random_range(7..21)),
        });
    }
    let retest = (i == 4 || i == 7).then(|| diag + Duration::days(rng.random_range(120..200)));
    let start = diag + Duration::days(rng.random_range(30..60));
    let drug = if i % 4 == 3 { "Pembrolizumab" } else { "Nivolumab" };
    let mut first = Med {
        name: drug,
        start,
        end: None,
        reason: None,
        transfer_infusion: None,
    };
    match i % 3 {
        0 => {
            first.end = Some(start + Duration::days(rng.random_range(90..180)));
            first.reason = Some(if i.is_multiple_of(2) { "immune-related colitis" } else { "disease progression" });
        }
        1 => first.transfer_infusion = Some(start + Duration::days(3)),
        _ => {}
    }
    let mut meds = vec![first];
    if i % 2 == 1 && i % 4 != 3 {
        meds.push(Med {
            name: "Ipilimumab",
            start,
            end: None,
            reason: None,
            transfer_infusion: None,
        });
    }
    let mut studies = vec![Study {
        modality: "PET/CT",
        site: "whole body",
        date: diag + Duration::days(rng.random_range(15..30)),
        report: true,
    }];
    if i % 4 == 2 {
        studies.push(Study {
            modality: "MRI",
            site: "brain",
            date: diag + Duration::days(rng.random_range(60..90)),
            report: true,
        });
    }
    if i % 2 == 1 {
        studies.push(Study {
            modality: "CT",
            site: "chest",
            date: start + Duration::days(rng.random_range(60..80)),
            report: false,
        });
    }
    let last = [
        retest,
        meds.iter().filter_map(|m| m.end).max(),
        studies.iter().map(|s| s.date).max(),
        Some(start + Duration::days(30)),
    ]
    .into_iter()
    .flatten()
    .max()
    .unwrap();
    Facts {
        pid: format!("p{i:02}"),
        i,
        diag,
        site,
        histology,
        stage,
        clinical: i.is_multiple_of(4).then(|| diag - Duration::days(10)),
        bios,
        retest,
        meds,
        prior: (i == 5).then(|| NaiveDate::from_ymd_opt(2015, 1, 5).unwrap()),
        studies,
        progress_date: last + Duration::days(7),
    }
}

fn bio_sentence(b: &Bio, date: NaiveDate, prefix: &str) -> String {
    let change = b.change.map(|c| format!(" {c}")).unwrap_or_default();
    let result = if b.positive { "positive" } else { "negative" };
    format!("{prefix}{}{change} mutation testing resulted {result} on {}.", b.gene, us(date))
}

struct Doc {
    id: String,
    text: String,
    meta: Option<Value>,
}

fn documents(f: &Facts) -> Vec<Doc> {
    let (t, n, m) = f.stage;
    let mut docs = Vec::new();

    let mut path = format!(
        "Surgical pathology report.\nSpecimen: wide local excision, {}.\nFinal diagnosis: {} melanoma, Breslow depth {}.{} mm.\n\
         Pathological stage {t} {n} {m} assigned on {}.\n",
        f.site.to_lowercase(),
        f.histology.to_lowercase(),
        1 + f.i % 3,
        f.i % 10,
        us(f.diag)
    );
    for b in &f.bios {
        path.push_str(&bio_sentence(b, b.date, ""));
        path.push('\n');
    }
    let path_meta = |page: Option<&str>| {
        let mut v = json!({"title": "Surgical pathology report", "doc_type": "pathology", "encounter_date": iso(f.diag)});
        if let Some(g) = page {
            v["page_group"] = json!(g);
        }
        v
    };
    if f.i == 4 {
        // A scanned report split into page documents.
        let cut = path.find("Pathological stage").unwrap();
        docs.push(Doc {
            id: "pathology_p1".into(),
            text: path[..cut].to_string(),
            meta: Some(path_meta(Some("pathology"))),
        });
        docs.push(Doc {
            id: "pathology_p2".into(),
            text: format!("Page 2.\n{}", &path[cut..]),
            meta: Some(path_meta(Some("pathology"))),
        });
    } else {
        docs.push(Doc {
            id: "pathology".into(),
            text: path,
            meta: Some(path_meta(None)),
        });
    }

    let consult_date = f.diag + Duration::days(14);
    let mut consult = format!(
        "Oncology consultation.\nDate of service: {}.\nThe patient was diagnosed with melanoma of the {} on {}. Histology: {} melanoma.\n\
         Pathological stage {t}{n}{m} assigned on {}.\n",
        long(consult_date),
        f.site,
        us(f.diag),
        f.histology,
        iso(f.diag)
    );
    if let Some(c) = f.clinical {
        consult.push_str(&format!("Clinical stage c{} {n} {m} assigned on {}.\n", &t[1..], us(c)));
    }
    if let Some(p) = f.prior {
        consult.push_str(&format!("The patient took vemurafenib starting {} on a prior study.\n", us(p)));
    }
    for (k, med) in f.meds.iter().enumerate() {
        let lead = if k == 0 { "Plan: we started" } else { "We also started" };
        consult.push_str(&format!(
            "{lead} adjuvant {} on {}. {} is given intravenously.\n",
            med.name.to_lowercase(),
            us(med.start),
            med.name
        ));
    }
    docs.push(Doc {
        id: "consult".into(),
        text: consult,
        meta: Some(json!({"title": "Oncology consultation", "doc_type": "consult", "encounter_date": iso(consult_date)})),
    });

    for (k, s) in f.studies.iter().filter(|s| s.report).enumerate() {
        docs.push(Doc {
            id: format!("radiology_{}", k + 1),
            text: format!(
                "Radiology report.\n{} of the {} performed on {}.\nImpression: no evidence of distant metastatic disease.\n",
                s.modality,
                s.site,
                us(s.date)
            ),
            meta: Some(json!({"title": "Radiology report", "doc_type": "radiology", "encounter_date": iso(s.date)})),
        });
    }

    let mut progress = format!("Progress note.\nDate of service: {}.\n", long(f.progress_date));
    let drug = &f.meds[0];
    if let Some(d) = drug.transfer_infusion {
        progress.push_str(&format!(
            "{} infusion administered on {}. Care was transferred to an outside oncologist after that infusion.\n",
            drug.name,
            us(d)
        ));
    }
    if let (Some(end), Some(reason)) = (drug.end, drug.reason) {
        progress.push_str(&format!("{} was discontinued on {} due to {reason}.\n", drug.name, us(end)));
    }
    if let Some(r) = f.retest {
        progress.push_str(&bio_sentence(&f.bios[0], r, "Repeat "));
        progress.push('\n');
    }
    for s in f.studies.iter().filter(|s| !s.report) {
        progress.push_str(&format!(
            "{} of the {} obtained on {} was reviewed and showed no new disease.\n",
            s.modality,
            s.site,
            us(s.date)
        ));
    }
    if f.i == 6 {
        progress.push_str("An ultrasound of the axilla was unremarkable.\n");
    }
    if f.i.is_multiple_of(2) {
        progress.push_str(&format!(
            "The patient was diagnosed with melanoma of the {} on {}.\n",
            f.site,
            us(f.diag)
        ));
    }
    docs.push(Doc {
        id: "progress".into(),
        text: progress,
        meta: None,
    });
    docs
}

fn text(v: &str) -> Option<TypedValue> {
    Some(TypedValue::Text(v.into()))
}

fn cat(v: &str) -> Option<TypedValue> {
    Some(TypedValue::Categorical(v.into()))
}

fn date(d: NaiveDate) -> Option<TypedValue> {
    Some(TypedValue::Date(d))
}

fn instance(entity: &str, pairs: Vec<(&str, Option<TypedValue>)>) -> EntityInstance {
    let attrs: AttributeMap = pairs.into_iter().filter(|(_, v)| v.is_some()).map(|(k, v)| (k.to_string(), v)).collect();
    EntityInstance::new(entity, attrs, vec![])
}

/// Reference annotations. A few deliberately disagree with the notes.
fn ground_truth(f: &Facts) -> PatientRecord {
    let mut r = PatientRecord::new(f.pid.clone());
    let diag_date = if f.i == 3 { f.diag + Duration::days(4) } else { f.diag };
    r.instances.push(instance(
        "Diagnosis",
        vec![
            ("condition", text("Melanoma")),
            ("diag_date", date(diag_date)),
            ("body_site", text(f.site)),
            ("histology", text(f.histology)),
        ],
    ));
    for (k, b) in f.bios.iter().enumerate() {
        let mut d = if k == 0 { f.retest.unwrap_or(b.date) } else { b.date };
        if f.i == 10 && b.gene == "NRAS" {
            d += Duration::days(10);
        }
        r.instances.push(instance(
            "Biomarker",
            vec![
                ("biomarker_tested", text(b.gene)),
                ("aminoacid_change", b.change.and_then(text)),
                ("interpretation", cat(if b.positive { "Positive" } else { "Negative" })),
                ("result_date", date(d)),
            ],
        ));
    }
    for m in &f.meds {
        let end = m.end.or(m.transfer_infusion);
        r.instances.push(instance(
            "Medication",
            vec![
                ("medication", text(m.name)),
                ("start_date", date(m.start)),
                ("end_date", end.and_then(date)),
                ("status", cat(if end.is_some() { "Discontinued" } else { "Active" })),
                ("route", cat("Intravenous")),
                ("treatment_intent", cat("Adjuvant")),
                ("termination_reason", m.reason.and_then(text)),
            ],
        ));
    }
    let (t, n, m) = f.stage;
    r.instances.push(instance(
        "Staging",
        vec![
            ("stage_value", text(&format!("{t} {n} {m}"))),
            ("stage_type", cat("Pathological")),
            ("stage_date", date(f.diag)),
            ("tumor_category", text(t)),
            ("nodes_category", text(n)),
            ("metastases_category", text(m)),
        ],
    ));
    if let Some(c) = f.clinical.filter(|_| f.i != 8) {
        let ct = format!("c{}", &t[1..]);
        r.instances.push(instance(
            "Staging",
            vec![
                ("stage_value", text(&format!("{ct} {n} {m}"))),
                ("stage_type", cat("Clinical")),
                ("stage_date", date(c)),
                ("tumor_category", text(&ct)),
                ("nodes_category", text(n)),
                ("metastases_category", text(m)),
            ],
        ));
    }
    for s in &f.studies {
        r.instances.push(instance(
            "Imaging",
            vec![("modality", cat(s.modality)), ("body_site", text(s.site)), ("start_date", date(s.date))],
        ));
    }
    if f.i == 6 {
        r.instances.push(instance(
            "Imaging",
            vec![
                ("modality", cat("Ultrasound")),
                ("body_site", text("axilla")),
                ("start_date", date(f.progress_date)),
            ],
        ));
    }
    r.instances.sort_by(|a, b| (&a.entity_type, &a.instance_id).cmp(&(&b.entity_type, &b.instance_id)));
    r
}

/// Answers prompts by pattern-matching the rendered notes.
struct Oracle {
    patient: String,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c.flat_map(char::to_lowercase)).collect()).unwrap_or_default()
}

impl Oracle {
    fn answer(&self, prompt: &RenderedPrompt) -> String {
        let body: String = prompt.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let re = |p: &str| Regex::new(&p.replace("DATE", DATE)).unwrap();
        let out = match prompt.template_id.as_str() {
            "metadata" => {
                let date = re(r"Date of service: DATE").captures(&body).map(|c| c[1].to_string());
                let title = body.lines().find(|l| l.ends_with("note.")).map(|l| l.trim_end_matches('.').to_string());
                json!({"title": title, "doc_type": "progress", "encounter_date": date})
            }
            "diagnosis" => {
                let hist = re(r"Histology: ([A-Za-z ]+?) melanoma").captures(&body).map(|c| c[1].to_string());
                let mut found: Vec<Value> = re(r"diagnosed with (melanoma) of the ([A-Za-z/ ]+?) on DATE")
                    .captures_iter(&body)
                    .map(|c| json!({"condition": capitalize(&c[1]), "body_site": &c[2], "diag_date": &c[3], "histology": hist}))
                    .collect();
                found.dedup();
                if found.len() == 1 {
                    found.pop().unwrap()
                } else {
                    Value::Array(found)
                }
            }
            "biomarker" => {
                if self.patient == "p05" && prompt.attempt == 0 {
                    return "The BRAF result appears to be positive.".to_string();
                }
                Value::Array(
                    re(r"(BRAF|NRAS|KIT)(?: ([A-Z]\d+[A-Z]))? mutation testing resulted (positive|negative) on DATE")
                        .captures_iter(&body)
                        .map(|c| {
                            json!({
                                "biomarker_tested": &c[1],
                                "aminoacid_change": c.get(2).map(|m| m.as_str()),
                                "interpretation": capitalize(&c[3]),
                                "result_date": &c[4],
                            })
                        })
                        .collect(),
                )
            }
            "medication_list" => {
                let mut names: Vec<String> = Vec::new();
                for c in re(r"(?i)\b(nivolumab|pembrolizumab|ipilimumab|vemurafenib|dabrafenib)\b").captures_iter(&body) {
                    let n = capitalize(&c[1]);
                    if !names.contains(&n) {
                        names.push(n);
                    }
                }
                json!(names)
            }
            "medication_detail" => {
                let drug = re(r"Drug of interest: (\w+)").captures(&body).unwrap()[1].to_string();
                let d = regex::escape(&drug);
                let mut items = Vec::new();
                for c in re(&format!(r"(?i)started (adjuvant )?{d} on DATE")).captures_iter(&body) {
                    let mut o = json!({"medication": drug, "start_date": &c[2], "status": "Active"});
                    if c.get(1).is_some() {
                        o["treatment_intent"] = json!("Adjuvant");
                    }
                    if re(&format!(r"(?i){d} is given intravenously")).is_match(&body) {
                        o["route"] = json!("Intravenous");
                    }
                    if let Some(x) = re(&format!(r"(?i){d} was discontinued on DATE due to ([^.]+)\.")).captures(&body) {
                        o["end_date"] = json!(&x[1]);
                        o["termination_reason"] = json!(&x[2]);
                        o["status"] = json!("Discontinued");
                    }
                    items.push(o);
                }
                for c in re(&format!(r"(?i){d} infusion administered on DATE")).captures_iter(&body) {
                    items.push(json!({"medication": drug, "start_date": &c[1]}));
                }
                for c in re(&format!(r"(?i)took {d} starting DATE")).captures_iter(&body) {
                    items.push(json!({"medication": drug, "start_date": &c[1], "status": "Completed"}));
                }
                Value::Array(items)
            }
            "staging" => Value::Array(
                re(r"(Clinical|Pathological) stage ([cp]T[0-9a-z]+) ?(N[0-9a-z]+) ?(M[0-9a-z]+) assigned on DATE")
                    .captures_iter(&body)
                    .map(|c| {
                        let value = c[0].split(" stage ").nth(1).unwrap().split(" assigned").next().unwrap().to_string();
                        json!({
                            "stage_value": value,
                            "stage_type": &c[1],
                            "stage_date": &c[5],
                            "tumor_category": &c[2],
                            "nodes_category": &c[3],
                            "metastases_category": &c[4],
                        })
                    })
                    .collect(),
            ),
            "imaging" | "imaging_radiology" => Value::Array(
                re(r"(PET/CT|CT|MRI|Ultrasound) of the ([a-z ]+?) (?:performed|obtained) on DATE")
                    .captures_iter(&body)
                    .map(|c| json!({"modality": &c[1], "body_site": &c[2], "start_date": &c[3]}))
                    .collect(),
            ),
            other => panic!("oracle has no rule for template `{other}`"),
        };
        out.to_string()
    }
}

/// Wraps the oracle and keeps every answer for the fixture file.
struct Recorder {
    oracle: Oracle,
    seen: Mutex<BTreeMap<(String, u64), BTreeMap<u32, String>>>,
}

impl SynthesizerClient for Recorder {
    fn complete(&self, prompt: &RenderedPrompt, _params: &GenerationParams) -> Result<String, ClientError> {
        let answer = self.oracle.answer(prompt);
        self.seen
            .lock()
            .unwrap()
            .entry((prompt.template_id.clone(), prompt.fingerprint))
            .or_default()
            .insert(prompt.attempt, answer.clone());
        Ok(answer)
    }
}

fn write(path: &Path, text: &str) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, text).unwrap();
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/synthetic".into()));
    let corpus = root.join("corpus");
    for sub in ["corpus", "ground_truth", "goldens"] {
        let _ = fs::remove_dir_all(root.join(sub));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(20240630);
    let cohort: Vec<Facts> = (1..=10).map(|i| facts(i, &mut rng)).collect();
    for f in &cohort {
        for d in documents(f) {
            write(&corpus.join(&f.pid).join("notes").join(format!("{}.md", d.id)), &d.text);
            if let Some(meta) = d.meta {
                let text = serde_json::to_string_pretty(&meta).unwrap() + "\n";
                write(&corpus.join(&f.pid).join("meta").join(format!("{}.json", d.id)), &text);
            }
        }
        write(&root.join("ground_truth").join(format!("{}.json", f.pid)), &ground_truth(f).to_json());
    }

    let config = root.join("pipeline.json");
    let pipeline = load_pipeline(&config).unwrap();
    let embedder = make_embedder(&pipeline.config.embedding);
    let today = pipeline.config.run_date.unwrap();
    let mut mock = MockSynthesizer::new(UnknownFixturePolicy::Error);
    let mut recorded = BTreeMap::new();
    for f in &cohort {
        let rec = Recorder {
            oracle: Oracle { patient: f.pid.clone() },
            seen: Mutex::new(BTreeMap::new()),
        };
        let pc = ingest_corpus(&corpus, &f.pid, pipeline.config.chunk_size).unwrap();
        let clients = Clients {
            synthesizer: &rec,
            embedder: embedder.as_ref(),
        };
        let run = pipeline.run_patient(&pc, clients, today).unwrap();
        recorded.insert(f.pid.clone(), run.record.to_json());
        for ((template, fp), attempts) in rec.seen.into_inner().unwrap() {
            mock.insert(&template, fp, attempts.into_values().collect());
        }
    }
    let fixtures = root.join("mock_fixtures.json");
    write(&fixtures, &mock.to_json());

    let summary = run_cohort(&RunOptions {
        config,
        corpus_root: corpus,
        output_dir: root.join("goldens"),
        mock_fixtures: Some(fixtures),
        parallel: 4,
        keep_going: false,
        today: None,
    })
    .unwrap();
    assert!(summary.failures.is_empty(), "{:?}", summary.failures);
    for (pid, text) in recorded {
        let golden = fs::read_to_string(root.join("goldens").join(format!("{pid}.json"))).unwrap();
        assert_eq!(golden, text, "{pid}: replay differs from the recorded run");
    }
    println!("wrote {} patients under {}", cohort.len(), root.display());
}
