//! Patient document ingestion and sentence-bounded chunking.
//!
//! Chunk offsets count Unicode scalar values (chars), not bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::parse_iso_date;
use crate::synthesis::{
    extract_json_object, GenerationParams, PromptTemplate, SynthesisError, SynthesizerClient,
};

pub const DEFAULT_MAX_CHARS: usize = 2000;

/// Abbreviations whose trailing period never ends a sentence.
const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "mg.", "e.g.", "i.e.", "vs.", "approx.", "no.", "st.", "pt.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    HtmlNote,
    PdfPageMarkdown,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encounter_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_type: Option<String>,
}

impl DocumentMetadata {
    pub fn is_complete(&self) -> bool {
        self.encounter_date.is_some() && self.title.is_some() && self.doc_type.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub document_id: String,
    pub patient_id: String,
    pub modality: Modality,
    pub text: String,
    pub metadata: DocumentMetadata,
    /// Groups PDF pages that belong to one source document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_group: Option<String>,
}

impl Document {
    pub fn new(document_id: impl Into<String>, patient_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            document_id: document_id.into(),
            patient_id: patient_id.into(),
            modality: Modality::HtmlNote,
            text: text.into(),
            metadata: DocumentMetadata::default(),
            page_group: None,
        }
    }

    /// Text between two char offsets.
    pub fn slice(&self, char_start: usize, char_end: usize) -> String {
        self.text
            .chars()
            .skip(char_start)
            .take(char_end.saturating_sub(char_start))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub document_id: String,
    pub chunk_index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

impl Chunk {
    pub fn len_chars(&self) -> usize {
        self.char_end - self.char_start
    }

    pub fn key(&self) -> (&str, usize) {
        (&self.document_id, self.chunk_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientCorpus {
    pub patient_id: String,
    pub documents: Vec<Document>,
    pub chunks: Vec<Chunk>,
}

impl PatientCorpus {
    /// Builds a corpus from documents, chunking each with `max_chars`.
    pub fn from_documents(patient_id: impl Into<String>, documents: Vec<Document>, max_chars: usize) -> Self {
        let chunks = documents
            .iter()
            .flat_map(|d| chunk_document(d, max_chars))
            .collect();
        PatientCorpus {
            patient_id: patient_id.into(),
            documents,
            chunks,
        }
    }

    pub fn document(&self, document_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.document_id == document_id)
    }

    /// Encounter dates of documents that have one.
    pub fn document_dates(&self) -> BTreeMap<String, NaiveDate> {
        self.documents
            .iter()
            .filter_map(|d| Some((d.document_id.clone(), d.metadata.encounter_date?)))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("patient directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed metadata sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Char-offset spans `[start, end)` partitioning `text` into sentences.
/// Whitespace following a sentence belongs to it.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        let ends = if c == '\n' {
            true
        } else if matches!(c, '.' | '?' | '!' | ';') {
            let mut j = i + 1;
            while j < n && chars[j].is_whitespace() && chars[j] != '\n' {
                j += 1;
            }
            let spaced = j > i + 1;
            let next_ok = j < n && (chars[j].is_uppercase() || chars[j].is_ascii_digit() || chars[j] == '\n');
            spaced && next_ok && !(c == '.' && is_abbreviation(&chars[start..=i]))
        } else {
            false
        };
        if ends {
            let mut j = i + 1;
            while j < n && chars[j].is_whitespace() {
                j += 1;
            }
            spans.push((start, j));
            start = j;
            i = j;
        } else {
            i += 1;
        }
    }
    if start < n {
        spans.push((start, n));
    }
    spans
}

fn is_abbreviation(sentence: &[char]) -> bool {
    let word_start = sentence
        .iter()
        .rposition(|c| c.is_whitespace() || *c == '(')
        .map_or(0, |p| p + 1);
    let word: String = sentence[word_start..].iter().collect::<String>().to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Greedily packs whole sentences into windows of at most `max_chars`
/// chars; each window after the first starts with the previous window's
/// last sentence. The overlap is dropped when it and the next sentence do
/// not fit together, and a sentence longer than `max_chars` forms a chunk
/// of its own.
pub fn chunk_document(doc: &Document, max_chars: usize) -> Vec<Chunk> {
    let max_chars = max_chars.max(1);
    let sentences = split_sentences(&doc.text);
    let chars: Vec<char> = doc.text.chars().collect();
    let len = |(s, e): (usize, usize)| e - s;

    let mut windows: Vec<(usize, usize)> = Vec::new(); // sentence index ranges, inclusive
    let mut next = 0;
    let mut overlap: Option<usize> = None;
    while next < sentences.len() {
        if len(sentences[next]) > max_chars {
            windows.push((next, next));
            overlap = Some(next);
            next += 1;
            continue;
        }
        let first = overlap
            .filter(|&o| len(sentences[o]) + len(sentences[next]) <= max_chars)
            .unwrap_or(next);
        let mut last = next;
        let mut size = sentences[last].1 - sentences[first].0;
        while last + 1 < sentences.len() {
            let grown = size + len(sentences[last + 1]);
            if grown > max_chars {
                break;
            }
            size = grown;
            last += 1;
        }
        windows.push((first, last));
        overlap = Some(last);
        next = last + 1;
    }

    windows
        .into_iter()
        .enumerate()
        .map(|(chunk_index, (first, last))| {
            let (char_start, char_end) = (sentences[first].0, sentences[last].1);
            Chunk {
                document_id: doc.document_id.clone(),
                chunk_index,
                char_start,
                char_end,
                text: chars[char_start..char_end].iter().collect(),
            }
        })
        .collect()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    title: Option<String>,
    encounter_date: Option<String>,
    doc_type: Option<String>,
    page_group: Option<String>,
}

/// Patient ids under `root`: every subdirectory holding a `notes/` folder.
pub fn list_patients(root: &Path) -> Result<Vec<String>, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::MissingDirectory(root.to_path_buf()));
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.path().join("notes").is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads `<root>/<patient_id>/notes/*.{md,txt}` with optional
/// `meta/<doc>.json` sidecars. Documents with a `page_group` are PDF pages.
pub fn ingest_corpus(root: &Path, patient_id: &str, max_chars: usize) -> Result<PatientCorpus, CorpusError> {
    let dir = root.join(patient_id);
    let notes = dir.join("notes");
    if !notes.is_dir() {
        return Err(CorpusError::MissingDirectory(notes));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&notes)
        .map_err(io_err(&notes))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(&notes)))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("md" | "txt")));
    files.sort();

    let mut documents: Vec<Document> = Vec::with_capacity(files.len());
    for path in files {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if documents.iter().any(|d| d.document_id == id) {
            return Err(CorpusError::DuplicateDocument(id));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut doc = Document::new(id.clone(), patient_id, text);

        let meta_path = dir.join("meta").join(format!("{id}.json"));
        if meta_path.is_file() {
            let raw = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            let sidecar: Sidecar = serde_json::from_str(&raw).map_err(|e| CorpusError::Sidecar {
                path: meta_path.clone(),
                reason: e.to_string(),
            })?;
            doc.metadata.title = sidecar.title;
            doc.metadata.doc_type = sidecar.doc_type;
            doc.metadata.encounter_date = sidecar
                .encounter_date
                .map(|d| parse_iso_date(&d))
                .transpose()
                .map_err(|e| CorpusError::Sidecar {
                    path: meta_path.clone(),
                    reason: e.to_string(),
                })?;
            if sidecar.page_group.is_some() {
                doc.modality = Modality::PdfPageMarkdown;
            }
            doc.page_group = sidecar.page_group;
        }
        documents.push(doc);
    }
    Ok(PatientCorpus::from_documents(patient_id, documents, max_chars))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetadataOutcome {
    pub metadata: DocumentMetadata,
    pub warnings: Vec<String>,
    /// Whether the synthesizer was consulted at all.
    pub called: bool,
}

/// Fills missing metadata fields through a metadata prompt bound with the
/// document text as `{{SNIPPET}}`. Sidecar values always win; a document
/// with complete metadata is left untouched. One retry on failure.
pub fn extract_document_metadata(
    doc: &Document,
    client: &dyn SynthesizerClient,
    template: &PromptTemplate,
    params: &GenerationParams,
) -> MetadataOutcome {
    let mut outcome = MetadataOutcome {
        metadata: doc.metadata.clone(),
        ..Default::default()
    };
    if doc.metadata.is_complete() {
        return outcome;
    }
    outcome.called = true;
    let bindings = BTreeMap::from([("SNIPPET".to_string(), doc.text.clone())]);
    let mut rendered = match template.render(&bindings) {
        Ok(r) => r,
        Err(e) => {
            outcome.warnings.push(format!("{}: metadata prompt: {e}", doc.document_id));
            return outcome;
        }
    };
    let mut failures = Vec::new();
    for attempt in 0..2 {
        rendered.attempt = attempt;
        match client
            .complete(&rendered, params)
            .map_err(SynthesisError::from)
            .and_then(|raw| parse_metadata(&raw))
        {
            Ok(found) => {
                let m = &mut outcome.metadata;
                m.title = m.title.take().or(found.title);
                m.doc_type = m.doc_type.take().or(found.doc_type);
                m.encounter_date = m.encounter_date.or(found.encounter_date);
                return outcome;
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    outcome.warnings.push(format!(
        "{}: metadata extraction failed: {}",
        doc.document_id,
        failures.join("; ")
    ));
    outcome
}

fn parse_metadata(raw: &str) -> Result<DocumentMetadata, SynthesisError> {
    let obj = extract_json_object(raw).ok_or(SynthesisError::NoObject)?;
    let text = |key: &str| {
        obj.get(key)
            .and_then(|v| v.as_str())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
    };
    let encounter_date = match text("encounter_date") {
        Some(d) => Some(
            crate::pipeline::normalize_to_date(&d, crate::pipeline::DateConvention::MonthFirst)
                .map_err(|e| SynthesisError::Invalid(e.to_string()))?,
        ),
        None => None,
    };
    Ok(DocumentMetadata {
        encounter_date,
        title: text("title"),
        doc_type: text("doc_type"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document::new("d1", "p1", text)
    }

    fn sentence(n: usize, tag: char) -> String {
        // `n` chars including the trailing space.
        let mut s: String = std::iter::once(tag.to_ascii_uppercase()).chain(std::iter::repeat_n('x', n - 3)).collect();
        s.push_str(". ");
        s
    }

    #[test]
    fn empty_text_has_no_chunks() {
        assert!(chunk_document(&doc(""), 100).is_empty());
    }

    #[test]
    fn single_sentence_single_chunk() {
        let text = sentence(40, 'a');
        let chunks = chunk_document(&doc(&text), 100);
        assert_eq!(chunks.len(), 1);
        assert_eq!((chunks[0].char_start, chunks[0].char_end), (0, 40));
    }

    #[test]
    fn three_sentences_overlap_by_one() {
        let text = [sentence(40, 'a'), sentence(40, 'b'), sentence(40, 'c')].concat();
        let chunks = chunk_document(&doc(&text), 100);
        let spans: Vec<_> = chunks.iter().map(|c| (c.char_start, c.char_end)).collect();
        assert_eq!(spans, vec![(0, 80), (40, 120)]);
    }

    #[test]
    fn oversized_sentence_stands_alone() {
        let text = [sentence(30, 'a'), sentence(150, 'b'), sentence(30, 'c')].concat();
        let chunks = chunk_document(&doc(&text), 100);
        let spans: Vec<_> = chunks.iter().map(|c| (c.char_start, c.char_end)).collect();
        assert_eq!(spans, vec![(0, 30), (30, 180), (180, 210)]);
    }

    #[test]
    fn segmentation_rules() {
        let spans = split_sentences("Seen by Dr. Smith today. BRAF V600E detected; 2 lesions noted.\nPlan: continue");
        let texts: Vec<String> = spans
            .iter()
            .map(|&(s, e)| doc("Seen by Dr. Smith today. BRAF V600E detected; 2 lesions noted.\nPlan: continue").slice(s, e))
            .collect();
        assert_eq!(
            texts,
            vec!["Seen by Dr. Smith today. ", "BRAF V600E detected; ", "2 lesions noted.\n", "Plan: continue"]
        );
        assert_eq!(split_sentences("dose 5 mg. daily"), vec![(0, 16)]);
        assert_eq!(split_sentences("stable. continue"), vec![(0, 16)]);
    }

    #[test]
    fn offsets_count_chars() {
        let d = doc("Größe 3 cm. Nächster Termin.");
        let chunks = chunk_document(&d, 14);
        assert_eq!(chunks[0].text, "Größe 3 cm. ");
        assert_eq!(d.slice(chunks[1].char_start, chunks[1].char_end), chunks[1].text);
    }

    #[test]
    fn ingests_notes_and_sidecars() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("P1");
        fs::create_dir_all(p.join("notes")).unwrap();
        fs::create_dir_all(p.join("meta")).unwrap();
        fs::write(p.join("notes/a.md"), "Pathology shows melanoma.").unwrap();
        fs::write(p.join("notes/b.md"), "Follow up.").unwrap();
        fs::write(
            p.join("meta/a.json"),
            r#"{"encounter_date":"2019-02-11","title":"Pathology Report","page_group":"g1"}"#,
        )
        .unwrap();
        let corpus = ingest_corpus(tmp.path(), "P1", 2000).unwrap();
        assert_eq!(corpus.documents.len(), 2);
        let a = corpus.document("a").unwrap();
        assert_eq!(a.metadata.encounter_date, NaiveDate::from_ymd_opt(2019, 2, 11));
        assert_eq!(a.modality, Modality::PdfPageMarkdown);
        assert_eq!(corpus.document("b").unwrap().modality, Modality::HtmlNote);
        assert_eq!(list_patients(tmp.path()).unwrap(), vec!["P1"]);

        fs::write(p.join("notes/a.txt"), "dup").unwrap();
        assert!(matches!(ingest_corpus(tmp.path(), "P1", 2000), Err(CorpusError::DuplicateDocument(_))));
        fs::remove_file(p.join("notes/a.txt")).unwrap();

        fs::write(p.join("meta/b.json"), r#"{"when":"x"}"#).unwrap();
        assert!(matches!(ingest_corpus(tmp.path(), "P1", 2000), Err(CorpusError::Sidecar { .. })));
        assert!(matches!(ingest_corpus(tmp.path(), "P9", 2000), Err(CorpusError::MissingDirectory(_))));
    }
}
