//! JSON-lines document corpus: one document object per line.
//!
//! ```text
//! {"id":"d0","width":1000.0,"height":800.0,
//!  "regions":[{"id":"r0","text":"TOTAL","box":[10.0,20.0,110.0,40.0],"label":"question"}],
//!  "doc_class":"invoice"}
//! ```
//!
//! Regions give either `quad` (eight numbers, clockwise from top-left) or
//! the axis-aligned shorthand `box` (`x0, y0, x2, y2`). The writer emits
//! `box` whenever the quad is axis-aligned.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::RegionRecord;
use crate::error::{Error, Result};
use crate::layout::BoundingBox;

/// One document image's OCR regions plus optional gold annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentRecord {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub regions: Vec<RegionRecord>,
    pub doc_class: Option<String>,
}

impl DocumentRecord {
    pub fn has_entity_labels(&self) -> bool {
        self.regions.iter().all(|r| r.label.is_some())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocJson {
    id: String,
    width: f64,
    height: f64,
    regions: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doc_class: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionJson {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quad: Option<[f64; 8]>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

fn parse_err(doc: &str, path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Parse {
        doc: doc.to_owned(),
        path: path.into(),
        msg: msg.into(),
    }
}

fn clamp_box(doc: &str, region: &str, b: BoundingBox, w: f64, h: f64) -> BoundingBox {
    let mut out = b;
    for v in &mut out.vertices {
        v.0 = v.0.clamp(0.0, w);
        v.1 = v.1.clamp(0.0, h);
    }
    if out != b {
        log::warn!("document {doc}: region {region} box clamped to the {w}×{h} page");
    }
    out
}

/// Parses one JSON line. `line_no` is used for context when the id itself
/// is unreadable.
pub fn parse_document(line: &str, line_no: usize) -> Result<DocumentRecord> {
    let value: Value = serde_json::from_str(line).map_err(|e| parse_err(&format!("line {line_no}"), "$", e.to_string()))?;
    let doc_name = value
        .get("id")
        .and_then(Value::as_str)
        .map_or_else(|| format!("line {line_no}"), str::to_owned);
    let doc: DocJson = serde_json::from_value(value).map_err(|e| parse_err(&doc_name, "$", e.to_string()))?;
    if !(doc.width > 0.0 && doc.width.is_finite()) {
        return Err(parse_err(&doc_name, "width", "must be positive"));
    }
    if !(doc.height > 0.0 && doc.height.is_finite()) {
        return Err(parse_err(&doc_name, "height", "must be positive"));
    }
    if doc.regions.is_empty() {
        return Err(parse_err(&doc_name, "regions", "empty document"));
    }
    let mut ids = BTreeSet::new();
    let mut regions = Vec::with_capacity(doc.regions.len());
    for (i, rv) in doc.regions.into_iter().enumerate() {
        let path = format!("regions[{i}]");
        let r: RegionJson = serde_json::from_value(rv).map_err(|e| parse_err(&doc_name, path.clone(), e.to_string()))?;
        if !ids.insert(r.id.clone()) {
            return Err(parse_err(&doc_name, format!("{path}.id"), format!("duplicate region id `{}`", r.id)));
        }
        let bbox = match (r.quad, r.bbox) {
            (Some(q), None) => BoundingBox::from_quad(q),
            (None, Some(b)) => BoundingBox::from_corners(b[0], b[1], b[2], b[3]),
            _ => return Err(parse_err(&doc_name, path, "exactly one of `quad` or `box` is required")),
        };
        if !bbox.is_finite() {
            return Err(parse_err(&doc_name, format!("{path}.box"), "non-finite coordinate"));
        }
        let bbox = clamp_box(&doc_name, &r.id, bbox, doc.width, doc.height);
        regions.push(RegionRecord {
            id: r.id,
            text: r.text,
            bbox,
            label: r.label,
        });
    }
    Ok(DocumentRecord {
        id: doc.id,
        width: doc.width,
        height: doc.height,
        regions,
        doc_class: doc.doc_class,
    })
}

fn is_axis_aligned(b: &BoundingBox) -> bool {
    let v = &b.vertices;
    v[0].1 == v[1].1 && v[1].0 == v[2].0 && v[2].1 == v[3].1 && v[3].0 == v[0].0
}

/// Serializes one document as a single JSON line (no trailing newline).
pub fn document_to_json(doc: &DocumentRecord) -> Result<String> {
    let regions = doc
        .regions
        .iter()
        .map(|r| {
            let (quad, bbox) = if is_axis_aligned(&r.bbox) {
                let v = &r.bbox.vertices;
                (None, Some([v[0].0, v[0].1, v[2].0, v[2].1]))
            } else {
                (Some(r.bbox.quad()), None)
            };
            serde_json::to_value(RegionJson {
                id: r.id.clone(),
                text: r.text.clone(),
                quad,
                bbox,
                label: r.label.clone(),
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Data(e.to_string()))?;
    let out = DocJson {
        id: doc.id.clone(),
        width: doc.width,
        height: doc.height,
        regions,
        doc_class: doc.doc_class.clone(),
    };
    serde_json::to_string(&out).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<DocumentRecord>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_document(&line, i + 1)?);
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path) -> Result<Vec<DocumentRecord>> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn corpus_to_string(docs: &[DocumentRecord]) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&document_to_json(d)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, docs: &[DocumentRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(corpus_to_string(docs)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = include_str!("../../tests/fixtures/three_docs.jsonl");

    #[test]
    fn fixture_loads_with_exact_counts() {
        let docs = read_corpus(FIXTURE.as_bytes()).unwrap();
        let counts: Vec<usize> = docs.iter().map(|d| d.regions.len()).collect();
        assert_eq!(counts, vec![3, 1, 5]);
        assert_eq!(docs[1].doc_class.as_deref(), Some("letter"));
        assert!(docs[0].has_entity_labels());
        // quad input, not axis-aligned
        assert_eq!(docs[2].regions[4].bbox.vertices[1], (95.0, 402.0));
    }

    #[test]
    fn empty_document_rejected() {
        let err = parse_document(r#"{"id":"x","width":10,"height":10,"regions":[]}"#, 1).unwrap_err();
        assert!(err.to_string().contains("empty document"), "{err}");
    }

    #[test]
    fn errors_carry_document_and_field_path() {
        let err = parse_document(r#"{"id":"doc7","width":10,"height":10,"regions":[{"id":"a","text":"t","box":[0,0,1,1]},{"id":"b","box":[0,0,1,1]}]}"#, 3)
            .unwrap_err();
        match err {
            Error::Parse { doc, path, msg } => {
                assert_eq!(doc, "doc7");
                assert_eq!(path, "regions[1]");
                assert!(msg.contains("text"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let err = parse_document(r#"{"id":"d","width":10,"height":10,"regions":[{"id":"a","text":"","box":[0,0,1,1]},{"id":"a","text":"","box":[0,0,1,1]}]}"#, 1).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let err = parse_document(r#"{"id":"d","width":10,"height":10,"extra":1,"regions":[]}"#, 1).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = parse_document("not json", 4).unwrap_err();
        assert!(err.to_string().contains("line 4"));
    }

    #[test]
    fn out_of_page_boxes_are_clamped() {
        let d = parse_document(r#"{"id":"d","width":100,"height":50,"regions":[{"id":"a","text":"","box":[-5,10,120,60]}]}"#, 1).unwrap();
        assert_eq!(d.regions[0].bbox, BoundingBox::from_corners(0.0, 10.0, 100.0, 50.0));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let docs = read_corpus(FIXTURE.as_bytes()).unwrap();
        let text = corpus_to_string(&docs).unwrap();
        let again = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(docs, again);
        assert_eq!(corpus_to_string(&again).unwrap(), text);
    }
}
