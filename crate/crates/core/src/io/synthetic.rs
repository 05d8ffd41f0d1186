//! Deterministic toy corpora with learnable region and document labels.
//!
//! Each document is a form on an 850×1100 page: a title band whose text
//! names the document class, key/value rows where the left column holds
//! questions and the right column answers, and a footer. Region labels
//! follow from position and token alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::RegionRecord;
use crate::error::{Error, Result};
use crate::io::corpus::DocumentRecord;
use crate::layout::BoundingBox;

pub const SYNTHETIC_LABELS: [&str; 4] = ["other", "header", "question", "answer"];
pub const PAGE_WIDTH: f64 = 850.0;
pub const PAGE_HEIGHT: f64 = 1100.0;

const CLASS_NAMES: [&str; 4] = ["invoice", "letter", "receipt", "form"];
const QUESTION_KEYS: [&str; 10] = [
    "Name:", "Date:", "Total:", "Address:", "Phone:", "Account:", "Amount:", "Reference:", "Email:", "Signature:",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub docs: usize,
    pub regions_per_doc: usize,
    pub classes: usize,
    pub seed: u64,
}

pub fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

fn region(id: usize, text: String, b: [f64; 4], label: &str) -> RegionRecord {
    RegionRecord {
        id: format!("r{id}"),
        text,
        bbox: BoundingBox::from_corners(b[0], b[1], b[2], b[3]),
        label: Some(label.to_owned()),
    }
}

/// Label of a generated region from its position: top band → header,
/// bottom band → other, otherwise left third → question, rest → answer.
pub fn label_rule(b: &BoundingBox) -> &'static str {
    let (x0, y0) = b.vertices[0];
    if y0 < 120.0 {
        "header"
    } else if y0 >= 1000.0 {
        "other"
    } else if x0 < PAGE_WIDTH / 3.0 {
        "question"
    } else {
        "answer"
    }
}

fn one_document(i: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> DocumentRecord {
    let class = rng.gen_range(0..spec.classes);
    let n = spec.regions_per_doc;
    let mut regions = Vec::with_capacity(n);
    let jitter = |rng: &mut ChaCha8Rng| f64::from(rng.gen_range(0..20i32));

    let hx = 250.0 + jitter(rng);
    regions.push(region(0, class_name(class).to_uppercase(), [hx, 40.0, hx + 300.0, 90.0], "header"));

    let has_footer = n >= 3;
    let body = n - 1 - usize::from(has_footer);
    let rows = body.div_ceil(2).max(1);
    let pitch = (860.0 / rows as f64).floor().min(80.0);
    let mut keys: Vec<&str> = QUESTION_KEYS.to_vec();
    keys.shuffle(rng);
    for k in 0..body {
        let row = k / 2;
        let y0 = 140.0 + pitch * row as f64 + jitter(rng).min(pitch / 4.0).floor();
        let y2 = y0 + (pitch / 2.0).floor();
        if k % 2 == 0 {
            let x0 = 40.0 + jitter(rng);
            let text = keys[row % keys.len()].to_owned();
            regions.push(region(k + 1, text, [x0, y0, x0 + 200.0, y2], "question"));
        } else {
            let x0 = 320.0 + 2.0 * jitter(rng);
            let text = format!("value {}", rng.gen_range(0..100));
            regions.push(region(k + 1, text, [x0, y0, x0 + 400.0, y2], "answer"));
        }
    }
    if has_footer {
        let x0 = 300.0 + jitter(rng);
        regions.push(region(n - 1, format!("page {}", i + 1), [x0, 1020.0, x0 + 250.0, 1060.0], "other"));
    }
    DocumentRecord {
        id: format!("syn-{i:04}"),
        width: PAGE_WIDTH,
        height: PAGE_HEIGHT,
        regions,
        doc_class: Some(class_name(class)),
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<DocumentRecord>> {
    if spec.docs == 0 || spec.regions_per_doc == 0 || spec.classes == 0 {
        return Err(Error::Config(format!("synthetic counts must be at least 1: {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.docs).map(|i| one_document(i, spec, &mut rng)).collect())
}
