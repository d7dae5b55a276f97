//! Three pipeline operations for the static page in `www/`. Every export
//! takes and returns JSON strings so the page needs no generated types.

use std::collections::BTreeSet;

use pgrisk::annotation::{resolve_label, AnnotationRecord, CriteriaSchema, Flag, LabelOverride};
use pgrisk::features::{smote_upsample, SparseVector};
use pgrisk::stats::welch_t_test;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn parse_numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

/// Welch's t-test on two comma- or space-separated samples.
pub fn welch_json(a: &str, b: &str) -> Result<String, String> {
    let (a, b) = (parse_numbers(a)?, parse_numbers(b)?);
    let r = welch_t_test(&a, &b).ok_or("each sample needs two values and some spread")?;
    Ok(
        serde_json::json!({"t": r.t, "dof": r.dof, "p": r.p, "balanced": r.is_balanced(0.05)})
            .to_string(),
    )
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreviewInput {
    #[serde(default)]
    checked_criteria: BTreeSet<String>,
    #[serde(default)]
    flags: BTreeSet<Flag>,
    #[serde(default)]
    manual_label_override: Option<LabelOverride>,
}

/// Label the service would assign to a submission, plus the catalog so the
/// page can draw checkboxes.
pub fn label_preview_json(input: &str) -> Result<String, String> {
    let p: PreviewInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let mut record = AnnotationRecord::new("preview", "preview");
    record.checked_criteria = p.checked_criteria;
    record.flags = p.flags;
    record.manual_label_override = p.manual_label_override;
    let label = resolve_label(&CriteriaSchema::standard(), &record).map_err(|e| e.to_string())?;
    Ok(serde_json::json!({"label": label}).to_string())
}

pub fn schema_json() -> String {
    serde_json::to_string(&CriteriaSchema::standard()).expect("schema serializes")
}

#[derive(Debug, Serialize)]
struct SmotePoint {
    x: f64,
    y: f64,
    base: usize,
    neighbor: usize,
}

/// SMOTE on 2-D points given as `[[x, y], ...]`, upsampled to `target`.
pub fn smote_json(points: &str, target: usize, k: usize, seed: u64) -> Result<String, String> {
    let pts: Vec<[f64; 2]> = serde_json::from_str(points).map_err(|e| e.to_string())?;
    let vectors: Vec<SparseVector> = pts.iter().map(|p| SparseVector::from_dense(p)).collect();
    let synthetic = smote_upsample(&vectors, target, k, seed).map_err(|e| e.to_string())?;
    let out: Vec<SmotePoint> = synthetic
        .into_iter()
        .map(|s| {
            let d = s.vector.to_dense();
            SmotePoint {
                x: d[0],
                y: d[1],
                base: s.base,
                neighbor: s.neighbor,
            }
        })
        .collect();
    Ok(serde_json::to_string(&out).expect("points serialize"))
}

#[wasm_bindgen]
pub fn welch(a: &str, b: &str) -> Result<String, JsError> {
    welch_json(a, b).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = labelPreview)]
pub fn label_preview(input: &str) -> Result<String, JsError> {
    label_preview_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = criteriaSchema)]
pub fn criteria_schema() -> String {
    schema_json()
}

#[wasm_bindgen]
pub fn smote(points: &str, target: usize, k: usize, seed: u64) -> Result<String, JsError> {
    smote_json(points, target, k, seed).map_err(|e| JsError::new(&e))
}
