//! COCO-format annotation ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use super::PipelineError;
use crate::geometry::{BoxCXCYWH, BoxXYXY};
use crate::matching_loss::Target;

/// One annotated image with boxes normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub target: Target,
}

/// Parsed annotation file; class indices are contiguous in ascending
/// category-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub records: Vec<CocoRecord>,
    pub categories: Vec<(u64, String)>,
}

impl CocoDataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }
}

fn schema(msg: impl Into<String>) -> PipelineError {
    PipelineError::Dataset(msg.into())
}

fn field<'a>(obj: &'a Value, key: &str, what: &str) -> Result<&'a Value, PipelineError> {
    obj.get(key)
        .ok_or_else(|| schema(format!("{what}: missing key `{key}`")))
}

fn as_u64(v: &Value, key: &str, what: &str) -> Result<u64, PipelineError> {
    field(v, key, what)?
        .as_u64()
        .ok_or_else(|| schema(format!("{what}: `{key}` must be a non-negative integer")))
}

fn as_array<'a>(v: &'a Value, key: &str, what: &str) -> Result<&'a Vec<Value>, PipelineError> {
    field(v, key, what)?
        .as_array()
        .ok_or_else(|| schema(format!("{what}: `{key}` must be an array")))
}

/// Reads a COCO annotation file.
pub fn load_coco_json(path: impl AsRef<Path>) -> Result<CocoDataset, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_coco_json(&text)
}

/// Parses COCO annotations: `xywh` pixel boxes become normalized `cxcywh`
/// and crowd annotations are skipped.
pub fn parse_coco_json(text: &str) -> Result<CocoDataset, PipelineError> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema(format!("not valid JSON: {e}")))?;
    if !root.is_object() {
        return Err(schema("top level must be an object"));
    }
    let images = as_array(&root, "images", "annotation file")?;
    let annotations = as_array(&root, "annotations", "annotation file")?;
    let categories = as_array(&root, "categories", "annotation file")?;

    let mut cats = BTreeMap::new();
    for c in categories {
        let id = as_u64(c, "id", "category")?;
        let what = format!("category {id}");
        let name = field(c, "name", &what)?
            .as_str()
            .ok_or_else(|| schema(format!("{what}: `name` must be a string")))?;
        if cats.insert(id, name.to_string()).is_some() {
            return Err(schema(format!("{what}: duplicate id")));
        }
    }
    let class_of: BTreeMap<u64, usize> = cats.keys().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut records = Vec::with_capacity(images.len());
    let mut by_id = BTreeMap::new();
    for img in images {
        let id = as_u64(img, "id", "image")?;
        let what = format!("image {id}");
        let width = as_u64(img, "width", &what)? as usize;
        let height = as_u64(img, "height", &what)? as usize;
        if width == 0 || height == 0 {
            return Err(schema(format!("{what}: zero extent")));
        }
        let file_name = field(img, "file_name", &what)?
            .as_str()
            .ok_or_else(|| schema(format!("{what}: `file_name` must be a string")))?
            .to_string();
        if by_id.insert(id, records.len()).is_some() {
            return Err(schema(format!("{what}: duplicate id")));
        }
        records.push(CocoRecord {
            image_id: id,
            file_name,
            width,
            height,
            target: Target::default(),
        });
    }

    for ann in annotations {
        let id = as_u64(ann, "id", "annotation")?;
        let what = format!("annotation {id}");
        let crowd = ann.get("iscrowd").and_then(Value::as_u64).unwrap_or(0);
        if crowd != 0 {
            continue;
        }
        let image_id = as_u64(ann, "image_id", &what)?;
        let &slot = by_id
            .get(&image_id)
            .ok_or_else(|| schema(format!("{what}: unknown image_id {image_id}")))?;
        let category = as_u64(ann, "category_id", &what)?;
        let &class = class_of
            .get(&category)
            .ok_or_else(|| schema(format!("{what}: unknown category_id {category}")))?;
        let bbox = as_array(ann, "bbox", &what)?;
        let xywh: Vec<f64> = bbox.iter().filter_map(Value::as_f64).collect();
        if xywh.len() != 4 || bbox.len() != 4 {
            return Err(schema(format!("{what}: `bbox` must hold four numbers")));
        }
        let rec = &mut records[slot];
        let (iw, ih) = (rec.width as f64, rec.height as f64);
        let (x, y, w, h) = (xywh[0], xywh[1], xywh[2], xywh[3]);
        if w <= 0.0 || h <= 0.0 {
            return Err(schema(format!("{what}: non-positive box extent")));
        }
        let b: BoxCXCYWH<f64> = BoxXYXY::new(x / iw, y / ih, (x + w) / iw, (y + h) / ih).to_cxcywh();
        rec.target.classes.push(class);
        rec.target.boxes.push(b.clamp_to_image());
    }

    Ok(CocoDataset {
        records,
        categories: cats.into_iter().collect(),
    })
}
