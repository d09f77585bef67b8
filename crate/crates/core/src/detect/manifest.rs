//! Line-delimited JSON manifests. Boxes are stored in pixels and normalized
//! by the image size on load.

use serde::{Deserialize, Serialize};

use super::{BBox, DetectError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub image_w: u32,
    pub image_h: u32,
    /// Normalized to `[0, 1]`.
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub image_w: u32,
    pub image_h: u32,
    pub bbox: BBox,
    pub conf: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    image_id: String,
    w: u32,
    h: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<f64>,
}

impl Row {
    fn normalized(&self, line: usize) -> Result<BBox> {
        let err = |m: String| DetectError::Parse { line, message: m };
        if self.w == 0 || self.h == 0 {
            return Err(err(format!("image size {}x{} is empty", self.w, self.h)));
        }
        let [x0, y0, x1, y1] = self.bbox;
        let b = BBox::new(x0, y0, x1, y1).map_err(|e| err(e.to_string()))?;
        let n = b.scaled(1.0 / self.w as f64, 1.0 / self.h as f64);
        if !n.within_unit() {
            return Err(err(format!(
                "box {:?} leaves the {}x{} image",
                self.bbox, self.w, self.h
            )));
        }
        Ok(n)
    }
}

fn rows(text: &str) -> Result<Vec<(usize, Row)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Row>(l)
                .map(|r| (i + 1, r))
                .map_err(|e| DetectError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<GroundTruthRecord>> {
    rows(text)?
        .into_iter()
        .map(|(line, r)| {
            Ok(GroundTruthRecord {
                bbox: r.normalized(line)?,
                image_id: r.image_id,
                image_w: r.w,
                image_h: r.h,
            })
        })
        .collect()
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    rows(text)?
        .into_iter()
        .map(|(line, r)| {
            let conf = r.conf.ok_or_else(|| DetectError::Parse {
                line,
                message: "prediction has no \"conf\"".into(),
            })?;
            Ok(Prediction {
                bbox: r.normalized(line)?,
                image_id: r.image_id,
                image_w: r.w,
                image_h: r.h,
                conf,
            })
        })
        .collect()
}

/// Serializes `(image_id, w, h, normalized box, conf)` rows back to pixels.
pub fn to_jsonl<'a>(
    records: impl IntoIterator<Item = (&'a str, u32, u32, BBox, Option<f64>)>,
) -> String {
    let mut out = String::new();
    for (id, w, h, b, conf) in records {
        let p = b.scaled(w as f64, h as f64);
        let row = Row {
            image_id: id.to_string(),
            w,
            h,
            bbox: [p.xmin, p.ymin, p.xmax, p.ymax],
            conf,
        };
        out.push_str(&serde_json::to_string(&row).expect("rows always serialize"));
        out.push('\n');
    }
    out
}

impl GroundTruthRecord {
    pub fn to_jsonl(records: &[GroundTruthRecord]) -> String {
        to_jsonl(
            records
                .iter()
                .map(|r| (r.image_id.as_str(), r.image_w, r.image_h, r.bbox, None)),
        )
    }
}

impl Prediction {
    pub fn to_jsonl(records: &[Prediction]) -> String {
        to_jsonl(records.iter().map(|r| {
            (
                r.image_id.as_str(),
                r.image_w,
                r.image_h,
                r.bbox,
                Some(r.conf),
            )
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_normalizes() {
        let text =
            "{\"image_id\": \"0001\", \"w\": 640, \"h\": 360, \"box\": [64, 36, 128, 72]}\n\n\
                    {\"image_id\": \"0002\", \"w\": 10, \"h\": 10, \"box\": [0, 0, 10, 10]}\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].bbox, BBox::new(0.1, 0.1, 0.2, 0.2).unwrap());
        assert_eq!(m[1].bbox.area(), 1.0);
    }

    #[test]
    fn reports_line_numbers() {
        let text = "{\"image_id\": \"a\", \"w\": 10, \"h\": 10, \"box\": [0, 0, 1, 1]}\n\
                    {\"image_id\": \"b\", \"w\": 10, \"h\": 10, \"box\": [0, 0, 11, 1]}\n";
        match parse_manifest(text) {
            Err(DetectError::Parse { line: 2, .. }) => {}
            other => panic!("{:?}", other),
        }
        assert!(matches!(
            parse_manifest("not json"),
            Err(DetectError::Parse { line: 1, .. })
        ));
        assert!(
            parse_predictions("{\"image_id\": \"a\", \"w\": 1, \"h\": 1, \"box\": [0,0,1,1]}")
                .is_err()
        );
    }

    #[test]
    fn round_trip() {
        let text = "{\"image_id\":\"a\",\"w\":640,\"h\":360,\"box\":[10.0,20.0,30.0,40.0],\"conf\":0.75}\n";
        let p = parse_predictions(text).unwrap();
        let again = parse_predictions(&Prediction::to_jsonl(&p)).unwrap();
        assert_eq!(again[0].image_id, "a");
        assert_eq!(again[0].conf, 0.75);
        assert!((again[0].bbox.xmin - p[0].bbox.xmin).abs() < 1e-15);
    }
}
