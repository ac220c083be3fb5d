//! Boxes CSV: header `image_id,class_id,x,y,w,h,score`. The score column is
//! optional (left empty or omitted for ground truths); proposals use class 0.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CenError, Result};
use crate::evaluation::{GroundTruth, ImageDetection};
use crate::geometry::BoundingBox;
use crate::pipeline::{Detection, Proposal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: String,
    pub class_id: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn bbox(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.x, self.y, self.w, self.h)
    }

    pub fn from_detection(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            x: d.bbox.x,
            y: d.bbox.y,
            w: d.bbox.w,
            h: d.bbox.h,
            score: Some(d.score),
        }
    }

    pub fn from_ground_truth(g: &GroundTruth) -> Self {
        Self {
            image_id: g.image_id.clone(),
            class_id: g.class_id,
            x: g.bbox.x,
            y: g.bbox.y,
            w: g.bbox.w,
            h: g.bbox.h,
            score: None,
        }
    }

    pub fn from_proposal(image_id: &str, p: &Proposal) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: 0,
            x: p.bbox.x,
            y: p.bbox.y,
            w: p.bbox.w,
            h: p.bbox.h,
            score: Some(p.score),
        }
    }

    fn score_or_err(&self) -> Result<f64> {
        self.score.ok_or_else(|| CenError::Format(format!("row for image {:?} has no score", self.image_id)))
    }

    pub fn to_detection(&self) -> Result<ImageDetection> {
        Ok(ImageDetection::new(
            self.image_id.clone(),
            Detection { bbox: self.bbox()?, class_id: self.class_id, score: self.score_or_err()? },
        ))
    }

    pub fn to_ground_truth(&self) -> Result<GroundTruth> {
        Ok(GroundTruth { image_id: self.image_id.clone(), class_id: self.class_id, bbox: self.bbox()? })
    }

    pub fn to_proposal(&self) -> Result<Proposal> {
        Ok(Proposal { bbox: self.bbox()?, score: self.score.unwrap_or(1.0) })
    }
}

pub fn write_boxes<W: Write>(w: W, records: &[BoxRecord]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(["image_id", "class_id", "x", "y", "w", "h", "score"])?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_boxes<R: Read>(r: R) -> Result<Vec<BoxRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    rdr.deserialize().map(|row| row.map_err(CenError::from)).collect()
}
