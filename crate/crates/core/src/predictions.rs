//! `SGP1` prediction files and uniform ensemble averaging.
//!
//! ```text
//! "SGP1" | u32 version (=1) | u32 k | u32 C | u32 video count
//! per video: u32 id_len | id (UTF-8) | k × (u16 class | f64 score)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::codec::{put_string, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::metrics::{topk_truncate, PredictionList};

pub const PREDICTION_MAGIC: &[u8; 4] = b"SGP1";
pub const PREDICTION_VERSION: u32 = 1;

/// Every video carries exactly `k` distinct classes below `classes`, with
/// scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFile {
    pub k: usize,
    pub classes: usize,
    pub list: PredictionList,
}

impl PredictionFile {
    /// Truncates dense per-video scores to their top `k` (capped at the
    /// class count). Scores are clamped into `[0, 1]`, absorbing the last-ulp
    /// overshoot of a mixture of sigmoids.
    pub fn from_scores<'a>(
        k: usize,
        classes: usize,
        scores: impl IntoIterator<Item = (&'a str, &'a [f64])>,
    ) -> Result<Self> {
        let k = k.min(classes);
        let mut list = PredictionList::default();
        for (id, s) in scores {
            if s.len() != classes {
                return Err(Error::dim("PredictionFile::from_scores", &[classes], &[s.len()]));
            }
            let clamped: Vec<f64> = s.iter().map(|x| x.clamp(0.0, 1.0)).collect();
            list.push(id, topk_truncate(&clamped, k));
        }
        let file = PredictionFile { k, classes, list };
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.classes {
            return Err(Error::Input(format!("k={} must lie in 1..={}", self.k, self.classes)));
        }
        if self.classes > usize::from(u16::MAX) + 1 {
            return Err(Error::Input(format!(
                "{} classes exceed the u16 class field",
                self.classes
            )));
        }
        let mut ids = BTreeSet::new();
        for v in &self.list.videos {
            if !ids.insert(v.video.as_str()) {
                return Err(Error::Input(format!("video {:?} appears twice", v.video)));
            }
            if v.entries.len() != self.k {
                return Err(Error::Input(format!(
                    "video {:?} has {} entries, expected k={}",
                    v.video,
                    v.entries.len(),
                    self.k
                )));
            }
            let mut seen = BTreeSet::new();
            for &(c, s) in &v.entries {
                if c >= self.classes || !seen.insert(c) {
                    return Err(Error::Input(format!(
                        "video {:?} has invalid or repeated class {c}",
                        v.video
                    )));
                }
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Input(format!(
                        "video {:?} class {c} has score {s} outside [0, 1]",
                        v.video
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(PREDICTION_MAGIC);
        out.extend_from_slice(&PREDICTION_VERSION.to_le_bytes());
        put_u32(&mut out, self.k, "k")?;
        put_u32(&mut out, self.classes, "class count")?;
        put_u32(&mut out, self.list.videos.len(), "video count")?;
        for v in &self.list.videos {
            put_string(&mut out, &v.video, "id length")?;
            for &(c, s) in &v.entries {
                out.extend_from_slice(&(c as u16).to_le_bytes());
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        c.magic(PREDICTION_MAGIC)?;
        let version = c.u32("version")?;
        if version != PREDICTION_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let k = c.u32("k")? as usize;
        let classes = c.u32("class count")? as usize;
        let count = c.u32("video count")?;
        let mut list = PredictionList::default();
        for _ in 0..count {
            let id = c.string("video id")?;
            let entries = (0..k)
                .map(|_| Ok((usize::from(c.u16("class")?), c.f64("score")?)))
                .collect::<Result<Vec<_>>>()?;
            list.push(id, entries);
        }
        c.finish()?;
        let file = PredictionFile { k, classes, list };
        file.validate().map_err(|e| Error::format(0, e.to_string()))?;
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        PredictionFile::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Per-(video, class) arithmetic mean across files, absent classes
/// counting as 0, re-truncated to the smallest input `k`. Output videos
/// are sorted by id; terms are summed in sorted order so argument order
/// cannot change the result.
pub fn average_predictions(files: &[PredictionFile]) -> Result<PredictionFile> {
    let first = files
        .first()
        .ok_or_else(|| Error::Input("ensemble needs at least one prediction file".into()))?;
    let classes = first.classes;
    let ids = |f: &PredictionFile| -> BTreeSet<String> { f.list.videos.iter().map(|v| v.video.clone()).collect() };
    let reference = ids(first);
    for (i, f) in files.iter().enumerate() {
        f.validate()?;
        if f.classes != classes {
            return Err(Error::Input(format!(
                "file {i} has {} classes, file 0 has {classes}",
                f.classes
            )));
        }
        let these = ids(f);
        if these != reference {
            let diff: Vec<&String> = these.symmetric_difference(&reference).collect();
            return Err(Error::Input(format!(
                "file {i} covers a different video set; symmetric difference with file 0: {diff:?}"
            )));
        }
    }
    let k = files.iter().map(|f| f.k).min().unwrap_or(1);
    let n = files.len() as f64;
    let mut terms: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for f in files {
        for v in &f.list.videos {
            let cols = terms
                .entry(v.video.as_str())
                .or_insert_with(|| vec![Vec::new(); classes]);
            for &(c, s) in &v.entries {
                cols[c].push(s);
            }
        }
    }
    let mut list = PredictionList::default();
    for (id, cols) in terms {
        let mean: Vec<f64> = cols
            .into_iter()
            .map(|mut xs| {
                xs.sort_by(f64::total_cmp);
                xs.iter().sum::<f64>() / n
            })
            .collect();
        list.push(id, topk_truncate(&mean, k));
    }
    Ok(PredictionFile { k, classes, list })
}
