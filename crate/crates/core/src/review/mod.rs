//! Label review: an event-sourced store of reviewer corrections over a data
//! root, and the HTTP service exposing it.
//!
//! Corrections are appended to `review_journal.jsonl` in the data root and
//! replayed on startup. The effective label of a section is its corrected
//! label if present, otherwise the predicted one.

mod http;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DataRoot;
use crate::error::{Error, Result};
use crate::slide_io::{SectionLabel, SectionRecord, SlideBundle};

pub use http::{router, serve, LiveModel, ReviewService};

pub const JOURNAL_FILE: &str = "review_journal.jsonl";

/// One journal line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub section_id: String,
    pub label: SectionLabel,
    pub reviewer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlideSummary {
    pub slide_id: String,
    pub n_sections: usize,
    pub n_corrected: usize,
}

/// A section as reported by the service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub slide_id: String,
    #[serde(flatten)]
    pub section: SectionRecord,
    pub effective_label: Option<SectionLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub slide_id: String,
    pub section_id: String,
    pub predicted: Option<SectionLabel>,
    pub effective: Option<SectionLabel>,
    pub changed: bool,
}

/// Predicted labels from a `predictions.csv` written by `histoseg classify`.
#[derive(Clone, Debug, Deserialize)]
struct PredictionRow {
    section_id: String,
    predicted: SectionLabel,
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, SectionLabel>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| Error::corrupt(path, e.to_string()))?;
        out.insert(row.section_id, row.predicted);
    }
    Ok(out)
}

/// Slides, their sections and the journal appender.
pub struct ReviewState {
    bundles: Vec<SlideBundle>,
    /// section_id → (bundle index, section index)
    index: BTreeMap<String, (usize, usize)>,
    journal: PathBuf,
    appender: Option<File>,
}

impl ReviewState {
    /// Loads every slide of `data`, applies `predictions` and replays the journal.
    pub fn open(data: &Path, predictions: Option<&BTreeMap<String, SectionLabel>>) -> Result<Self> {
        let root = DataRoot::open(data)?;
        let bundles = root.all_ids().into_iter().map(|id| root.load(id)).collect::<Result<Vec<_>>>()?;
        Self::from_bundles(bundles, predictions, data.join(JOURNAL_FILE))
    }

    pub fn from_bundles(
        mut bundles: Vec<SlideBundle>,
        predictions: Option<&BTreeMap<String, SectionLabel>>,
        journal: PathBuf,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (bi, b) in bundles.iter_mut().enumerate() {
            for (si, s) in b.sections.iter_mut().enumerate() {
                if index.insert(s.section_id.clone(), (bi, si)).is_some() {
                    return Err(Error::validation("section_id", format!("{} appears twice", s.section_id)));
                }
                if let Some(p) = predictions.and_then(|m| m.get(&s.section_id)) {
                    s.predicted_label = Some(*p);
                }
                s.corrected_label = None;
            }
        }
        let mut state = Self { bundles, index, journal, appender: None };
        state.replay()?;
        Ok(state)
    }

    fn replay(&mut self) -> Result<()> {
        if !self.journal.exists() {
            return Ok(());
        }
        let path = self.journal.clone();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: LabelEvent =
                serde_json::from_str(&line).map_err(|e| Error::corrupt(&path, format!("line {}: {e}", n + 1)))?;
            let (bi, si) = self.locate(&ev.section_id).map_err(|_| {
                Error::corrupt(&path, format!("line {}: unknown section {}", n + 1, ev.section_id))
            })?;
            self.bundles[bi].sections[si].corrected_label = Some(ev.label);
        }
        Ok(())
    }

    fn locate(&self, section_id: &str) -> Result<(usize, usize)> {
        self.index.get(section_id).copied().ok_or_else(|| Error::NotFound(format!("section {section_id}")))
    }

    fn record(&self, bi: usize, si: usize) -> ReviewRecord {
        let b = &self.bundles[bi];
        let s = &b.sections[si];
        ReviewRecord { slide_id: b.slide_id.clone(), section: s.clone(), effective_label: s.corrected_label.or(s.predicted_label) }
    }

    pub fn journal_path(&self) -> &Path {
        &self.journal
    }

    pub fn slides(&self) -> Vec<SlideSummary> {
        self.bundles
            .iter()
            .map(|b| SlideSummary {
                slide_id: b.slide_id.clone(),
                n_sections: b.sections.len(),
                n_corrected: b.sections.iter().filter(|s| s.corrected_label.is_some()).count(),
            })
            .collect()
    }

    pub fn sections(&self, slide_id: &str) -> Result<Vec<ReviewRecord>> {
        let bi = self
            .bundles
            .iter()
            .position(|b| b.slide_id == slide_id)
            .ok_or_else(|| Error::NotFound(format!("slide {slide_id}")))?;
        Ok((0..self.bundles[bi].sections.len()).map(|si| self.record(bi, si)).collect())
    }

    pub fn section(&self, section_id: &str) -> Result<ReviewRecord> {
        let (bi, si) = self.locate(section_id)?;
        Ok(self.record(bi, si))
    }

    /// The slide a section belongs to and the section itself.
    pub fn bundle_of(&self, section_id: &str) -> Result<(&SlideBundle, &SectionRecord)> {
        let (bi, si) = self.locate(section_id)?;
        Ok((&self.bundles[bi], &self.bundles[bi].sections[si]))
    }

    /// Sets the corrected label. Re-setting the current value appends nothing.
    pub fn set_label(&mut self, section_id: &str, label: &str, reviewer: &str) -> Result<ReviewRecord> {
        let (bi, si) = self.locate(section_id)?;
        let label: SectionLabel = label.parse()?;
        if self.bundles[bi].sections[si].corrected_label != Some(label) {
            let ev = LabelEvent { section_id: section_id.to_string(), label, reviewer: reviewer.to_string() };
            self.append(&ev)?;
            self.bundles[bi].sections[si].corrected_label = Some(label);
        }
        Ok(self.record(bi, si))
    }

    fn append(&mut self, ev: &LabelEvent) -> Result<()> {
        if self.appender.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(&self.journal).map_err(|e| Error::io(&self.journal, e))?;
            self.appender = Some(f);
        }
        let mut line = serde_json::to_string(ev).expect("event serializes");
        line.push('\n');
        let f = self.appender.as_mut().expect("opened above");
        f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(&self.journal, e))
    }

    pub fn export_rows(&self) -> Vec<ExportRow> {
        let mut rows = Vec::new();
        for b in &self.bundles {
            for s in &b.sections {
                rows.push(ExportRow {
                    slide_id: b.slide_id.clone(),
                    section_id: s.section_id.clone(),
                    predicted: s.predicted_label,
                    effective: s.corrected_label.or(s.predicted_label),
                    changed: s.corrected_label.is_some() && s.corrected_label != s.predicted_label,
                });
            }
        }
        rows
    }

    pub fn export_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.export_rows() {
            w.serialize(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_io::Rect;

    fn bundle(id: &str, n: usize) -> SlideBundle {
        let mut sections = Vec::new();
        for i in 0..n {
            let mut s = SectionRecord::new(format!("{id}-s{i}"), Rect::new(0, 0, 8, 8));
            s.predicted_label = Some(if i == 0 { SectionLabel::Tumor } else { SectionLabel::Normal });
            sections.push(s);
        }
        SlideBundle {
            slide_id: id.into(),
            image: image::RgbImage::new(64, 64),
            mpp: 1.0,
            magnification: 20.0,
            annotations: vec![],
            sections,
        }
    }

    fn state(dir: &Path) -> ReviewState {
        ReviewState::from_bundles(vec![bundle("a", 3), bundle("b", 4)], None, dir.join(JOURNAL_FILE)).unwrap()
    }

    #[test]
    fn summaries_and_sections() {
        let dir = tempfile::tempdir().unwrap();
        let s = state(dir.path());
        let sums = s.slides();
        assert_eq!(sums.iter().map(|x| x.n_sections).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(s.sections("b").unwrap().len(), 4);
        assert!(matches!(s.sections("zzz"), Err(Error::NotFound(_))));
        let empty = ReviewState::from_bundles(vec![], None, dir.path().join("j")).unwrap();
        assert!(empty.slides().is_empty());
    }

    #[test]
    fn set_label_is_idempotent_and_journaled() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = state(dir.path());
        let r = s.set_label("a-s1", "Tumor", "dr").unwrap();
        assert_eq!((r.section.predicted_label, r.section.corrected_label), (Some(SectionLabel::Normal), Some(SectionLabel::Tumor)));
        assert_eq!(r.effective_label, Some(SectionLabel::Tumor));
        s.set_label("a-s1", "Tumor", "dr").unwrap();
        let lines = std::fs::read_to_string(s.journal_path()).unwrap();
        assert_eq!(lines.lines().count(), 1);
        assert!(matches!(s.set_label("nope", "Tumor", "dr"), Err(Error::NotFound(_))));
        assert!(s.set_label("a-s1", "Maybe", "dr").unwrap_err().is_validation());
    }

    #[test]
    fn export_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = state(dir.path());
        assert!(s.export_rows().iter().all(|r| !r.changed));
        s.set_label("b-s2", "Tumor", "dr").unwrap();
        // confirming a prediction is a correction but not a change
        s.set_label("b-s3", "Normal", "dr").unwrap();
        let rows = s.export_rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows.iter().filter(|r| r.changed).count(), 1);
        let csv = s.export_csv();
        assert!(csv.starts_with("slide_id,section_id,predicted,effective,changed\n"));
        assert!(csv.contains("b,b-s2,Normal,Tumor,true"));

        let again = state(dir.path());
        assert_eq!(again.export_csv(), csv);
        assert_eq!(again.slides()[1].n_corrected, 2);
    }
}
