//! Test-set evaluation: subject- and pixel-level metrics overall and per
//! anomaly class, from score maps and subject records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{thin_curve, Ranking};
use crate::scorer::SubjectScore;
use crate::testbench::{AnomalyClass, TestSetIndex};
use crate::volume::{load_volume, save_volume, Volume};

/// Everything evaluation needs about one test subject.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub class: Option<AnomalyClass>,
    pub subject_label: u8,
    pub volume: Volume,
    pub mask: Volume,
    pub scores: Volume,
    pub subject_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub ap: f64,
    pub auroc: f64,
    pub prevalence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub ap: f64,
    pub auroc: f64,
    pub dice: f64,
    pub dice_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub subjects_positive: u64,
    pub subjects_negative: u64,
    pub pixels_positive: u64,
    pub pixels_negative: u64,
}

impl EvalCounts {
    fn add(&mut self, other: &EvalCounts) {
        self.subjects_positive += other.subjects_positive;
        self.subjects_negative += other.subjects_negative;
        self.pixels_positive += other.pixels_positive;
        self.pixels_negative += other.pixels_negative;
    }
}

/// Metrics over one anomaly class together with all normal subjects.
/// `counts` covers the class's own cases only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub class: AnomalyClass,
    pub subject: SubjectMetrics,
    pub pixel: PixelMetrics,
    pub counts: EvalCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject: SubjectMetrics,
    /// Pooled over every voxel of every subject.
    pub pixel: PixelMetrics,
    /// Pooled over voxels inside the body (nonzero intensity) or the
    /// anomaly mask.
    pub pixel_body: PixelMetrics,
    pub per_kind: Vec<KindReport>,
    pub counts: EvalCounts,
    pub normal_counts: EvalCounts,
}

/// Curves of one subset, thinned for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub name: String,
    pub roc: Vec<[f64; 3]>,
    pub pr: Vec<[f64; 3]>,
}

/// Largest number of points kept per exported curve.
pub const CURVE_POINTS: usize = 1000;

fn check_case(c: &EvalCase) -> Result<()> {
    let shape = c.volume.shape();
    if c.mask.shape() != shape || c.scores.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "case {}: volume {:?}, mask {:?}, scores {:?}",
            c.id,
            shape,
            c.mask.shape(),
            c.scores.shape()
        )));
    }
    if c.subject_label > 1 {
        return Err(Error::InvalidData(format!("case {} has subject label {}", c.id, c.subject_label)));
    }
    Ok(())
}

fn case_counts(c: &EvalCase) -> EvalCounts {
    let pos = c.mask.voxels().iter().filter(|&&m| m > 0.5).count() as u64;
    EvalCounts {
        subjects_positive: (c.subject_label == 1) as u64,
        subjects_negative: (c.subject_label == 0) as u64,
        pixels_positive: pos,
        pixels_negative: c.mask.len() as u64 - pos,
    }
}

fn subject_metrics(cases: &[&EvalCase]) -> Result<SubjectMetrics> {
    let scores: Vec<f64> = cases.iter().map(|c| c.subject_score).collect();
    let labels: Vec<bool> = cases.iter().map(|c| c.subject_label == 1).collect();
    let r = Ranking::new(&scores, &labels)?;
    Ok(SubjectMetrics {
        ap: r.average_precision()?,
        auroc: r.auroc()?,
        prevalence: r.positives as f64 / cases.len() as f64,
    })
}

fn pixel_ranking(cases: &[&EvalCase], body_only: bool) -> Result<Ranking> {
    let total: usize = cases.iter().map(|c| c.mask.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for c in cases {
        for ((&s, &m), &v) in c.scores.voxels().iter().zip(c.mask.voxels()).zip(c.volume.voxels()) {
            let positive = m > 0.5;
            if body_only && !(positive || v > 0.0) {
                continue;
            }
            scores.push(s as f64);
            labels.push(positive);
        }
    }
    Ranking::new(&scores, &labels)
}

fn pixel_metrics(r: &Ranking) -> Result<PixelMetrics> {
    let dice = r.dice_ceiling()?;
    Ok(PixelMetrics {
        ap: r.average_precision()?,
        auroc: r.auroc()?,
        dice: dice.dice,
        dice_threshold: dice.threshold,
    })
}

fn curves(name: &str, r: &Ranking) -> CurveSet {
    CurveSet {
        name: name.to_string(),
        roc: thin_curve(&r.roc_curve(), CURVE_POINTS),
        pr: thin_curve(&r.pr_curve(), CURVE_POINTS),
    }
}

/// Computes the report and the overall and per-class pixel curves.
pub fn evaluate(cases: &[EvalCase]) -> Result<(EvalReport, Vec<CurveSet>)> {
    for c in cases {
        check_case(c)?;
    }
    let all: Vec<&EvalCase> = cases.iter().collect();
    let normals: Vec<&EvalCase> = cases.iter().filter(|c| c.subject_label == 0).collect();
    let overall = pixel_ranking(&all, false)?;
    let mut curve_sets = vec![curves("overall", &overall)];
    let mut per_kind = Vec::new();
    for class in AnomalyClass::ALL {
        let own: Vec<&EvalCase> = cases
            .iter()
            .filter(|c| c.subject_label == 1 && c.class == Some(class))
            .collect();
        if own.is_empty() {
            continue;
        }
        let mut counts = EvalCounts::default();
        own.iter().for_each(|c| counts.add(&case_counts(c)));
        let subset: Vec<&EvalCase> = own.iter().chain(&normals).copied().collect();
        let r = pixel_ranking(&subset, false)?;
        curve_sets.push(curves(class.name(), &r));
        per_kind.push(KindReport {
            class,
            subject: subject_metrics(&subset)?,
            pixel: pixel_metrics(&r)?,
            counts,
        });
    }
    let mut counts = EvalCounts::default();
    all.iter().for_each(|c| counts.add(&case_counts(c)));
    let mut normal_counts = EvalCounts::default();
    normals.iter().for_each(|c| normal_counts.add(&case_counts(c)));
    let report = EvalReport {
        subject: subject_metrics(&all)?,
        pixel: pixel_metrics(&overall)?,
        pixel_body: pixel_metrics(&pixel_ranking(&all, true)?)?,
        per_kind,
        counts,
        normal_counts,
    };
    Ok((report, curve_sets))
}

/// Score map file of a case inside a score directory.
pub fn score_map_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_scores.raw"))
}

/// Subject record file of a case inside a score directory.
pub fn subject_record_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_subject.json"))
}

pub fn save_scores(dir: &Path, map: &Volume, record: &SubjectScore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_volume(map, &score_map_path(dir, &record.case_id))?;
    let path = subject_record_path(dir, &record.case_id);
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_subject_record(dir: &Path, case_id: &str) -> Result<SubjectScore> {
    let path = subject_record_path(dir, case_id);
    if !path.exists() {
        return Err(Error::MissingRecord(case_id.to_string()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: SubjectScore = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if record.case_id != case_id {
        return Err(Error::InvalidData(format!(
            "{} holds the record of {}, expected {case_id}",
            path.display(),
            record.case_id
        )));
    }
    record.verify()?;
    Ok(record)
}

/// Loads a written test set together with the score files of every case.
pub fn load_eval_cases(testset_dir: &Path, scores_dir: &Path) -> Result<Vec<EvalCase>> {
    let index = TestSetIndex::load(testset_dir)?;
    index
        .records
        .iter()
        .map(|rec| {
            let map_path = score_map_path(scores_dir, &rec.id);
            if !map_path.exists() {
                return Err(Error::MissingRecord(rec.id.clone()));
            }
            let record = load_subject_record(scores_dir, &rec.id)?;
            let volume = index.load_volume(testset_dir, rec)?;
            let mask = index.load_mask(testset_dir, rec, volume.shape())?;
            Ok(EvalCase {
                id: rec.id.clone(),
                class: rec.class,
                subject_label: rec.subject_label,
                scores: load_volume(&map_path)?,
                subject_score: record.subject_score,
                volume,
                mask,
            })
        })
        .collect()
}

/// Writes `report.json` and `curves/{name}_{roc,pr}.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, curve_sets: &[CurveSet]) -> Result<()> {
    let curve_dir = dir.join("curves");
    fs::create_dir_all(&curve_dir).map_err(|e| Error::io(&curve_dir, e))?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for c in curve_sets {
        for (suffix, header, points) in [("roc", "fpr,tpr,threshold", &c.roc), ("pr", "recall,precision,threshold", &c.pr)] {
            let mut out = String::from(header);
            out.push('\n');
            for p in points.iter() {
                let _ = writeln!(out, "{},{},{}", p[0], p[1], p[2]);
            }
            let path = curve_dir.join(format!("{}_{suffix}.csv", c.name));
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
