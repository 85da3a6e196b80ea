use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{diversity, fid, foot_skating_mean, mm_dist, r_precision, sra, DIVERSITY_PAIRS};
use super::nets::{content_prompt, style_label, DualEncoder, StyleClassifier};
use crate::error::{Error, Result};
use crate::motion::{LabeledClip, MotionSequence};

/// Trained evaluation networks.
#[derive(Clone, Debug)]
pub struct Evaluators {
    pub classifier: StyleClassifier,
    pub dual: DualEncoder,
}

impl Evaluators {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.classifier.save(dir)?;
        self.dual.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Evaluators {
            classifier: StyleClassifier::load(dir)?,
            dual: DualEncoder::load(dir)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub sra_top1: f64,
    pub sra_top3: f64,
    pub sra_top5: f64,
    pub fid: f64,
    pub r_precision_top1: f64,
    pub r_precision_top2: f64,
    pub r_precision_top3: f64,
    pub mm_dist: f64,
    pub foot_skating: f64,
    pub diversity: f64,
    /// Diversity of the reference set, for `|diversity - real|`.
    pub diversity_real: f64,
    pub n_samples: usize,
    pub n_real: usize,
}

const COLUMNS: [&str; 12] = [
    "Model",
    "SRA@1",
    "SRA@3",
    "SRA@5",
    "FID",
    "R@1",
    "R@2",
    "R@3",
    "MM-Dist",
    "FootSkate",
    "Diversity",
    "|Div-Real|",
];

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            self.sra_top1,
            self.sra_top3,
            self.sra_top5,
            self.r_precision_top1,
            self.r_precision_top2,
            self.r_precision_top3,
            self.foot_skating,
        ];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numerical("a rate left [0, 1]".into()));
        }
        if [self.fid, self.mm_dist, self.diversity, self.diversity_real]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numerical("non-finite metric in report".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<String> {
        let mut c = vec![self.label.clone()];
        for v in [self.sra_top1, self.sra_top3, self.sra_top5] {
            c.push(format!("{:.1}%", 100.0 * v));
        }
        c.push(format!("{:.3}", self.fid));
        for v in [self.r_precision_top1, self.r_precision_top2, self.r_precision_top3] {
            c.push(format!("{:.1}%", 100.0 * v));
        }
        c.push(format!("{:.3}", self.mm_dist));
        c.push(format!("{:.3}", self.foot_skating));
        c.push(format!("{:.3}", self.diversity));
        c.push(format!("{:.3}", (self.diversity - self.diversity_real).abs()));
        c
    }

    /// Aligned plain-text table, one row per report.
    pub fn table(reports: &[EvalReport]) -> String {
        let rows: Vec<Vec<String>> = std::iter::once(COLUMNS.iter().map(|s| s.to_string()).collect())
            .chain(reports.iter().map(EvalReport::cells))
            .collect();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i == 0 {
                        format!("{s:<w$}", w = widths[i])
                    } else {
                        format!("{s:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if n == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}

fn motions(clips: &[LabeledClip]) -> Vec<MotionSequence> {
    clips.iter().map(|c| c.motion.clone()).collect()
}

/// Scores `clips` against a reference set.
///
/// The intended style of each clip is its `style_id` (neutral when absent).
/// Retrieval uses each prompt with its style suffix removed.
pub fn evaluate(ev: &Evaluators, clips: &[LabeledClip], real: &[LabeledClip], label: &str, seed: u64) -> Result<EvalReport> {
    if clips.len() < 2 || real.len() < 2 {
        return Err(Error::Invalid("evaluation needs at least 2 clips on each side".into()));
    }
    let gen = motions(clips);
    let reference = motions(real);
    let logits = ev.classifier.logits(&gen)?;
    let targets: Vec<usize> = clips.iter().map(style_label).collect();
    let n = ev.classifier.n_classes();
    let at = |k: usize| sra(&logits, &targets, k.min(n));
    let fa = ev.classifier.features(&gen)?;
    let fb = ev.classifier.features(&reference)?;
    let zm = ev.dual.encode_motions(&gen)?;
    let zt = ev
        .dual
        .encode_texts(&clips.iter().map(|c| content_prompt(&c.prompt)).collect::<Vec<_>>())?;
    let rp = r_precision(&zm, &zt, 3)?;
    let report = EvalReport {
        label: label.to_string(),
        sra_top1: at(1)?,
        sra_top3: at(3)?,
        sra_top5: at(5)?,
        fid: fid(&fa, &fb)?,
        r_precision_top1: rp[0],
        r_precision_top2: rp[1],
        r_precision_top3: rp[2],
        mm_dist: mm_dist(&zm, &zt)?,
        foot_skating: foot_skating_mean(&gen)?,
        diversity: diversity(&fa, DIVERSITY_PAIRS, seed)?,
        diversity_real: diversity(&fb, DIVERSITY_PAIRS, seed)?,
        n_samples: clips.len(),
        n_real: real.len(),
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_aligned() {
        let r = EvalReport {
            label: "Real".into(),
            sra_top1: 0.9,
            sra_top3: 1.0,
            sra_top5: 1.0,
            fid: 0.0123,
            r_precision_top1: 0.5,
            r_precision_top2: 0.7,
            r_precision_top3: 0.8,
            mm_dist: 0.4,
            foot_skating: 0.0,
            diversity: 2.0,
            diversity_real: 2.1,
            n_samples: 32,
            n_real: 32,
        };
        r.validate().unwrap();
        let t = EvalReport::table(&[
            r.clone(),
            EvalReport {
                label: "Ours".into(),
                ..r.clone()
            },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("Real"));
        assert!(lines[0].contains("SRA@5") && lines[0].contains("MM-Dist"));
        assert_eq!(lines[2].len(), lines[3].len());
        assert!(EvalReport { sra_top1: 1.5, ..r }.validate().is_err());
    }
}
