//! Template grammar for findings reports.
//!
//! Normal-health boilerplate dominates every report; finding sentences name
//! the kind and location, optionally hedged. No boilerplate sentence uses a
//! kind word, so the kind words alone determine abnormality when nothing is
//! omitted.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Finding, FindingKind, SceneSpec};

const BOILERPLATE: &[&str] = &[
    "the heart size is normal",
    "the mediastinal contours are within normal limits",
    "no pneumothorax is seen",
    "the osseous structures are intact",
    "the hilar contours are unremarkable",
    "the cardiomediastinal silhouette is stable",
    "there is no acute bony abnormality",
    "the trachea is midline",
    "no focal consolidation is identified",
    "the aorta is tortuous but otherwise unremarkable",
    "the visualized abdomen is unremarkable",
    "lung volumes are preserved",
];

const HEDGES: &[&str] = &["likely", "possibly", "cannot be excluded"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportGrammar {
    /// Probability that a finding sentence is dropped from the report.
    pub omission_prob: f64,
    pub hedge_prob: f64,
    pub normal_boilerplate: usize,
    pub abnormal_boilerplate: usize,
}

impl Default for ReportGrammar {
    fn default() -> Self {
        Self {
            omission_prob: 0.05,
            hedge_prob: 0.3,
            normal_boilerplate: 3,
            abnormal_boilerplate: 2,
        }
    }
}

impl ReportGrammar {
    pub fn render<R: Rng + ?Sized>(&self, scene: &SceneSpec, rng: &mut R) -> String {
        let n_boiler = if scene.is_abnormal() {
            self.abnormal_boilerplate
        } else {
            self.normal_boilerplate
        };
        let boiler: Vec<&str> = BOILERPLATE.choose_multiple(rng, n_boiler).copied().collect();
        let mut sentences: Vec<String> = Vec::new();
        if let Some(first) = boiler.first() {
            sentences.push(first.to_string());
        }
        for f in &scene.findings {
            let s = self.finding_sentence(f, rng);
            if rng.random::<f64>() >= self.omission_prob {
                sentences.push(s);
            }
        }
        sentences.extend(boiler.iter().skip(1).map(|s| s.to_string()));
        let mut text = sentences.join(". ");
        text.push('.');
        text
    }

    fn finding_sentence<R: Rng + ?Sized>(&self, f: &Finding, rng: &mut R) -> String {
        let (sev, side, zone) = (f.severity.word(), f.location.side(), f.location.zone());
        let templates: &[&str] = match f.kind {
            FindingKind::Opacity => &[
                "there is a {sev} opacity in the {side} {zone} lung",
                "{sev} {side} {zone} opacity is present",
                "a {sev} area of opacity projects over the {side} {zone} zone",
            ],
            FindingKind::Effusion => &[
                "{sev} {side} pleural effusion is seen along the {zone} field",
                "there is a {sev} effusion on the {side} {zone} side",
            ],
            FindingKind::Device => &[
                "a support device projects over the {side} {zone} chest",
                "{side} {zone} device tip is noted",
            ],
        };
        let t = templates.choose(rng).expect("non-empty");
        let s = t.replace("{sev}", sev).replace("{side}", side).replace("{zone}", zone);
        if rng.random::<f64>() < self.hedge_prob {
            let hedge = *HEDGES.choose(rng).expect("non-empty");
            if hedge == "cannot be excluded" {
                format!("{s} which cannot be excluded")
            } else {
                format!("{hedge} {s}")
            }
        } else {
            s
        }
    }
}

/// Words that name a finding kind.
pub fn kind_words() -> [&'static str; 3] {
    FindingKind::ALL.map(|k| k.word())
}
