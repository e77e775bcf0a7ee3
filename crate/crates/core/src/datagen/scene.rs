//! Procedural single-channel "radiographs".

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FindingKind {
    Opacity,
    Effusion,
    Device,
}

impl FindingKind {
    pub const ALL: [FindingKind; 3] = [FindingKind::Opacity, FindingKind::Effusion, FindingKind::Device];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            FindingKind::Opacity => "opacity",
            FindingKind::Effusion => "effusion",
            FindingKind::Device => "device",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub right: bool,
    pub lower: bool,
}

impl Location {
    pub const ALL: [Location; 4] = [
        Location { right: false, lower: false },
        Location { right: true, lower: false },
        Location { right: false, lower: true },
        Location { right: true, lower: true },
    ];

    pub fn side(self) -> &'static str {
        if self.right {
            "right"
        } else {
            "left"
        }
    }

    pub fn zone(self) -> &'static str {
        if self.lower {
            "lower"
        } else {
            "upper"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn word(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }

    fn level(self) -> f64 {
        match self {
            Severity::Mild => 0.0,
            Severity::Moderate => 1.0,
            Severity::Severe => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub location: Location,
    pub severity: Severity,
}

/// A soft Gaussian blob standing in for normal anatomy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub row: f64,
    pub col: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Rendering parameters shared by all scenes of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub noise_sigma: f64,
    pub max_blobs: usize,
    /// Added intensity of a mild finding; each severity step adds `intensity_step`.
    pub finding_intensity: f64,
    pub intensity_step: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            background: 0.25,
            noise_sigma: 0.08,
            max_blobs: 3,
            finding_intensity: 0.25,
            intensity_step: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub blobs: Vec<Blob>,
    pub findings: Vec<Finding>,
    /// Geometry jitter for each finding, drawn once so rendering is pure.
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Offsets in `[0,1)` inside the finding's quadrant.
    pub u: f64,
    pub v: f64,
    pub angle: f64,
}

impl SceneSpec {
    /// Draws a scene. Abnormal scenes get 1-3 findings at distinct
    /// locations.
    pub fn sample<R: Rng + ?Sized>(cfg: &SceneConfig, abnormal: bool, rng: &mut R) -> Self {
        let n_blobs = rng.random_range(0..=cfg.max_blobs);
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                row: rng.random_range(0.0..cfg.height as f64),
                col: rng.random_range(0.0..cfg.width as f64),
                sigma: rng.random_range(1.5..3.5),
                amplitude: rng.random_range(0.08..0.22),
            })
            .collect();
        let mut findings = Vec::new();
        let mut placements = Vec::new();
        if abnormal {
            let r: f64 = rng.random();
            let count = if r < 0.6 {
                1
            } else if r < 0.9 {
                2
            } else {
                3
            };
            let mut locs = Location::ALL.to_vec();
            for _ in 0..count {
                let li = rng.random_range(0..locs.len());
                let location = locs.swap_remove(li);
                let kind = FindingKind::ALL[rng.random_range(0..3)];
                let severity = Severity::ALL[rng.random_range(0..3)];
                findings.push(Finding {
                    kind,
                    location,
                    severity,
                });
                placements.push(Placement {
                    u: rng.random(),
                    v: rng.random(),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                });
            }
        }
        Self {
            blobs,
            findings,
            placements,
        }
    }

    pub fn is_abnormal(&self) -> bool {
        !self.findings.is_empty()
    }

    /// Renders to 8-bit gray levels, row-major.
    pub fn render<R: Rng + ?Sized>(&self, cfg: &SceneConfig, rng: &mut R) -> Vec<u8> {
        let (h, w) = (cfg.height, cfg.width);
        let mut img = vec![cfg.background; h * w];
        for b in &self.blobs {
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - b.row).powi(2) + (c as f64 - b.col).powi(2);
                    img[r * w + c] += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
            }
        }
        for (f, p) in self.findings.iter().zip(&self.placements) {
            draw_finding(&mut img, cfg, f, p);
        }
        if cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
            img.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        img.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn draw_finding(img: &mut [f64], cfg: &SceneConfig, f: &Finding, p: &Placement) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let (qh, qw) = (h / 2.0, w / 2.0);
    let r0 = if f.location.lower { qh } else { 0.0 };
    let c0 = if f.location.right { qw } else { 0.0 };
    let sev = f.severity.level();
    let amp = cfg.finding_intensity + cfg.intensity_step * sev;
    let scale = qh.min(qw) / 16.0;
    let mut paint = |coverage: &dyn Fn(f64, f64) -> f64| {
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let a = coverage(y, x);
                if a > 0.0 {
                    img[r * cfg.width + c] += amp * a;
                }
            }
        }
    };
    match f.kind {
        FindingKind::Opacity => {
            let radius = (2.5 + sev) * scale;
            let margin = radius + 1.0;
            let cy = r0 + margin + p.u * (qh - 2.0 * margin).max(0.0);
            let cx = c0 + margin + p.v * (qw - 2.0 * margin).max(0.0);
            paint(&|y, x| {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                (radius + 0.5 - d).clamp(0.0, 1.0)
            });
        }
        FindingKind::Effusion => {
            // Right-angle wedge in the quadrant's bottom outer corner.
            let leg = (6.0 + 2.0 * sev + 2.0 * p.u) * scale;
            let bottom = r0 + qh;
            let outer = if f.location.right { w } else { 0.0 };
            paint(&|y, x| {
                if y < r0 || y > bottom {
                    return 0.0;
                }
                let d = (bottom - y) + (x - outer).abs();
                (leg + 0.5 - d).clamp(0.0, 1.0)
            });
        }
        FindingKind::Device => {
            let half = (3.0 + 1.0 * sev) * scale;
            let cy = r0 + qh * (0.3 + 0.4 * p.u);
            let cx = c0 + qw * (0.3 + 0.4 * p.v);
            let (dy, dx) = (p.angle.sin(), p.angle.cos());
            paint(&|y, x| {
                let (ry, rx) = (y - cy, x - cx);
                let t = (ry * dy + rx * dx).clamp(-half, half);
                let dist = ((ry - t * dy).powi(2) + (rx - t * dx).powi(2)).sqrt();
                (1.2 - dist).clamp(0.0, 1.0)
            });
        }
    }
}
