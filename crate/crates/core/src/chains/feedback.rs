use std::fmt;

use serde::Serialize;

use crate::pool::{Score, Thresholds};

/// One axis of the selection gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Strength,
    Consistency,
    Efficiency,
    Diversity,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Strength,
        Dimension::Consistency,
        Dimension::Efficiency,
        Dimension::Diversity,
    ];

    /// Relative distance from the threshold; negative when failing.
    fn margin(self, s: &Score, t: &Thresholds) -> f64 {
        let rel = |excess: f64, scale: f64| excess / scale.abs().max(1e-12);
        match self {
            Dimension::Strength => rel(s.strength - t.min_strength, t.min_strength),
            Dimension::Consistency => rel(s.consistency - t.min_consistency, t.min_consistency),
            Dimension::Efficiency => rel(t.max_efficiency - s.efficiency, t.max_efficiency),
            Dimension::Diversity => rel(s.diversity - t.min_diversity, t.min_diversity),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Strength => "strength",
            Dimension::Consistency => "consistency",
            Dimension::Efficiency => "turnover",
            Dimension::Diversity => "diversity",
        })
    }
}

/// An effective pool member whose signal tracks the candidate closely.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlated {
    pub expr_text: String,
    /// Mean daily Spearman correlation with the candidate.
    pub correlation: f64,
}

/// Score plus the guidance rendered into the next optimization prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedbackSummary {
    pub score: Score,
    pub thresholds: Thresholds,
    /// Failing dimensions, worst first; the single closest one when none fail.
    pub weakest_dimensions: Vec<Dimension>,
    pub correlated: Vec<Correlated>,
    pub directive_text: String,
}

impl FeedbackSummary {
    pub fn new(score: Score, thresholds: Thresholds, correlated: Vec<Correlated>) -> Self {
        let mut ranked: Vec<(Dimension, f64)> = Dimension::ALL
            .iter()
            .map(|d| (*d, d.margin(&score, &thresholds)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let failing: Vec<Dimension> = ranked
            .iter()
            .filter(|(_, m)| *m < 0.0)
            .map(|(d, _)| *d)
            .collect();
        let passing = failing.is_empty();
        let weakest_dimensions = if passing {
            vec![ranked[0].0]
        } else {
            failing
        };
        let mut lines = Vec::new();
        if passing {
            lines.push(format!(
                "All criteria are met. The tightest one is {}; keep it from slipping while you refine.",
                weakest_dimensions[0]
            ));
        }
        for d in &weakest_dimensions {
            lines.push(directive(*d, &score, &thresholds, &correlated));
        }
        Self {
            score,
            thresholds,
            weakest_dimensions,
            correlated,
            directive_text: lines.join("\n"),
        }
    }

    pub fn passes(&self) -> bool {
        crate::pool::check(&self.score, &self.thresholds)
    }
}

fn directive(d: Dimension, s: &Score, t: &Thresholds, correlated: &[Correlated]) -> String {
    match d {
        Dimension::Strength => format!(
            "- Strengthen the predictive signal: mean RankIC is {:.4} against a minimum of {}. \
             Emphasise the component most related to future returns or combine complementary \
             fields; if the factor points the wrong way, negate it.",
            s.strength, t.min_strength
        ),
        Dimension::Consistency => format!(
            "- Improve temporal stability: RankICIR is {:.4} against a minimum of {}. \
             Reduce day-to-day noise, for example by normalising with a rolling dispersion \
             or ranking the inputs over a window.",
            s.consistency, t.min_consistency
        ),
        Dimension::Efficiency => format!(
            "- Smooth the signal: turnover is {:.4} against a maximum of {}. \
             Prefer longer lookbacks or moving averages so the daily ranking changes slowly.",
            s.efficiency, t.max_efficiency
        ),
        Dimension::Diversity => {
            let mut text = format!(
                "- Differentiate from existing factors: diversity is {:.4} against a minimum of {}.",
                s.diversity, t.min_diversity
            );
            if !correlated.is_empty() {
                text.push_str(" The candidate is most correlated with:");
                for c in correlated {
                    text.push_str(&format!("\n    {} (correlation {:.3})", c.expr_text, c.correlation));
                }
            }
            text
        }
    }
}
