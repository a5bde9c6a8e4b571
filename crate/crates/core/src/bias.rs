//! Community-level bias measurements.
//!
//! Position sensitivity is the fitted rank coefficient. The herding degree is
//! the geometric mean, over the scored votes, of the odds of agreeing with
//! the answer's prior majority: the up/down odds when the majority is
//! positive or tied, their inverse when it is negative.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CvaError, Result};
use crate::model::{training_events, vote_prob, CommunityModel};
use crate::trajectory::QuestionTrajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub community: String,
    pub position_sensitivity: f64,
    pub herding_degree: f64,
    pub n_events: usize,
    /// `(herding above median, position above median)`, set by
    /// [`map_coordinates`].
    #[serde(default)]
    pub median_flags: Option<(bool, bool)>,
}

/// Herding degree over the first-vote-dropped event set the model was
/// trained on. Returns the degree and the number of events scored.
pub fn herding_degree(model: &CommunityModel, trajs: &[QuestionTrajectory]) -> Result<(f64, usize)> {
    let events = training_events(trajs, true)?;
    if events.is_empty() {
        return Err(CvaError::NoTrainingEvents);
    }
    let terms = events
        .iter()
        .map(|e| {
            let q = model.quality(&e.question_id, &e.answer_id).ok_or_else(|| {
                CvaError::UnknownParameter(format!("q[{}][{}]", e.question_id, e.answer_id))
            })?;
            let p = vote_prob(&model.params(&e.question_id, q), &e.context);
            Ok((p, e.context.majority_positive()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((degree_from_probs(&terms)?, events.len()))
}

/// Geometric mean of the agree-with-majority odds, from
/// `(P(up), majority positive or tied)` pairs. Accumulated in log space.
pub fn degree_from_probs(terms: &[(f64, bool)]) -> Result<f64> {
    if terms.is_empty() {
        return Err(CvaError::NoTrainingEvents);
    }
    let log_sum: f64 = terms
        .iter()
        .map(|&(p, majority_positive)| {
            let log_odds = (p / (1.0 - p)).ln();
            if majority_positive {
                log_odds
            } else {
                -log_odds
            }
        })
        .sum();
    Ok((log_sum / terms.len() as f64).exp())
}

pub fn profile_community(
    community: &str,
    model: &CommunityModel,
    trajs: &[QuestionTrajectory],
) -> Result<BiasProfile> {
    let (herding_degree, n_events) = herding_degree(model, trajs)?;
    Ok(BiasProfile {
        community: community.to_string(),
        position_sensitivity: model.beta,
        herding_degree,
        n_events,
        median_flags: None,
    })
}

/// Profiles with quadrant flags plus the per-axis medians.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMap {
    pub profiles: Vec<BiasProfile>,
    pub median_herding: f64,
    pub median_position: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Place communities on the herding/position map. A value equal to the
/// median counts as not above it.
pub fn map_coordinates(profiles: &[BiasProfile]) -> Result<BiasMap> {
    if profiles.is_empty() {
        return Err(CvaError::InvalidInput("map needs at least one profile".into()));
    }
    let herding: Vec<f64> = profiles.iter().map(|p| p.herding_degree).collect();
    let position: Vec<f64> = profiles.iter().map(|p| p.position_sensitivity).collect();
    let (mh, mp) = (median(&herding), median(&position));
    let profiles = profiles
        .iter()
        .map(|p| BiasProfile {
            median_flags: Some((p.herding_degree > mh, p.position_sensitivity > mp)),
            ..p.clone()
        })
        .collect();
    Ok(BiasMap {
        profiles,
        median_herding: mh,
        median_position: mp,
    })
}

impl BiasMap {
    /// CSV with one row per community and a final `MEDIAN` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "community",
            "herding_degree",
            "position_sensitivity",
            "above_median_herding",
            "above_median_position",
        ])?;
        for p in &self.profiles {
            let (h, s) = p.median_flags.unwrap_or((false, false));
            w.write_record([
                p.community.clone(),
                p.herding_degree.to_string(),
                p.position_sensitivity.to_string(),
                h.to_string(),
                s.to_string(),
            ])?;
        }
        w.write_record([
            "MEDIAN".to_string(),
            self.median_herding.to_string(),
            self.median_position.to_string(),
            String::new(),
            String::new(),
        ])?;
        w.flush().map_err(|e| CvaError::io("<csv>", e))?;
        Ok(())
    }
}
