//! Shipped populations.
//!
//! Attributes live in fixed coordinate blocks: age in dims 0-1, gender in
//! dims 2-3, race in dims 4-5; the remaining dims are shared unit noise.
//! Every component has unit variance, so a separation is measured in
//! component standard deviations. Two-class attributes sit at `±sep/2`
//! along the block diagonal; the three race classes sit on an equilateral
//! triangle with side `sep`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{build_population, Attribute, ComponentEntry, LabelEntry, Population, PopulationFile};
use crate::error::{Error, Result};

pub const MIN_GRID_DIMENSION: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Separations {
    pub age: f64,
    pub gender: f64,
    pub race: f64,
}

impl Separations {
    pub fn get(&self, attribute: Attribute) -> f64 {
        match attribute {
            Attribute::Age => self.age,
            Attribute::Gender => self.gender,
            Attribute::Race => self.race,
        }
    }
}

impl Default for Separations {
    /// age > gender > race.
    fn default() -> Self {
        Separations {
            age: 8.0,
            gender: 5.0,
            race: 3.0,
        }
    }
}

/// Optional overrides applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PresetParams {
    pub dimension: Option<usize>,
    pub age_weights: Option<Vec<f64>>,
    pub gender_weights: Option<Vec<f64>>,
    pub race_weights: Option<Vec<f64>>,
    pub separation: Option<Separations>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 12-component age x gender x race grid, uniform weights.
    Balanced,
    /// 12-component grid with skewed marginals (nominal values).
    FairfaceLike,
    /// Two gender components, weights (0.7, 0.3), separation 10.
    GenderImbalanced,
    /// Three race components, weights (0.5, 0.3, 0.2), separation 10.
    RaceImbalanced,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Preset::Balanced),
            "fairface-like" => Ok(Preset::FairfaceLike),
            "gender-imbalanced" => Ok(Preset::GenderImbalanced),
            "race-imbalanced" => Ok(Preset::RaceImbalanced),
            other => Err(Error::config(
                "population.preset",
                format!(
                    "unknown preset `{other}` (expected balanced, fairface-like, \
                     gender-imbalanced or race-imbalanced)"
                ),
            )),
        }
    }
}

/// Class offsets inside an attribute's two-dimensional block.
fn class_offset(attribute: Attribute, class: usize, sep: f64) -> [f64; 2] {
    match attribute.class_count() {
        2 => {
            let s = (class as f64 - 0.5) * sep / std::f64::consts::SQRT_2;
            [s, s]
        }
        _ => {
            let radius = sep / 3f64.sqrt();
            let angle = std::f64::consts::FRAC_PI_2 + class as f64 * 2.0 * std::f64::consts::PI / 3.0;
            [radius * angle.cos(), radius * angle.sin()]
        }
    }
}

fn check_weights(key: &str, weights: &[f64], classes: usize) -> Result<()> {
    if weights.len() != classes {
        return Err(Error::config(
            key,
            format!("expected {classes} weights, got {}", weights.len()),
        ));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config(key, "weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        let shown = (sum * 1e12).round() / 1e12;
        return Err(Error::config(key, format!("weights sum to {shown}")));
    }
    Ok(())
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Balanced => "balanced",
            Preset::FairfaceLike => "fairface-like",
            Preset::GenderImbalanced => "gender-imbalanced",
            Preset::RaceImbalanced => "race-imbalanced",
        }
    }

    fn default_weights(self, attribute: Attribute) -> Vec<f64> {
        let uniform = vec![1.0 / attribute.class_count() as f64; attribute.class_count()];
        match (self, attribute) {
            (Preset::FairfaceLike, Attribute::Age) => vec![0.75, 0.25],
            (Preset::FairfaceLike, Attribute::Gender) => vec![0.53, 0.47],
            (Preset::FairfaceLike, Attribute::Race) => vec![0.45, 0.15, 0.40],
            (Preset::GenderImbalanced, Attribute::Gender) => vec![0.7, 0.3],
            (Preset::RaceImbalanced, Attribute::Race) => vec![0.5, 0.3, 0.2],
            _ => uniform,
        }
    }

    fn default_separation(self) -> Separations {
        match self {
            Preset::Balanced | Preset::FairfaceLike => Separations::default(),
            Preset::GenderImbalanced | Preset::RaceImbalanced => Separations {
                age: 8.0,
                gender: 10.0,
                race: 10.0,
            },
        }
    }

    /// Attributes that vary across this preset's components.
    fn varying(self) -> &'static [Attribute] {
        match self {
            Preset::Balanced | Preset::FairfaceLike => &Attribute::ALL,
            Preset::GenderImbalanced => &[Attribute::Gender],
            Preset::RaceImbalanced => &[Attribute::Race],
        }
    }

    pub fn describe(self, params: &PresetParams) -> Result<PopulationFile> {
        let d = params.dimension.unwrap_or(8);
        if d < MIN_GRID_DIMENSION {
            return Err(Error::config(
                "population.dimension",
                format!("presets need at least {MIN_GRID_DIMENSION} dimensions, got {d}"),
            ));
        }
        let sep = params.separation.unwrap_or_else(|| self.default_separation());
        let weights_for = |attr: Attribute| -> Result<Vec<f64>> {
            let (key, given) = match attr {
                Attribute::Age => ("population.age_weights", &params.age_weights),
                Attribute::Gender => ("population.gender_weights", &params.gender_weights),
                Attribute::Race => ("population.race_weights", &params.race_weights),
            };
            let w = given.clone().unwrap_or_else(|| self.default_weights(attr));
            check_weights(key, &w, attr.class_count())?;
            Ok(w)
        };
        let varying = self.varying();
        let mut class_weights = Vec::new();
        for attr in Attribute::ALL {
            if varying.contains(&attr) {
                class_weights.push(weights_for(attr)?);
            } else {
                class_weights.push(vec![1.0]);
            }
        }

        let mut components = Vec::new();
        for a in 0..class_weights[0].len() {
            for g in 0..class_weights[1].len() {
                for r in 0..class_weights[2].len() {
                    let classes = [a, g, r];
                    let mut mean = vec![0.0; d];
                    let mut weight = 1.0;
                    for (slot, attr) in Attribute::ALL.into_iter().enumerate() {
                        weight *= class_weights[slot][classes[slot]];
                        if varying.contains(&attr) {
                            let off = class_offset(attr, classes[slot], sep.get(attr));
                            mean[2 * slot] = off[0];
                            mean[2 * slot + 1] = off[1];
                        }
                    }
                    components.push(ComponentEntry {
                        mean,
                        cov_diag: vec![1.0; d],
                        weight,
                        labels: LabelEntry {
                            age: Some(a),
                            gender: Some(g),
                            race: Some(r),
                        },
                    });
                }
            }
        }
        Ok(PopulationFile {
            dimension: d,
            components,
        })
    }

    pub fn build(self, params: &PresetParams) -> Result<Population> {
        build_population(&self.describe(params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn grid_geometry_matches_separations() {
        let pop = Preset::Balanced.build(&PresetParams::default()).unwrap();
        let c = pop.components();
        let find = |a, g, r| {
            c.iter()
                .find(|s| s.labels == super::super::Labels::new(a, g, r))
                .unwrap()
        };
        assert!((dist(&find(0, 0, 0).mean, &find(1, 0, 0).mean) - 8.0).abs() < 1e-12);
        assert!((dist(&find(0, 0, 0).mean, &find(0, 1, 0).mean) - 5.0).abs() < 1e-12);
        assert!((dist(&find(0, 0, 0).mean, &find(0, 0, 1).mean) - 3.0).abs() < 1e-12);
        assert!((dist(&find(0, 0, 1).mean, &find(0, 0, 2).mean) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn weight_overrides_flow_into_marginals() {
        let params = PresetParams {
            gender_weights: Some(vec![0.53, 0.47]),
            ..Default::default()
        };
        let pop = Preset::Balanced.build(&params).unwrap();
        let g = pop.attribute_marginal(Attribute::Gender);
        assert!((g[0] - 0.53).abs() < 1e-12 && (g[1] - 0.47).abs() < 1e-12);

        let bad = PresetParams {
            gender_weights: Some(vec![0.7, 0.2]),
            ..Default::default()
        };
        let err = Preset::Balanced.build(&bad).unwrap_err();
        assert!(err.to_string().contains("population.gender_weights"));
    }

    #[test]
    fn single_attribute_presets() {
        let g = Preset::GenderImbalanced.build(&PresetParams::default()).unwrap();
        assert_eq!(g.components().len(), 2);
        assert_eq!(g.active_attributes(), vec![Attribute::Gender]);
        let r = Preset::RaceImbalanced.build(&PresetParams::default()).unwrap();
        assert_eq!(r.attribute_marginal(Attribute::Race), vec![0.5, 0.3, 0.2]);
        assert_eq!(r.active_attributes(), vec![Attribute::Race]);
    }
}
