use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::Polyline;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "S1_left_turn")]
    S1LeftTurn,
    #[serde(rename = "S2_right_turn")]
    S2RightTurn,
    #[serde(rename = "S3_crossing")]
    S3Crossing,
    #[serde(rename = "S4_highway_exit")]
    S4HighwayExit,
    #[serde(rename = "S5_onramp_merge")]
    S5OnrampMerge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::S1LeftTurn,
        TemplateId::S2RightTurn,
        TemplateId::S3Crossing,
        TemplateId::S4HighwayExit,
        TemplateId::S5OnrampMerge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::S1LeftTurn => "S1_left_turn",
            TemplateId::S2RightTurn => "S2_right_turn",
            TemplateId::S3Crossing => "S3_crossing",
            TemplateId::S4HighwayExit => "S4_highway_exit",
            TemplateId::S5OnrampMerge => "S5_onramp_merge",
        }
    }

    pub fn short(self) -> &'static str {
        &self.name()[..2]
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    /// Accepts the full name (`S3_crossing`) or the short tag (`S3`, `s3`).
    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| s == t.name() || s.eq_ignore_ascii_case(t.short()))
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpcScript {
    pub route: Vec<(f64, f64)>,
    pub spawn_time: f64,
    pub target_speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_profile: Option<Vec<(f64, f64)>>,
    /// `(length, width)` in meters.
    pub dimensions: (f64, f64),
}

impl NpcScript {
    /// Scheduled speed at absolute simulation time `t`: linear interpolation
    /// from `(spawn_time, target_speed)` through the profile breakpoints,
    /// holding the last value afterwards.
    pub fn speed_at(&self, t: f64) -> f64 {
        let Some(profile) = self.speed_profile.as_deref().filter(|p| !p.is_empty()) else {
            return self.target_speed;
        };
        let mut prev = (self.spawn_time, self.target_speed);
        for &(bt, bv) in profile {
            if t < bt {
                if bt <= prev.0 || t <= prev.0 {
                    return prev.1;
                }
                let f = (t - prev.0) / (bt - prev.0);
                return prev.1 + f * (bv - prev.1);
            }
            prev = (bt, bv);
        }
        prev.1
    }

    fn validate(&self, k: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(format!("npc {k}: {msg}")));
        if Polyline::new(self.route.clone()).is_none() {
            return bad("route needs at least 2 distinct, finite consecutive points".into());
        }
        if !(self.spawn_time >= 0.0 && self.spawn_time.is_finite()) {
            return bad(format!("spawn_time {} must be >= 0", self.spawn_time));
        }
        if !(self.target_speed >= 0.0 && self.target_speed.is_finite()) {
            return bad(format!("target_speed {} must be >= 0", self.target_speed));
        }
        let (l, w) = self.dimensions;
        if !(l > 0.0 && w > 0.0 && l.is_finite() && w.is_finite()) {
            return bad(format!("dimensions ({l}, {w}) must be positive"));
        }
        if let Some(p) = &self.speed_profile {
            if p.iter().any(|&(t, v)| !t.is_finite() || !(v >= 0.0 && v.is_finite())) {
                return bad("speed profile breakpoints must be finite with speed >= 0".into());
            }
            if p.windows(2).any(|w| w[1].0 <= w[0].0) {
                return bad("speed profile times must be strictly increasing".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub template_id: TemplateId,
    pub ego_route: Vec<(f64, f64)>,
    pub ego_start_speed: f64,
    pub destination_radius: f64,
    pub time_budget: f64,
    pub seed: u64,
    #[serde(default)]
    pub npcs: Vec<NpcScript>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if Polyline::new(self.ego_route.clone()).is_none() {
            return Err(Error::InvalidScenario(
                "ego_route needs at least 2 distinct, finite consecutive points".into(),
            ));
        }
        if !(self.time_budget > 0.0 && self.time_budget.is_finite()) {
            return Err(Error::InvalidScenario(format!("time_budget {} must be > 0", self.time_budget)));
        }
        if !(self.destination_radius > 0.0 && self.destination_radius.is_finite()) {
            return Err(Error::InvalidScenario(format!(
                "destination_radius {} must be > 0",
                self.destination_radius
            )));
        }
        if !(self.ego_start_speed >= 0.0 && self.ego_start_speed.is_finite()) {
            return Err(Error::InvalidScenario(format!(
                "ego_start_speed {} must be >= 0",
                self.ego_start_speed
            )));
        }
        for (k, npc) in self.npcs.iter().enumerate() {
            npc.validate(k)?;
        }
        Ok(())
    }

    /// Parses and validates a scenario document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::format("scenario", e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn straight(len: f64) -> Scenario {
        Scenario {
            template_id: TemplateId::S3Crossing,
            ego_route: vec![(0.0, 0.0), (len, 0.0)],
            ego_start_speed: 5.0,
            destination_radius: 2.0,
            time_budget: 30.0,
            seed: 1,
            npcs: vec![NpcScript {
                route: vec![(10.0, -20.0), (10.0, 20.0)],
                spawn_time: 0.5,
                target_speed: 4.0,
                speed_profile: Some(vec![(2.0, 6.0), (3.0, 0.0)]),
                dimensions: (4.5, 1.8),
            }],
        }
    }

    #[test]
    fn template_names() {
        assert_eq!("S3".parse::<TemplateId>().unwrap(), TemplateId::S3Crossing);
        assert_eq!("S5_onramp_merge".parse::<TemplateId>().unwrap(), TemplateId::S5OnrampMerge);
        assert!(matches!("S9".parse::<TemplateId>(), Err(Error::UnknownTemplate(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let s = straight(50.0);
        let text = s.to_toml();
        assert!(text.contains("template_id = \"S3_crossing\""));
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn invariants_are_checked() {
        let mut s = straight(50.0);
        s.ego_route = vec![(0.0, 0.0), (0.0, 0.0)];
        assert!(matches!(s.validate(), Err(Error::InvalidScenario(_))));
        let mut s = straight(50.0);
        s.time_budget = 0.0;
        assert!(s.validate().is_err());
        let mut s = straight(50.0);
        s.npcs[0].speed_profile = Some(vec![(2.0, 1.0), (2.0, 1.0)]);
        assert!(s.validate().is_err());
        let mut s = straight(50.0);
        s.npcs[0].spawn_time = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn speed_profile_interpolates() {
        let s = straight(50.0);
        let npc = &s.npcs[0];
        assert_eq!(npc.speed_at(0.0), 4.0);
        assert!((npc.speed_at(1.25) - 5.0).abs() < 1e-12);
        assert!((npc.speed_at(2.5) - 3.0).abs() < 1e-12);
        assert_eq!(npc.speed_at(10.0), 0.0);
    }
}
