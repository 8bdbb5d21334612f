//! Role schema for multi-label body segmentations.
//!
//! A schema maps anatomical roles to label ids and is stored as a JSON sidecar:
//!
//! ```json
//! {"sat": 1, "abdominal_cavity": 2, "vertebra_L3": 7, "organs": {"liver": 10}}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KevsError, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Role {
    Sat,
    AbdominalCavity,
    /// Lumbar vertebra 1..=5.
    Vertebra(u8),
    Organ(String),
}

impl Role {
    pub fn lumbar() -> impl Iterator<Item = Role> {
        (1..=5).map(Role::Vertebra)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Sat => f.write_str("sat"),
            Role::AbdominalCavity => f.write_str("abdominal_cavity"),
            Role::Vertebra(k) => write!(f, "vertebra_L{k}"),
            Role::Organ(name) => write!(f, "organ:{name}"),
        }
    }
}

impl TryFrom<String> for Role {
    type Error = KevsError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Role> for String {
    fn from(r: Role) -> Self {
        r.to_string()
    }
}

impl FromStr for Role {
    type Err = KevsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sat" => Ok(Role::Sat),
            "abdominal_cavity" => Ok(Role::AbdominalCavity),
            _ => {
                if let Some(k) = s.strip_prefix("vertebra_L") {
                    if let Ok(k @ 1..=5) = k.parse::<u8>() {
                        return Ok(Role::Vertebra(k));
                    }
                } else if let Some(name) = s.strip_prefix("organ:") {
                    if !name.is_empty() {
                        return Ok(Role::Organ(name.to_string()));
                    }
                }
                Err(KevsError::Schema(format!("unrecognised role `{s}`")))
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct RawSchema {
    #[serde(skip_serializing_if = "Option::is_none")]
    sat: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    abdominal_cavity: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vertebra_L1: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vertebra_L2: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vertebra_L3: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vertebra_L4: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vertebra_L5: Option<u32>,
    #[serde(default)]
    organs: BTreeMap<String, u32>,
}

/// Injective mapping from roles to nonzero label ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct LabelSchema {
    roles: BTreeMap<Role, u32>,
}

impl TryFrom<RawSchema> for LabelSchema {
    type Error = KevsError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        let mut b = SchemaBuilder::default();
        let fixed = [
            (Role::Sat, raw.sat),
            (Role::AbdominalCavity, raw.abdominal_cavity),
            (Role::Vertebra(1), raw.vertebra_L1),
            (Role::Vertebra(2), raw.vertebra_L2),
            (Role::Vertebra(3), raw.vertebra_L3),
            (Role::Vertebra(4), raw.vertebra_L4),
            (Role::Vertebra(5), raw.vertebra_L5),
        ];
        for (role, id) in fixed {
            if let Some(id) = id {
                b = b.role(role, id);
            }
        }
        for (name, id) in raw.organs {
            b = b.organ(&name, id);
        }
        b.build()
    }
}

impl From<LabelSchema> for RawSchema {
    fn from(s: LabelSchema) -> Self {
        let mut raw = RawSchema::default();
        for (role, id) in s.roles {
            match role {
                Role::Sat => raw.sat = Some(id),
                Role::AbdominalCavity => raw.abdominal_cavity = Some(id),
                Role::Vertebra(1) => raw.vertebra_L1 = Some(id),
                Role::Vertebra(2) => raw.vertebra_L2 = Some(id),
                Role::Vertebra(3) => raw.vertebra_L3 = Some(id),
                Role::Vertebra(4) => raw.vertebra_L4 = Some(id),
                Role::Vertebra(_) => raw.vertebra_L5 = Some(id),
                Role::Organ(name) => {
                    raw.organs.insert(name, id);
                }
            }
        }
        raw
    }
}

impl LabelSchema {
    pub fn builder() -> SchemaBuilder {
        SchemaBuilder::default()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KevsError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| KevsError::io(path, e))
    }

    pub fn label(&self, role: &Role) -> Option<u32> {
        self.roles.get(role).copied()
    }

    pub fn require(&self, role: &Role) -> Result<u32> {
        self.label(role).ok_or_else(|| KevsError::MissingRole(role.to_string()))
    }

    pub fn organ_roles(&self) -> Vec<Role> {
        self.roles
            .keys()
            .filter(|r| matches!(r, Role::Organ(_)))
            .cloned()
            .collect()
    }

    /// Lumbar vertebra roles present in the schema, L1 first.
    pub fn lumbar_roles(&self) -> Vec<Role> {
        Role::lumbar().filter(|r| self.roles.contains_key(r)).collect()
    }

    pub fn roles(&self) -> impl Iterator<Item = (&Role, u32)> {
        self.roles.iter().map(|(r, &id)| (r, id))
    }

    /// Sorted label ids.
    pub fn label_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.roles.values().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Checks the roles the segmentation pipeline cannot run without.
    pub fn require_pipeline_roles(&self) -> Result<()> {
        for role in [Role::Sat, Role::AbdominalCavity, Role::Vertebra(3)] {
            self.require(&role)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct SchemaBuilder {
    entries: Vec<(Role, u32)>,
}

impl SchemaBuilder {
    pub fn role(mut self, role: Role, id: u32) -> Self {
        self.entries.push((role, id));
        self
    }

    pub fn sat(self, id: u32) -> Self {
        self.role(Role::Sat, id)
    }

    pub fn abdominal_cavity(self, id: u32) -> Self {
        self.role(Role::AbdominalCavity, id)
    }

    pub fn vertebra(self, level: u8, id: u32) -> Self {
        self.role(Role::Vertebra(level), id)
    }

    pub fn organ(self, name: &str, id: u32) -> Self {
        self.role(Role::Organ(name.to_string()), id)
    }

    pub fn build(self) -> Result<LabelSchema> {
        let mut roles = BTreeMap::new();
        let mut ids = BTreeMap::new();
        for (role, id) in self.entries {
            if let Role::Vertebra(k) = role {
                if !(1..=5).contains(&k) {
                    return Err(KevsError::Schema(format!("lumbar level {k} out of 1..=5")));
                }
            }
            if id == 0 {
                return Err(KevsError::Schema(format!("role {role} uses reserved background label 0")));
            }
            if let Some(other) = ids.insert(id, role.clone()) {
                return Err(KevsError::Schema(format!(
                    "label {id} assigned to both {other} and {role}"
                )));
            }
            if roles.insert(role.clone(), id).is_some() {
                return Err(KevsError::Schema(format!("role {role} assigned twice")));
            }
        }
        Ok(LabelSchema { roles })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_layout() {
        let s = LabelSchema::from_json_str(
            r#"{"sat": 1, "abdominal_cavity": 2, "vertebra_L3": 7, "organs": {"liver": 10, "spleen": 11}}"#,
        )
        .unwrap();
        assert_eq!(s.label(&Role::Sat), Some(1));
        assert_eq!(s.label(&Role::Vertebra(3)), Some(7));
        assert_eq!(s.label(&Role::Organ("spleen".into())), Some(11));
        assert_eq!(s.organ_roles().len(), 2);
        assert_eq!(s.lumbar_roles(), vec![Role::Vertebra(3)]);
        s.require_pipeline_roles().unwrap();
    }

    #[test]
    fn rejects_non_injective_and_background() {
        assert!(LabelSchema::from_json_str(r#"{"sat": 1, "abdominal_cavity": 1}"#).is_err());
        assert!(LabelSchema::from_json_str(r#"{"sat": 0}"#).is_err());
        assert!(LabelSchema::from_json_str(r#"{"sat": 1, "organs": {"a": 1}}"#).is_err());
        assert!(LabelSchema::from_json_str(r#"{"sat": 1, "bogus": 3}"#).is_err());
    }

    #[test]
    fn missing_pipeline_role_is_named() {
        let s = LabelSchema::from_json_str(r#"{"sat": 1, "abdominal_cavity": 2}"#).unwrap();
        let err = s.require_pipeline_roles().unwrap_err();
        assert!(err.to_string().contains("vertebra_L3"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let s = LabelSchema::builder()
            .sat(1)
            .abdominal_cavity(2)
            .vertebra(1, 3)
            .vertebra(5, 7)
            .organ("liver", 10)
            .build()
            .unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(LabelSchema::from_json_str(&text).unwrap(), s);
    }

    #[test]
    fn role_strings_round_trip() {
        for r in ["sat", "abdominal_cavity", "vertebra_L4", "organ:liver"] {
            assert_eq!(r.parse::<Role>().unwrap().to_string(), r);
        }
        assert!("vertebra_L6".parse::<Role>().is_err());
        assert!("organ:".parse::<Role>().is_err());
    }
}
