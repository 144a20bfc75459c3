//! Versioned JSON checkpoints for teacher and student networks.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Arch, DualTimeVelocityNet, ParamRecord, ParamStore, VelocityNet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub arch: Arch,
    pub params: IndexMap<String, ParamRecord>,
    pub seed: u64,
    #[serde(default)]
    pub train_meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub enum Model {
    Teacher(VelocityNet),
    Student(DualTimeVelocityNet),
}

impl Checkpoint {
    pub fn from_teacher(net: &VelocityNet, seed: u64, train_meta: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Teacher,
            arch: net.arch().clone(),
            params: net.params().to_records(),
            seed,
            train_meta,
        }
    }

    pub fn from_student(
        net: &DualTimeVelocityNet,
        seed: u64,
        train_meta: serde_json::Value,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Student,
            arch: net.arch().clone(),
            params: net.params().to_records(),
            seed,
            train_meta,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn store(&self) -> Result<ParamStore> {
        ParamStore::from_records(self.params.clone())
    }

    pub fn to_teacher(&self) -> Result<VelocityNet> {
        if self.kind != ModelKind::Teacher {
            return Err(Error::Validation(format!(
                "expected a teacher checkpoint, found {}",
                self.kind
            )));
        }
        VelocityNet::from_parts(self.arch.clone(), self.store()?)
    }

    pub fn to_student(&self) -> Result<DualTimeVelocityNet> {
        if self.kind != ModelKind::Student {
            return Err(Error::Validation(format!(
                "expected a student checkpoint, found {}",
                self.kind
            )));
        }
        DualTimeVelocityNet::from_parts(self.arch.clone(), self.store()?)
    }

    pub fn to_model(&self) -> Result<Model> {
        match self.kind {
            ModelKind::Teacher => self.to_teacher().map(Model::Teacher),
            ModelKind::Student => self.to_student().map(Model::Student),
        }
    }
}
