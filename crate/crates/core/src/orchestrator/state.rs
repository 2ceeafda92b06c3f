//! Project lifecycle states and the transition table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjectStatus {
    New,
    Cloning,
    Planning,
    Building,
    Ready,
    Running,
    Stopped,
    Failed,
    Deleted,
}

use ProjectStatus::*;

impl ProjectStatus {
    pub const ALL: [ProjectStatus; 9] = [New, Cloning, Planning, Building, Ready, Running, Stopped, Failed, Deleted];

    /// Still working through the create pipeline.
    pub fn is_in_flight(self) -> bool {
        matches!(self, New | Cloning | Planning | Building)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            New => "New",
            Cloning => "Cloning",
            Planning => "Planning",
            Building => "Building",
            Ready => "Ready",
            Running => "Running",
            Stopped => "Stopped",
            Failed => "Failed",
            Deleted => "Deleted",
        }
    }
}

impl fmt::Display for ProjectStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProjectStatus::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown status {s:?}"))
    }
}

/// Every edge the orchestrator may take.
///
/// Beyond the pipeline and start/stop cycles: every pre-build phase may fail,
/// and a crash recovered on reload fails in-flight projects and stops running
/// ones.
pub fn transition_allowed(from: ProjectStatus, to: ProjectStatus) -> bool {
    matches!(
        (from, to),
        (New, Cloning)
            | (Cloning, Planning)
            | (Planning, Building)
            | (Building, Ready)
            | (New | Cloning | Planning | Building, Failed)
            | (Ready | Stopped, Running)
            | (Running, Stopped)
            | (Ready | Stopped | Failed, Deleted)
    )
}
