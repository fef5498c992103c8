//! Small enums shared by the simulator, skills, planner and orchestrator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    /// End-effector frame in the bundled model.
    pub fn ee_frame(self) -> &'static str {
        match self {
            Side::Left => "ee_left",
            Side::Right => "ee_right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Table,
    Dishwasher,
    Cabinet,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Table, Location::Dishwasher, Location::Cabinet];

    pub fn as_str(self) -> &'static str {
        match self {
            Location::Table => "table",
            Location::Dishwasher => "dishwasher",
            Location::Cabinet => "cabinet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperCommand {
    Open,
    Close,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnknownName(pub String);

impl fmt::Display for UnknownName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown name '{}'", self.0)
    }
}

impl std::error::Error for UnknownName {}

macro_rules! name_enum {
    ($t:ty, $($s:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = UnknownName;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(UnknownName(other.to_string())),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $(v if *v == $v => $s,)+
                    _ => unreachable!(),
                };
                f.write_str(s)
            }
        }
    };
}

name_enum!(Side, "left" => Side::Left, "right" => Side::Right);
name_enum!(Location, "table" => Location::Table, "dishwasher" => Location::Dishwasher, "cabinet" => Location::Cabinet);
name_enum!(GripperCommand, "open" => GripperCommand::Open, "close" => GripperCommand::Close);
