use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Foreground object categories. The discriminant is the label id used by
/// the assignment, loss and file-format code (0 is reserved for background).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car = 1,
    Pedestrian = 2,
    Cyclist = 3,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(ObjectClass::Car),
            2 => Some(ObjectClass::Pedestrian),
            3 => Some(ObjectClass::Cyclist),
            _ => None,
        }
    }

    /// Zero-based position in [`ObjectClass::ALL`].
    pub fn index(self) -> usize {
        self as usize - 1
    }

    /// KITTI `type` column spelling.
    pub fn kitti_name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    /// Canonical (length, width, height) in meters.
    pub fn canonical_dims(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [3.9, 1.6, 1.56],
            ObjectClass::Pedestrian => [0.8, 0.6, 1.73],
            ObjectClass::Cyclist => [1.76, 0.6, 1.73],
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kitti_name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "car" | "1" => Ok(ObjectClass::Car),
            "pedestrian" | "ped" | "2" => Ok(ObjectClass::Pedestrian),
            "cyclist" | "cyc" | "3" => Ok(ObjectClass::Cyclist),
            _ => Err(Error::UnknownClass(s.to_string())),
        }
    }
}
