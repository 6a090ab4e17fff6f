use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dims, Spacing};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    /// millimeters
    pub position: [f64; 3],
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    name: String,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

/// Named points in millimeters; names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate landmark name {:?}", p.name)));
            }
            if p.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("landmark {:?} has a non-finite position", p.name)));
            }
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[Landmark] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Landmark> {
        self.points.iter().find(|p| p.name == name)
    }

    /// Fails if any point lies outside `[0, (dim − 1)·spacing]` on some axis.
    pub fn check_bounds(&self, dims: Dims, spacing: Spacing) -> Result<()> {
        for p in &self.points {
            for a in 0..3 {
                let hi = (dims[a] as f64 - 1.0) * spacing[a];
                if p.position[a] < 0.0 || p.position[a] > hi {
                    return Err(Error::Invalid(format!(
                        "landmark {:?} lies outside the volume on axis {a}",
                        p.name
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if headers.iter().collect::<Vec<_>>() != ["name", "x_mm", "y_mm", "z_mm"] {
        return Err(Error::Format(format!(
            "{}: header row must be name,x_mm,y_mm,z_mm",
            path.display()
        )));
    }
    let mut points = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        points.push(Landmark {
            name: row.name,
            position: [row.x_mm, row.y_mm, row.z_mm],
        });
    }
    LandmarkSet::new(points)
}

pub fn write_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_writer(Vec::new());
    for p in set.points() {
        writer
            .serialize(Row {
                name: p.name.clone(),
                x_mm: p.position[0],
                y_mm: p.position[1],
                z_mm: p.position[2],
            })
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if set.is_empty() {
        writer
            .write_record(["name", "x_mm", "y_mm", "z_mm"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
