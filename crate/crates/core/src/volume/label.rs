use super::{Grid, Result, VolumeError};

/// Anatomical label alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Femur = 1,
    Tibia = 2,
    Patella = 3,
    Fibula = 4,
}

impl Label {
    pub const COUNT: usize = 5;
    pub const ALL: [Label; 5] = [
        Label::Background,
        Label::Femur,
        Label::Tibia,
        Label::Patella,
        Label::Fibula,
    ];

    pub fn from_u8(v: u8) -> Option<Label> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Femur => "femur",
            Label::Tibia => "tibia",
            Label::Patella => "patella",
            Label::Fibula => "fibula",
        }
    }

    pub fn from_name(name: &str) -> Option<Label> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(name))
    }
}

/// Integer label grid over [`Label`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                expected: grid.len(),
                got: labels.len(),
            });
        }
        if let Some(i) = labels.iter().position(|&v| v as usize >= Label::COUNT) {
            return Err(VolumeError::BadLabel {
                value: labels[i] as i64,
                index: i,
            });
        }
        Ok(Self { grid, labels })
    }

    pub fn background(grid: Grid) -> Self {
        Self {
            labels: vec![0; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Label {
        Label::from_u8(self.labels[self.grid.linear(i, j, k)]).expect("validated label")
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, label: Label) {
        let idx = self.grid.linear(i, j, k);
        self.labels[idx] = label as u8;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&v| v == label as u8).count()
    }

    /// Binary indicator (1.0 inside `label`) as a real volume on the same grid.
    pub fn indicator(&self, label: Label) -> super::Volume {
        let data = self
            .labels
            .iter()
            .map(|&v| if v == label as u8 { 1.0 } else { 0.0 })
            .collect();
        super::Volume::new(self.grid, data).expect("indicator is finite")
    }
}

/// Dice overlap `2|A∩B| / (|A|+|B|)` of one label; 1.0 when absent from both.
pub fn dice_score(a: &LabelVolume, b: &LabelVolume, label: Label) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(VolumeError::GridMismatch(a.dims(), b.dims()));
    }
    let l = label as u8;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == l, y == l);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}
