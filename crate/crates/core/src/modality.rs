use std::fmt;

/// The three sensing modalities. Every per-modality structure is ordered R, N, T.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Visible RGB.
    R,
    /// Near infrared.
    N,
    /// Thermal infrared.
    T,
}

pub const NUM_MODALITIES: usize = 3;

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::R, Modality::N, Modality::T];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::R => "R",
            Modality::N => "N",
            Modality::T => "T",
        }
    }

    /// The other modalities in canonical order.
    pub fn others(self) -> impl Iterator<Item = Modality> {
        Self::ALL.into_iter().filter(move |&m| m != self)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}
