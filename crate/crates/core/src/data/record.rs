use serde::{Deserialize, Serialize};

use crate::data::labels::LabelSet;

/// The two input sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sequence {
    Fl,
    T1c,
}

impl Sequence {
    pub const BOTH: [Sequence; 2] = [Sequence::Fl, Sequence::T1c];

    pub fn other(self) -> Self {
        match self {
            Sequence::Fl => Sequence::T1c,
            Sequence::T1c => Sequence::Fl,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sequence::Fl => "fl",
            Sequence::T1c => "t1c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Center {
    #[serde(rename = "TCGA")]
    Tcga,
    #[serde(rename = "BRATS")]
    Brats,
    #[serde(rename = "RJ")]
    Rj,
    #[serde(rename = "XH")]
    Xh,
    #[serde(rename = "TH")]
    Th,
    #[serde(rename = "HS")]
    Hs,
}

impl Center {
    pub const ALL: [Center; 6] = [
        Center::Tcga,
        Center::Brats,
        Center::Rj,
        Center::Xh,
        Center::Th,
        Center::Hs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Center::Tcga => "TCGA",
            Center::Brats => "BRATS",
            Center::Rj => "RJ",
            Center::Xh => "XH",
            Center::Th => "TH",
            Center::Hs => "HS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(s))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

/// One subject. At least one of the sequences is present.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub center: Center,
    pub fl: Option<Vec<f64>>,
    pub t1c: Option<Vec<f64>>,
    pub labels: LabelSet,
}

impl SampleRecord {
    pub fn is_complete(&self) -> bool {
        self.fl.is_some() && self.t1c.is_some()
    }

    pub fn has(&self, seq: Sequence) -> bool {
        self.get(seq).is_some()
    }

    pub fn get(&self, seq: Sequence) -> Option<&Vec<f64>> {
        match seq {
            Sequence::Fl => self.fl.as_ref(),
            Sequence::T1c => self.t1c.as_ref(),
        }
    }
}
