//! Integrated diagnosis labels and their fixed molecular implications.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Idh {
    Wildtype,
    Mutant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Codeletion {
    Intact,
    Codeleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pathology {
    Oligodendroglioma,
    Astrocytoma,
    Glioblastoma,
}

impl Pathology {
    pub const ALL: [Pathology; 3] = [
        Pathology::Oligodendroglioma,
        Pathology::Astrocytoma,
        Pathology::Glioblastoma,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// The three prediction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Idh,
    Codel,
    Pathology,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Idh, Task::Codel, Task::Pathology];

    pub fn num_classes(self) -> usize {
        match self {
            Task::Idh | Task::Codel => 2,
            Task::Pathology => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Idh => "idh",
            Task::Codel => "codel",
            Task::Pathology => "pathology",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelSet {
    pub idh: Idh,
    pub codel: Codeletion,
    pub pathology: Pathology,
}

/// Molecular status implied by a histological category.
pub fn label_from_pathology(pathology: Pathology) -> (Idh, Codeletion) {
    match pathology {
        Pathology::Oligodendroglioma => (Idh::Mutant, Codeletion::Codeleted),
        Pathology::Astrocytoma => (Idh::Mutant, Codeletion::Intact),
        Pathology::Glioblastoma => (Idh::Wildtype, Codeletion::Intact),
    }
}

impl LabelSet {
    pub fn from_pathology(pathology: Pathology) -> Self {
        let (idh, codel) = label_from_pathology(pathology);
        Self { idh, codel, pathology }
    }

    /// Whether the three labels respect the category implications.
    pub fn is_consistent(&self) -> bool {
        label_from_pathology(self.pathology) == (self.idh, self.codel)
    }

    /// Class index for `task`; positive class is 1 for the binary tasks.
    pub fn class(&self, task: Task) -> usize {
        match task {
            Task::Idh => (self.idh == Idh::Mutant) as usize,
            Task::Codel => (self.codel == Codeletion::Codeleted) as usize,
            Task::Pathology => self.pathology.index(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_implications() {
        assert_eq!(
            label_from_pathology(Pathology::Oligodendroglioma),
            (Idh::Mutant, Codeletion::Codeleted)
        );
        assert_eq!(label_from_pathology(Pathology::Astrocytoma), (Idh::Mutant, Codeletion::Intact));
        assert_eq!(
            label_from_pathology(Pathology::Glioblastoma),
            (Idh::Wildtype, Codeletion::Intact)
        );
    }

    #[test]
    fn class_indices() {
        let l = LabelSet::from_pathology(Pathology::Oligodendroglioma);
        assert_eq!(l.class(Task::Idh), 1);
        assert_eq!(l.class(Task::Codel), 1);
        assert_eq!(l.class(Task::Pathology), 0);
        let bad = LabelSet {
            idh: Idh::Wildtype,
            ..l
        };
        assert!(!bad.is_consistent());
    }
}
