//! Synthetic cohort, dataset file format and the train/test split protocol.

pub mod cohort;
pub mod io;
pub mod labels;
pub mod record;
pub mod split;

pub use cohort::{generate_cohort, CenterSpec, CohortConfig};
pub use io::{read_dataset, write_dataset, DatasetHeader, SCHEMA_VERSION};
pub use labels::{label_from_pathology, Codeletion, Idh, LabelSet, Pathology, Task};
pub use record::{Center, SampleRecord, Sequence};
pub use split::{split_cohort, ExpansionReport, Mode, SplitConfig, SplitPlan};
