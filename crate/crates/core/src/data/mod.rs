//! Model specification, respondent/scenario tables and threshold expansion.

pub mod dataset;
pub mod scenario;
pub mod spec;

pub use dataset::{load_dataset, load_dataset_dir, read_dataset, validate, write_dataset, ChoiceScenario, Dataset, Respondent};
pub use scenario::{expand_scenarios, ScenarioGrid};
pub use spec::ModelSpec;
