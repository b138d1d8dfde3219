pub mod dataset;
pub mod synthetic;

pub use dataset::{read_dataset, write_dataset, DatasetMeta, PanelDataset};
pub use synthetic::{generate_scenario, simulate, CityScenario, ScenarioOverrides};
