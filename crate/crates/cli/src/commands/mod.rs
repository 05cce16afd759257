pub mod generate;
pub mod grid;
pub mod report;
pub mod run;
pub mod sidecar;
