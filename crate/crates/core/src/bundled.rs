//! Reference data compiled into the library: per-batch measurements of the
//! four networks on Titan X Pascal and Maxwell, the published derived tables,
//! training plans, accuracy tables and the two device profiles.

use serde::Deserialize;

use crate::energymodel::{parse_measurements, parse_plans, parse_profile, DeviceProfile, MeasurementRecord, Step, TrainingPlan};
use crate::tuner::{parse_accuracy, AccuracyRecord};

pub const MEASUREMENTS_CSV: &str = include_str!("../data/measurements.csv");
pub const PUBLISHED_PER_BATCH_CSV: &str = include_str!("../data/published_per_batch.csv");
pub const ITERATIONS_CSV: &str = include_str!("../data/iterations.csv");
pub const EDP_TABLES_CSV: &str = include_str!("../data/edp_tables.csv");
pub const GFLOPS_PER_WATT_CSV: &str = include_str!("../data/gflops_per_watt.csv");
pub const CHARACTERIZATION_CSV: &str = include_str!("../data/characterization.csv");
pub const ACCURACY_TUM_GAID_CSV: &str = include_str!("../data/accuracy_tum_gaid.csv");
pub const ACCURACY_IMAGENET_CSV: &str = include_str!("../data/accuracy_imagenet.csv");
pub const TITAN_X_PASCAL: &str = include_str!("../data/titan_x_pascal.profile");
pub const TITAN_X_MAXWELL: &str = include_str!("../data/titan_x_maxwell.profile");

pub const PASCAL: &str = "titan_x_pascal";
pub const MAXWELL: &str = "titan_x_maxwell";

fn rows<T: for<'de> Deserialize<'de>>(text: &str) -> Vec<T> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .expect("bundled table is well-formed")
}

pub fn measurements() -> Vec<MeasurementRecord> {
    parse_measurements(MEASUREMENTS_CSV.as_bytes()).expect("bundled measurements are well-formed")
}

pub fn plans() -> Vec<TrainingPlan> {
    parse_plans(ITERATIONS_CSV.as_bytes()).expect("bundled plans are well-formed")
}

pub fn plan(network: &str, batch: u64) -> Option<TrainingPlan> {
    plans().into_iter().find(|p| p.network == network && p.batch == batch)
}

pub fn device_profiles() -> Vec<DeviceProfile> {
    [TITAN_X_PASCAL, TITAN_X_MAXWELL]
        .iter()
        .map(|t| parse_profile(t).expect("bundled profile is well-formed"))
        .collect()
}

/// Looks a bundled device up by full name or by generation (`pascal`).
pub fn device_profile(name: &str) -> Option<DeviceProfile> {
    device_profiles().into_iter().find(|d| d.name == name || d.generation == name)
}

pub fn accuracy_tum_gaid() -> Vec<AccuracyRecord> {
    parse_accuracy(ACCURACY_TUM_GAID_CSV.as_bytes()).expect("bundled accuracy table is well-formed")
}

pub fn accuracy_imagenet() -> Vec<AccuracyRecord> {
    parse_accuracy(ACCURACY_IMAGENET_CSV.as_bytes()).expect("bundled accuracy table is well-formed")
}

/// A row of the published execution-time and energy tables.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedRow {
    pub device: String,
    pub network: String,
    pub step: Step,
    pub gpus: u32,
    pub batch: u64,
    pub seconds_per_batch: f64,
    pub samples_per_second: f64,
    pub seconds_whole_training: f64,
    pub joules_per_batch: f64,
    pub joules_per_second: f64,
    pub joules_whole_training: f64,
}

pub fn published_per_batch() -> Vec<PublishedRow> {
    rows(PUBLISHED_PER_BATCH_CSV)
}

/// A row of the published EDP tables, with the boldface markers as 0/1.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EdpRow {
    pub device: String,
    pub network: String,
    pub gpus: u32,
    pub batch: u64,
    pub kiloseconds: f64,
    pub megajoules: f64,
    pub edp: f64,
    pub best_time: u8,
    pub best_energy: u8,
    pub best_edp: u8,
}

pub fn edp_tables() -> Vec<EdpRow> {
    rows(EDP_TABLES_CSV)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GflopsRow {
    pub device: String,
    pub network: String,
    pub gpus: u32,
    pub batch: u64,
    pub gflops_per_watt: f64,
}

pub fn gflops_per_watt_table() -> Vec<GflopsRow> {
    rows(GFLOPS_PER_WATT_CSV)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CharacterizationRow {
    pub network: String,
    pub ops_millions: f64,
    pub read_mb: f64,
    pub written_mb: f64,
    pub ctc: f64,
}

pub fn characterization() -> Vec<CharacterizationRow> {
    rows(CHARACTERIZATION_CSV)
}
