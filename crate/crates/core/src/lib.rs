//! Cost, energy and energy-delay modeling for CNN training configurations.
//!
//! The crate is organised bottom-up: [`arch`] describes networks, [`costmodel`]
//! counts their operations and memory traffic, [`powertrace`] turns power
//! samples into joules, [`energymodel`] holds per-batch measurements and fits,
//! [`multigpu`] models data-parallel sets, and [`tuner`] scores and ranks
//! complete training configurations. [`bundled`] carries reference data.

pub mod arch;
pub mod bundled;
pub mod costmodel;
pub mod energymodel;
pub mod fmt;
pub mod multigpu;
pub mod powertrace;
pub mod tuner;
