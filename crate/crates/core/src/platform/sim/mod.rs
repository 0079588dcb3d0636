//! Deterministic discrete-event simulated crowd platform.

mod platform;
mod population;
mod profile;

pub use platform::{SimPlatform, SimStats, SIM_ADAPTER_ID};
pub use population::{
    hourly_rates, local_hour, simulate_arrivals, simulate_worker_behavior, worker_speed, Behavior, BehaviorContext,
    SimEvent, SimEventKind,
};
pub use profile::{crossover_key, day_curve, CountryProfile, LogNormalSpec, PageBudget, PopulationProfile};
