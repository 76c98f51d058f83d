//! Policy synthesis for video streaming over a shared wireless downlink.
//!
//! Each client's playback buffer is a small Markov decision process in which
//! the access point picks a video quality and a transmission power every
//! slot. Clients couple only through an average power budget, which is
//! relaxed with an energy price; every client then solves its own problem
//! and the price is tuned by subgradient ascent.

pub mod dp;
pub mod dual;
pub mod error;
pub mod fading;
pub mod instances;
pub mod markov;
pub mod model;
pub mod sim;
pub mod threshold;
pub mod verify;

pub use dp::{solve_average, solve_discounted, SolveOptions, SolveReport};
pub use dual::{subgradient_ascent, verify_primal_dual, AscentOptions, Certificate, DualState, SystemConfig};
pub use error::{Error, Result, Violation};
pub use fading::{ChannelModel, FadingPolicy};
pub use model::{Action, ClientModel};
pub use sim::{SimConfig, SimMetrics};
pub use threshold::{evaluate_exact, is_threshold, Policy, StationaryEvaluation};
