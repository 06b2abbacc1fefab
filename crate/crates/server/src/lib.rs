//! HTTP service for blind double-stimulus rating and single-image refinement,
//! plus blocking clients for the external model backends.
//!
//! Endpoints:
//!
//! | method | path                | purpose                                        |
//! |--------|---------------------|------------------------------------------------|
//! | GET    | `/api/tasks/next`   | next unrated task for the bearer's evaluator   |
//! | POST   | `/api/ratings`      | submit scores for slots A and B                |
//! | GET    | `/api/reports/dmos` | metric report over the stored ratings          |
//! | POST   | `/api/refine`       | refine one uploaded image given context texts  |
//! | GET    | `/api/rubric`       | the five rubric grades                         |

pub mod app;
pub mod blinding;
pub mod clients;
pub mod store;
pub mod tasks;

pub use app::{router, serve, AppState, ServeError, ServeOptions};
pub use clients::{probe, HttpGrounding, HttpTextGen};
