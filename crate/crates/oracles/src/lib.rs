//! Slow, independent reference implementations for tests.
//!
//! Nothing here shares code with `mddkit-core`. Each oracle solves its
//! problem the obvious way (exhaustive enumeration, a textbook DP or a dense
//! simplex) and is only usable on tiny inputs.

pub mod ctc;
pub mod edit;
pub mod fd;
pub mod lp;
pub mod segment;
