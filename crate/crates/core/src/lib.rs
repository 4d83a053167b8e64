//! Headless engine for stand-in enhanced asynchronous meetings: live rooms
//! where an embodied agent represents an absent participant, tick-exact
//! recordings, first-person playback with comment capture, iteration
//! splicing and abridged review.

pub mod agent;
pub mod events;
pub mod model;
pub mod playback;
pub mod protocol;
pub mod recorder;
pub mod session;
pub mod sim;
pub mod store;
pub mod wav;
