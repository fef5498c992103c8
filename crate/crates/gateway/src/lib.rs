//! Websocket gateway and command-line front end for a kitchenbot session.

pub mod cli;
pub mod server;

pub use server::Gateway;
