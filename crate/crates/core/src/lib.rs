pub mod api;
pub mod config;
pub mod cr;
pub mod dag;
pub mod harness;
pub mod image;
pub mod process;
pub mod sim;
pub mod speculation;
mod wire;
