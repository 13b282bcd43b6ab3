pub mod agent;
pub mod bench;
pub mod clock;
pub mod codec;
pub mod config;
pub mod credential;
pub mod crypto;
pub mod idp;
pub mod inference;
pub mod scenarios;
pub mod sp;
pub mod wire;
