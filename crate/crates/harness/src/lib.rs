//! Test harness for the federation CAP: a throwaway PKI, device agents, a
//! RADIUS forwarder, a mock MDM, a webhook receiver and a scenario runner.

pub mod agent;
pub mod client;
pub mod detail;
pub mod forwarder;
pub mod mock_mdm;
pub mod pki;
pub mod scenario;
pub mod server;
pub mod webhook_rx;
