//! Message fabric between workers, databuffers and the controller.

mod collectives;
mod fabric;
pub mod traffic;
pub mod wire;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::EndpointId;

pub use collectives::{all_to_all, barrier, gather_to, scatter_from};
pub use fabric::{bind_tcp, connect_tcp, create_fabric, Endpoint, Fabric, FabricOptions, HubLayout, TcpBinding};
pub use traffic::{CounterKey, LedgerSnapshot, TrafficClass, TrafficLedger, TrafficReport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("could not bind listener: {0}")]
    Bind(String),
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error("peer of endpoint {0} closed the connection")]
    PeerClosed(EndpointId),
    #[error("payload of {len} bytes exceeds frame limit {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("endpoint {me} timed out waiting for src={src:?} tag={tag:#x} iteration={iteration}")]
    Timeout { me: EndpointId, src: Option<EndpointId>, tag: u32, iteration: u32 },
    #[error("endpoint {0} is not hosted by this fabric")]
    UnknownEndpoint(EndpointId),
    #[error("fabric aborted: {0}")]
    Aborted(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("collective: {0}")]
    Collective(String),
    #[error("i/o: {0}")]
    Io(String),
}

const IO_TIMED_OUT: &str = "timed out";

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Io(IO_TIMED_OUT.into()),
            _ => TransportError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Inproc,
    Tcp,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inproc" => Ok(Backend::Inproc),
            "tcp" => Ok(Backend::Tcp),
            other => Err(format!("unknown backend \"{other}\"")),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Inproc => "inproc",
            Backend::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: EndpointId,
    pub dst: EndpointId,
    pub tag: u32,
    pub iteration: u32,
    pub payload: Vec<u8>,
}

/// Iteration number carried by one-off setup transfers.
pub const SETUP_ITERATION: u32 = u32::MAX;

/// Tag layout: high byte is the message kind, low 24 bits an index (stage position).
pub mod tags {
    use super::traffic::TrafficClass;
    use super::wire::TAG_HANDSHAKE;

    pub const REDISTRIBUTE: u8 = 0x01;
    pub const COLLECT: u8 = 0x02;
    pub const DISPATCH: u8 = 0x03;
    pub const LOAD: u8 = 0x04;

    pub const METRICS: u8 = 0x10;
    pub const TRAFFIC: u8 = 0x11;
    pub const BARRIER: u8 = 0x12;
    pub const RELEASE: u8 = 0x13;
    pub const ABORT: u8 = 0x14;

    pub fn make(kind: u8, index: u32) -> u32 {
        ((kind as u32) << 24) | (index & 0x00FF_FFFF)
    }

    pub fn kind(tag: u32) -> u8 {
        (tag >> 24) as u8
    }

    pub fn class(tag: u32) -> TrafficClass {
        if tag == TAG_HANDSHAKE || kind(tag) >= METRICS {
            TrafficClass::Control
        } else {
            TrafficClass::Data
        }
    }
}
