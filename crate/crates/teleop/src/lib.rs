//! Teleoperation front end for limbkit: the WebSocket service, its wire
//! protocol, and the helpers behind the `limbkit` command.

pub mod plots;
pub mod protocol;
pub mod service;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/wire-protocol.md")]
    mod wire_protocol {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
