//! Secured request/response stacks for constrained networks and a
//! deterministic simulator to compare them.
//!
//! Four stacks share one codec and security-context layer:
//! payload-protected CoAP ([`coap_protected`]), CoAP over a DTLS-style
//! channel ([`channel_security`]), OSCORE-style object security
//! ([`object_security`]) and NDN-style named data ([`ndn_stack`]). All of
//! them run over byte-exact 802.15.4 framing ([`lowpan`]) inside the
//! discrete-event simulator in [`netsim`]; [`experiments`] drives scenarios
//! and extracts metrics.

pub mod channel_security;
pub mod coap_protected;
pub mod codec;
pub mod experiments;
#[doc(hidden)]
pub mod fuzz_targets;
pub mod lowpan;
pub mod ndn_stack;
pub mod netsim;
pub mod object_security;
pub mod secctx;
