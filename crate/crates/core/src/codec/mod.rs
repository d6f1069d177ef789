//! Wire codecs for the CoAP-style and NDN-style messages, plus security
//! overhead accounting.

pub mod coap;
pub mod ndn;
pub mod overhead;

pub use coap::{decode_coap, encode_coap, CoapMessage, CoapOption, Code, MessageKind, MessageType};
pub use ndn::{decode_ndn, encode_ndn, Data, DataSecurity, Interest, Name, NdnPacket};
pub use overhead::{security_overhead, Direction, OverheadBreakdown, SecurityConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("{field} truncated")]
    Truncated { field: &'static str },
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("token length {0} exceeds 8 bytes")]
    TokenTooLong(usize),
    #[error("option {index} is out of ascending order")]
    UnsortedOptions { index: usize },
    #[error("option {index} value too long")]
    OptionTooLong { index: usize },
    #[error("option {index} truncated")]
    OptionTruncated { index: usize },
    #[error("option {index} uses reserved nibble 15")]
    ReservedOptionNibble { index: usize },
    #[error("option {index} number exceeds 65535")]
    OptionNumberOverflow { index: usize },
    #[error("payload marker followed by empty payload")]
    EmptyPayloadAfterMarker,
    #[error("tlv {tlv_type:#x} declares {declared} bytes but only {available} remain")]
    TlvLengthOverflow {
        tlv_type: u64,
        declared: u64,
        available: usize,
    },
    #[error("expected tlv {expected:#x}, found {found:#x}")]
    UnexpectedTlv { expected: u64, found: u64 },
    #[error("{field} has invalid length {len}")]
    BadFieldLength { field: &'static str, len: usize },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
}
