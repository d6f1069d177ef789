//! Compact CoAP-style message codec.
//!
//! The layout follows RFC 7252: a 4-byte base header (version, type, token
//! length, code, message id), the token, delta-encoded options and an
//! optional payload behind a `0xFF` marker.

use std::fmt;

use super::CodecError;

pub const VERSION: u8 = 1;
pub const MAX_TOKEN_LEN: usize = 8;
pub const PAYLOAD_MARKER: u8 = 0xFF;

pub mod option {
    pub const URI_HOST: u16 = 3;
    pub const OSCORE: u16 = 9;
    pub const URI_PATH: u16 = 11;
    pub const CONTENT_FORMAT: u16 = 12;
    pub const URI_QUERY: u16 = 15;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum MessageType {
    Confirmable,
    NonConfirmable,
    Acknowledgement,
    Reset,
}

impl MessageType {
    fn bits(self) -> u8 {
        match self {
            MessageType::Confirmable => 0,
            MessageType::NonConfirmable => 1,
            MessageType::Acknowledgement => 2,
            MessageType::Reset => 3,
        }
    }

    fn from_bits(bits: u8) -> Self {
        match bits & 0x03 {
            0 => MessageType::Confirmable,
            1 => MessageType::NonConfirmable,
            2 => MessageType::Acknowledgement,
            _ => MessageType::Reset,
        }
    }
}

/// Request/response code as `class.detail` packed into one byte.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code(0x00);
    pub const GET: Code = Code(0x01);
    pub const POST: Code = Code(0x02);
    pub const FETCH: Code = Code(0x05);
    pub const CHANGED: Code = Code(0x44);
    pub const CONTENT: Code = Code(0x45);
    pub const UNAUTHORIZED: Code = Code(0x81);
    pub const BAD_REQUEST: Code = Code(0x80);

    pub const fn new(class: u8, detail: u8) -> Code {
        Code((class << 5) | (detail & 0x1F))
    }

    pub fn class(self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(self) -> u8 {
        self.0 & 0x1F
    }

    pub fn kind(self) -> MessageKind {
        if self.class() == 0 {
            MessageKind::Request
        } else {
            MessageKind::Response
        }
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class(), self.detail())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MessageKind {
    Request,
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

impl CoapOption {
    pub fn new(number: u16, value: impl Into<Vec<u8>>) -> Self {
        CoapOption {
            number,
            value: value.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CoapMessage {
    pub msg_type: MessageType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    /// Sorted ascending by option number; repeated numbers are allowed.
    pub options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    /// Confirmable GET with one Uri-Path option per `/`-separated segment.
    pub fn get(message_id: u16, token: &[u8], path: &str) -> Self {
        let options = path
            .split('/')
            .filter(|s| !s.is_empty())
            .map(|seg| CoapOption::new(option::URI_PATH, seg.as_bytes()))
            .collect();
        CoapMessage {
            msg_type: MessageType::Confirmable,
            code: Code::GET,
            message_id,
            token: token.to_vec(),
            options,
            payload: Vec::new(),
        }
    }

    /// Piggybacked 2.05 Content answer carrying the request's token and id.
    pub fn content_response(request: &CoapMessage, payload: &[u8]) -> Self {
        CoapMessage {
            msg_type: MessageType::Acknowledgement,
            code: Code::CONTENT,
            message_id: request.message_id,
            token: request.token.clone(),
            options: Vec::new(),
            payload: payload.to_vec(),
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.code.kind()
    }

    pub fn is_confirmable(&self) -> bool {
        self.msg_type == MessageType::Confirmable
    }

    pub fn option(&self, number: u16) -> Option<&CoapOption> {
        self.options.iter().find(|o| o.number == number)
    }

    /// Uri-Path options joined with `/`, with a leading slash.
    pub fn uri_path(&self) -> String {
        let mut path = String::new();
        for opt in self.options.iter().filter(|o| o.number == option::URI_PATH) {
            path.push('/');
            path.push_str(&String::from_utf8_lossy(&opt.value));
        }
        path
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        encode_coap(self)
    }
}

fn nibble_split(value: usize) -> (u8, Option<u8>, Option<u16>) {
    match value {
        0..=12 => (value as u8, None, None),
        13..=268 => (13, Some((value - 13) as u8), None),
        _ => (14, None, Some((value - 269) as u16)),
    }
}

fn push_ext(out: &mut Vec<u8>, one: Option<u8>, two: Option<u16>) {
    if let Some(b) = one {
        out.push(b);
    }
    if let Some(w) = two {
        out.extend_from_slice(&w.to_be_bytes());
    }
}

/// Encodes the option block starting from delta base zero.
pub fn encode_options(options: &[CoapOption], out: &mut Vec<u8>) -> Result<(), CodecError> {
    let mut last = 0u16;
    for (index, opt) in options.iter().enumerate() {
        if opt.number < last {
            return Err(CodecError::UnsortedOptions { index });
        }
        if opt.value.len() > 269 + u16::MAX as usize {
            return Err(CodecError::OptionTooLong { index });
        }
        let (dn, d1, d2) = nibble_split((opt.number - last) as usize);
        let (ln, l1, l2) = nibble_split(opt.value.len());
        out.push((dn << 4) | ln);
        push_ext(out, d1, d2);
        push_ext(out, l1, l2);
        out.extend_from_slice(&opt.value);
        last = opt.number;
    }
    Ok(())
}

pub fn encode_coap(msg: &CoapMessage) -> Result<Vec<u8>, CodecError> {
    if msg.token.len() > MAX_TOKEN_LEN {
        return Err(CodecError::TokenTooLong(msg.token.len()));
    }
    let mut out = Vec::with_capacity(4 + msg.token.len() + msg.payload.len() + 16);
    out.push((VERSION << 6) | (msg.msg_type.bits() << 4) | msg.token.len() as u8);
    out.push(msg.code.0);
    out.extend_from_slice(&msg.message_id.to_be_bytes());
    out.extend_from_slice(&msg.token);
    encode_options(&msg.options, &mut out)?;
    if !msg.payload.is_empty() {
        out.push(PAYLOAD_MARKER);
        out.extend_from_slice(&msg.payload);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn remaining(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn read_ext(cur: &mut Cursor<'_>, nibble: u8, index: usize) -> Result<usize, CodecError> {
    match nibble {
        0..=12 => Ok(nibble as usize),
        13 => {
            let b = cur.take(1).ok_or(CodecError::OptionTruncated { index })?;
            Ok(b[0] as usize + 13)
        }
        14 => {
            let b = cur.take(2).ok_or(CodecError::OptionTruncated { index })?;
            Ok(u16::from_be_bytes([b[0], b[1]]) as usize + 269)
        }
        _ => Err(CodecError::ReservedOptionNibble { index }),
    }
}

/// Decodes an option block until the payload marker or end of input.
/// Returns the options and whether a payload marker was consumed.
pub fn decode_options(bytes: &[u8]) -> Result<(Vec<CoapOption>, usize), CodecError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let mut options = Vec::new();
    let mut number = 0usize;
    while let Some(&first) = cur.remaining().first() {
        if first == PAYLOAD_MARKER {
            break;
        }
        let index = options.len();
        cur.pos += 1;
        let delta = read_ext(&mut cur, first >> 4, index)?;
        let len = read_ext(&mut cur, first & 0x0F, index)?;
        number += delta;
        if number > u16::MAX as usize {
            return Err(CodecError::OptionNumberOverflow { index });
        }
        let value = cur.take(len).ok_or(CodecError::OptionTruncated { index })?;
        options.push(CoapOption::new(number as u16, value));
    }
    Ok((options, cur.pos))
}

pub fn decode_coap(bytes: &[u8]) -> Result<CoapMessage, CodecError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let header = cur.take(4).ok_or(CodecError::Truncated { field: "header" })?;
    if header[0] >> 6 != VERSION {
        return Err(CodecError::BadVersion(header[0] >> 6));
    }
    let tkl = (header[0] & 0x0F) as usize;
    if tkl > MAX_TOKEN_LEN {
        return Err(CodecError::TokenTooLong(tkl));
    }
    let msg_type = MessageType::from_bits(header[0] >> 4);
    let code = Code(header[1]);
    let message_id = u16::from_be_bytes([header[2], header[3]]);
    let token = cur.take(tkl).ok_or(CodecError::Truncated { field: "token" })?.to_vec();
    let (options, used) = decode_options(cur.remaining())?;
    cur.pos += used;
    let payload = match cur.remaining().split_first() {
        None => Vec::new(),
        Some((_, [])) => return Err(CodecError::EmptyPayloadAfterMarker),
        Some((_, rest)) => rest.to_vec(),
    };
    Ok(CoapMessage {
        msg_type,
        code,
        message_id,
        token,
        options,
        payload,
    })
}
